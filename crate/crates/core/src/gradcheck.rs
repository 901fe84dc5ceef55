//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;
use num_traits::Float;

use crate::error::Result;
use crate::tensor::Tensor;

/// A differentiable scalar function of one tensor: returns the value and
/// the analytic gradient with respect to its argument.
pub trait ScalarFn<T: Float> {
    fn eval(&mut self, x: &Tensor<T>) -> Result<(T, Tensor<T>)>;
}

impl<T: Float, F> ScalarFn<T> for F
where
    F: FnMut(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    fn eval(&mut self, x: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        self(x)
    }
}

/// Max over all coordinates of the relative error between the analytic
/// gradient and a central difference with step `eps`:
/// `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<T: Float>(mut f: impl ScalarFn<T>, x: &Tensor<T>, eps: T) -> Result<T> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(&mut f, x, eps, &coords)
}

/// Same as [`grad_check`] restricted to the listed coordinates; used when
/// the parameter tensor is too large to sweep exhaustively.
pub fn grad_check_at<T: Float>(
    f: &mut impl ScalarFn<T>,
    x: &Tensor<T>,
    eps: T,
    coords: &[usize],
) -> Result<T> {
    let (_, analytic) = f.eval(x)?;
    let mut worst = T::zero();
    let mut probe = x.clone();
    for &i in coords {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (fp, _) = f.eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (fm, _) = f.eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (eps + eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / T::one().max(a.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
