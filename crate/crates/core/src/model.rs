//! The sliding-window binary keyword detector.
//!
//! Five convolutional layers (max-pooling after the first, a 3-stride
//! time-axis convolution in the second) followed by three fully connected
//! layers, consuming 76-frame windows of 64-dim LFBE features and emitting
//! a two-class posterior. Sliding the window over an utterance produces a
//! [`PosteriorTrack`], the object every loss in [`crate::loss`] consumes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::graph::{self, Graph, NodeId};
use crate::rng::{self, tag};
use crate::tensor::{fl, Tensor};

pub const WINDOW_FRAMES: usize = 76;
pub const INPUT_MELS: usize = 64;
pub const N_CLASSES: usize = 2;

/// One convolutional layer: output channels, kernel size, stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

/// Network hyperparameters. The layer count and layout are fixed by the
/// architecture (5 conv + 3 FC); channel widths are configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub conv: Vec<ConvSpec>,
    /// Pooling window applied after the first convolution.
    pub pool: (usize, usize),
    /// Fully connected widths; the last entry must be 2.
    pub fc: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        // Channel plan for the full-size detector: 5x5 front kernel, 3x3
        // elsewhere, time-stride 3 in the second layer.
        ArchConfig {
            conv: vec![
                ConvSpec { out_channels: 32, kh: 5, kw: 5, sh: 1, sw: 1 },
                ConvSpec { out_channels: 32, kh: 3, kw: 3, sh: 3, sw: 1 },
                ConvSpec { out_channels: 64, kh: 3, kw: 3, sh: 1, sw: 1 },
                ConvSpec { out_channels: 64, kh: 3, kw: 3, sh: 1, sw: 1 },
                ConvSpec { out_channels: 64, kh: 3, kw: 3, sh: 1, sw: 1 },
            ],
            pool: (2, 2),
            fc: vec![128, 64, N_CLASSES],
            dropout_rate: 0.3,
        }
    }
}

impl ArchConfig {
    /// A narrow variant of the same topology, sized for fast experiments
    /// on a laptop-class CPU.
    pub fn compact() -> Self {
        ArchConfig {
            conv: vec![
                ConvSpec { out_channels: 4, kh: 5, kw: 5, sh: 1, sw: 1 },
                ConvSpec { out_channels: 8, kh: 3, kw: 3, sh: 3, sw: 1 },
                ConvSpec { out_channels: 12, kh: 3, kw: 3, sh: 1, sw: 1 },
                ConvSpec { out_channels: 12, kh: 3, kw: 3, sh: 1, sw: 1 },
                ConvSpec { out_channels: 12, kh: 3, kw: 3, sh: 1, sw: 1 },
            ],
            pool: (2, 2),
            fc: vec![32, 16, N_CLASSES],
            dropout_rate: 0.3,
        }
    }

    /// A minimal instance of the topology for gradient verification.
    pub fn tiny() -> Self {
        ArchConfig {
            conv: vec![
                ConvSpec { out_channels: 2, kh: 5, kw: 5, sh: 1, sw: 1 },
                ConvSpec { out_channels: 2, kh: 3, kw: 3, sh: 3, sw: 1 },
                ConvSpec { out_channels: 3, kh: 3, kw: 3, sh: 1, sw: 1 },
                ConvSpec { out_channels: 3, kh: 3, kw: 3, sh: 1, sw: 1 },
                ConvSpec { out_channels: 3, kh: 3, kw: 3, sh: 1, sw: 1 },
            ],
            pool: (2, 2),
            fc: vec![8, 5, N_CLASSES],
            dropout_rate: 0.3,
        }
    }

    /// Activation shapes after each conv stage (pool folded into stage 0),
    /// checking chain compatibility for the 1x76x64 input.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.conv.is_empty() || self.fc.is_empty() {
            return Err(CoreError::Config { detail: "empty layer list".into() });
        }
        if *self.fc.last().unwrap() != N_CLASSES {
            return Err(CoreError::Config {
                detail: format!("final FC width must be {N_CLASSES}, got {}", self.fc.last().unwrap()),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::Config {
                detail: format!("dropout rate {} outside [0,1)", self.dropout_rate),
            });
        }
        let mut shapes = Vec::new();
        let (mut c, mut h, mut w) = (1usize, WINDOW_FRAMES, INPUT_MELS);
        for (i, spec) in self.conv.iter().enumerate() {
            if spec.kh > h || spec.kw > w || spec.sh == 0 || spec.sw == 0 {
                return Err(CoreError::Config {
                    detail: format!("conv{} kernel {}x{} does not fit {}x{}", i + 1, spec.kh, spec.kw, h, w),
                });
            }
            c = spec.out_channels;
            h = (h - spec.kh) / spec.sh + 1;
            w = (w - spec.kw) / spec.sw + 1;
            if i == 0 {
                let (ph, pw) = self.pool;
                if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
                    return Err(CoreError::Config {
                        detail: format!("pool {}x{} does not divide conv1 output {}x{}", ph, pw, h, w),
                    });
                }
                h /= ph;
                w /= pw;
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    pub fn flattened_size(&self) -> Result<usize> {
        let (c, h, w) = *self.conv_shapes()?.last().unwrap();
        Ok(c * h * w)
    }
}

/// All weights and biases of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    /// Per conv layer: (kernels `[out,in,kh,kw]`, bias `[out]`).
    pub conv: Vec<(Tensor<T>, Tensor<T>)>,
    /// Per FC layer: (weights `[m,n]`, bias `[m]`).
    pub fc: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Float> ModelParams<T> {
    /// Fan-in-scaled uniform initialization with zero biases, drawn from a
    /// stream keyed by `seed` so initialization is reproducible.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.conv_shapes()?;
        let mut conv = Vec::new();
        let mut c_in = 1usize;
        for (i, spec) in arch.conv.iter().enumerate() {
            let fan_in = c_in * spec.kh * spec.kw;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut r = rng::stream(seed, &[tag::INIT, i as u64]);
            let kernels = Tensor::from_fn(&[spec.out_channels, c_in, spec.kh, spec.kw], |_| {
                fl(rng::uniform_range(&mut r, -bound, bound))
            });
            conv.push((kernels, Tensor::zeros(&[spec.out_channels])));
            c_in = spec.out_channels;
        }
        let mut fc = Vec::new();
        let mut n_in = arch.flattened_size()?;
        for (j, &m) in arch.fc.iter().enumerate() {
            let bound = 1.0 / (n_in as f64).sqrt();
            let mut r = rng::stream(seed, &[tag::INIT, (arch.conv.len() + j) as u64]);
            let weights =
                Tensor::from_fn(&[m, n_in], |_| fl(rng::uniform_range(&mut r, -bound, bound)));
            fc.push((weights, Tensor::zeros(&[m])));
            n_in = m;
        }
        Ok(ModelParams { arch: arch.clone(), conv, fc })
    }

    /// Stable (name, tensor) listing in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.conv.iter().enumerate() {
            out.push((format!("conv{}.kernels", i + 1), k));
            out.push((format!("conv{}.bias", i + 1), b));
        }
        for (j, (w, b)) in self.fc.iter().enumerate() {
            out.push((format!("fc{}.weights", j + 1), w));
            out.push((format!("fc{}.bias", j + 1), b));
        }
        out
    }

    /// Mutable tensor listing in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for (k, b) in self.conv.iter_mut() {
            out.push(k);
            out.push(b);
        }
        for (w, b) in self.fc.iter_mut() {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn n_tensors(&self) -> usize {
        2 * (self.conv.len() + self.fc.len())
    }

    pub fn n_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenated parameter values as f64, in checkpoint order.
    pub fn to_flat_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for (_, t) in self.named_tensors() {
            out.extend(t.data().iter().map(|&v| v.to_f64().expect("finite")));
        }
        out
    }

    /// Rebuilds parameters from a flat f64 blob laid out as in
    /// [`Self::to_flat_f64`].
    pub fn from_flat_f64(arch: &ArchConfig, blob: &[f64]) -> Result<Self> {
        let mut params = ModelParams::<T>::init(arch, 0)?;
        let expected = params.n_scalars();
        if blob.len() != expected {
            return Err(CoreError::Dimension {
                op: "from_flat",
                detail: format!("blob has {} values, model wants {expected}", blob.len()),
            });
        }
        let mut offset = 0;
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = fl(blob[offset]);
                offset += 1;
            }
        }
        Ok(params)
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            conv: self.conv.iter().map(|(k, b)| (k.cast(), b.cast())).collect(),
            fc: self.fc.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
        }
    }
}

/// Forward mode: evaluation is deterministic; training applies inverted
/// dropout with masks drawn from the keyed stream `dropout_key`.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Eval,
    Train { dropout_key: u64 },
}

fn dropout_mask(key: u64, layer: u64, len: usize, rate: f64) -> Vec<bool> {
    let mut r = rng::stream(key, &[tag::DROPOUT, layer]);
    (0..len).map(|_| !rng::bernoulli(&mut r, rate)).collect()
}

fn apply_mask<T: Float>(x: &mut Tensor<T>, mask: &[bool], rate: f64) {
    let scale: T = fl(1.0 / (1.0 - rate));
    for (v, &keep) in x.data_mut().iter_mut().zip(mask) {
        *v = if keep { *v * scale } else { T::zero() };
    }
}

fn check_window<T: Float>(window: &Tensor<T>) -> Result<()> {
    if window.shape() != [1, WINDOW_FRAMES, INPUT_MELS] {
        return Err(CoreError::Dimension {
            op: "model_forward",
            detail: format!(
                "window shape {:?}, expected [1, {WINDOW_FRAMES}, {INPUT_MELS}]",
                window.shape()
            ),
        });
    }
    Ok(())
}

/// Value-only forward pass over one window; returns `(p0, p1)`.
pub fn model_forward<T: Float>(
    params: &ModelParams<T>,
    window: &Tensor<T>,
    mode: Mode,
) -> Result<(T, T)> {
    check_window(window)?;
    let rate = params.arch.dropout_rate;
    let mut x = window.clone();
    let mut layer = 0u64;
    for (i, (k, b)) in params.conv.iter().enumerate() {
        let spec = &params.arch.conv[i];
        x = graph::conv2d_fwd(&x, k, b, (spec.sh, spec.sw))?;
        x = x.map(|v| if v > T::zero() { v } else { T::zero() });
        if i == 0 {
            x = graph::max_pool2d_fwd(&x, params.arch.pool)?.0;
        }
        if let Mode::Train { dropout_key } = mode {
            let mask = dropout_mask(dropout_key, layer, x.numel(), rate);
            apply_mask(&mut x, &mask, rate);
        }
        layer += 1;
    }
    let n = x.numel();
    let mut v = x.reshaped(&[n])?;
    for (j, (w, b)) in params.fc.iter().enumerate() {
        v = graph::affine_fwd(&v, w, b)?;
        if j + 1 < params.fc.len() {
            v = v.map(|a| if a > T::zero() { a } else { T::zero() });
            if let Mode::Train { dropout_key } = mode {
                let mask = dropout_mask(dropout_key, layer, v.numel(), rate);
                apply_mask(&mut v, &mask, rate);
            }
            layer += 1;
        }
    }
    let p = graph::softmax_fwd(&v)?;
    Ok((p.data()[0], p.data()[1]))
}

/// Leaf ids of all parameters inserted into a graph, in layer order.
pub struct ModelLeaves {
    pub conv: Vec<(NodeId, NodeId)>,
    pub fc: Vec<(NodeId, NodeId)>,
}

impl ModelLeaves {
    /// (name, id) pairs in the same order as `ModelParams::named_tensors`.
    pub fn named_ids(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.conv.iter().enumerate() {
            out.push((format!("conv{}.kernels", i + 1), *k));
            out.push((format!("conv{}.bias", i + 1), *b));
        }
        for (j, (w, b)) in self.fc.iter().enumerate() {
            out.push((format!("fc{}.weights", j + 1), *w));
            out.push((format!("fc{}.bias", j + 1), *b));
        }
        out
    }
}

/// Inserts all parameters as graph leaves.
pub fn insert_leaves<T: Float>(g: &mut Graph<T>, params: &ModelParams<T>) -> ModelLeaves {
    ModelLeaves {
        conv: params.conv.iter().map(|(k, b)| (g.leaf(k.clone()), g.leaf(b.clone()))).collect(),
        fc: params.fc.iter().map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone()))).collect(),
    }
}

/// Differentiable forward pass over one window; returns the softmax node
/// (`[2]` posteriors). With the same `mode` this reproduces
/// [`model_forward`] bit for bit, dropout masks included.
pub fn model_forward_graph<T: Float>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    window: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    check_window(g.value(window))?;
    let rate = arch.dropout_rate;
    let mut x = window;
    let mut layer = 0u64;
    for (i, spec) in arch.conv.iter().enumerate() {
        let (k, b) = leaves.conv[i];
        x = g.conv2d(x, k, b, (spec.sh, spec.sw))?;
        x = g.relu(x)?;
        if i == 0 {
            x = g.max_pool2d(x, arch.pool)?;
        }
        if let Mode::Train { dropout_key } = mode {
            let mask = dropout_mask(dropout_key, layer, g.value(x).numel(), rate);
            x = g.dropout(x, mask, rate)?;
        }
        layer += 1;
    }
    let mut v = g.flatten(x)?;
    for (j, &(w, b)) in leaves.fc.iter().enumerate() {
        v = g.affine(v, w, b)?;
        if j + 1 < leaves.fc.len() {
            v = g.relu(v)?;
            if let Mode::Train { dropout_key } = mode {
                let mask = dropout_mask(dropout_key, layer, g.value(v).numel(), rate);
                v = g.dropout(v, mask, rate)?;
            }
            layer += 1;
        }
    }
    g.softmax(v)
}

/// Per-utterance posterior sequence: one `[p0, p1]` row per window
/// position, with the timestamp of each window's last input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTrack<T> {
    probs: Tensor<T>,
    times_ms: Vec<u32>,
    window_starts: Vec<usize>,
}

impl<T: Float> PosteriorTrack<T> {
    /// Builds a track from a `[rows, 2]` probability tensor. Rows must sum
    /// to one within 1e-6; times must be ascending.
    pub fn from_probs(probs: Tensor<T>, times_ms: Vec<u32>, window_starts: Vec<usize>) -> Result<Self> {
        let rows = match probs.shape() {
            [r, c] if *c == N_CLASSES => *r,
            s => {
                return Err(CoreError::Dimension {
                    op: "posterior_track",
                    detail: format!("probs shape {:?}, expected [rows, {N_CLASSES}]", s),
                })
            }
        };
        if times_ms.len() != rows || window_starts.len() != rows {
            return Err(CoreError::Dimension {
                op: "posterior_track",
                detail: "times/starts length mismatch".into(),
            });
        }
        if times_ms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Config { detail: "track times must be ascending".into() });
        }
        let tol: T = fl(1e-6);
        for r in 0..rows {
            let s = probs.data()[2 * r] + probs.data()[2 * r + 1];
            if (s - T::one()).abs() > tol {
                return Err(CoreError::Config {
                    detail: format!("track row {r} sums to {:?}", s.to_f64()),
                });
            }
        }
        Ok(PosteriorTrack { probs, times_ms, window_starts })
    }

    /// Convenience for tests: builds a track from keyword posteriors with
    /// 100 ms spacing.
    pub fn from_p1(p1: &[T]) -> Self {
        let probs = Tensor::new(
            vec![p1.len(), 2],
            p1.iter().flat_map(|&p| [T::one() - p, p]).collect(),
        )
        .expect("shape");
        let times = (0..p1.len()).map(|i| (i as u32 * 10 + 75) * 10).collect();
        let starts = (0..p1.len()).map(|i| i * 10).collect();
        PosteriorTrack { probs, times_ms: times, window_starts: starts }
    }

    pub fn rows(&self) -> usize {
        self.times_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    /// Posterior for `class` at `row`.
    pub fn p(&self, row: usize, class: usize) -> T {
        self.probs.data()[row * N_CLASSES + class]
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn times_ms(&self) -> &[u32] {
        &self.times_ms
    }

    pub fn window_starts(&self) -> &[usize] {
        &self.window_starts
    }

    /// Row index of the maximum keyword posterior (earliest on ties).
    pub fn peak_row(&self) -> usize {
        let mut best = 0;
        for r in 1..self.rows() {
            if self.p(r, 1) > self.p(best, 1) {
                best = r;
            }
        }
        best
    }

    /// Copies rows `[0, len)` into a new track.
    pub fn prefix(&self, len: usize) -> PosteriorTrack<T> {
        PosteriorTrack {
            probs: Tensor::new(
                vec![len, N_CLASSES],
                self.probs.data()[..len * N_CLASSES].to_vec(),
            )
            .expect("shape"),
            times_ms: self.times_ms[..len].to_vec(),
            window_starts: self.window_starts[..len].to_vec(),
        }
    }
}

/// Derives the dropout key for one window of a track from the track-level
/// key. The trainer uses this to rebuild a single window's graph with the
/// masks the track pass used.
pub fn window_dropout_key(track_key: u64, row: usize) -> u64 {
    rng::mix(track_key, &[row as u64])
}

/// Slides the detector over `features` (`[T', 64]`) with the given window
/// stride. Row `i` covers frames `[i*stride, i*stride + 76)`; its
/// timestamp is that of the window's last frame.
pub fn posterior_track<T: Float>(
    params: &ModelParams<T>,
    features: &Tensor<T>,
    stride_frames: usize,
    mode: Mode,
) -> Result<PosteriorTrack<T>> {
    let (t_frames, mels) = match features.shape() {
        [t, m] => (*t, *m),
        s => {
            return Err(CoreError::Dimension {
                op: "posterior_track",
                detail: format!("features shape {:?}, expected [frames, {INPUT_MELS}]", s),
            })
        }
    };
    if mels != INPUT_MELS {
        return Err(CoreError::Dimension {
            op: "posterior_track",
            detail: format!("features have {mels} mel bins, expected {INPUT_MELS}"),
        });
    }
    if stride_frames == 0 {
        return Err(CoreError::Config { detail: "posterior stride must be >= 1".into() });
    }
    if t_frames < WINDOW_FRAMES {
        return Err(CoreError::UtteranceTooShort { frames: t_frames, needed: WINDOW_FRAMES });
    }
    let rows = (t_frames - WINDOW_FRAMES) / stride_frames + 1;
    let mut probs = Vec::with_capacity(rows * N_CLASSES);
    let mut times = Vec::with_capacity(rows);
    let mut starts = Vec::with_capacity(rows);
    for i in 0..rows {
        let start = i * stride_frames;
        let window = extract_window(features, start);
        let row_mode = match mode {
            Mode::Eval => Mode::Eval,
            Mode::Train { dropout_key } => {
                Mode::Train { dropout_key: window_dropout_key(dropout_key, i) }
            }
        };
        let (p0, p1) = model_forward(params, &window, row_mode)?;
        probs.push(p0);
        probs.push(p1);
        times.push((start + WINDOW_FRAMES - 1) as u32 * dsp_frame_ms());
        starts.push(start);
    }
    Ok(PosteriorTrack {
        probs: Tensor::new(vec![rows, N_CLASSES], probs)?,
        times_ms: times,
        window_starts: starts,
    })
}

/// Copies window `[start, start+76)` of a feature tensor into `[1,76,64]`.
pub fn extract_window<T: Float>(features: &Tensor<T>, start: usize) -> Tensor<T> {
    let mels = features.shape()[1];
    Tensor::new(
        vec![1, WINDOW_FRAMES, mels],
        features.data()[start * mels..(start + WINDOW_FRAMES) * mels].to_vec(),
    )
    .expect("shape")
}

fn dsp_frame_ms() -> u32 {
    crate::dsp::FRAME_SHIFT_MS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any_window() -> Tensor<f64> {
        let mut r = rng::stream(31, &[]);
        Tensor::from_fn(&[1, WINDOW_FRAMES, INPUT_MELS], |_| rng::normal(&mut r))
    }

    #[test]
    fn default_arch_chains_to_two_classes() {
        let arch = ArchConfig::default();
        let shapes = arch.conv_shapes().unwrap();
        assert_eq!(shapes[0], (32, 36, 30));
        assert_eq!(shapes[1], (32, 12, 28));
        assert_eq!(*shapes.last().unwrap(), (64, 6, 22));
        assert_eq!(arch.flattened_size().unwrap(), 64 * 6 * 22);
    }

    #[test]
    fn zero_final_layer_gives_half_half() {
        let arch = ArchConfig::tiny();
        let mut params = ModelParams::<f64>::init(&arch, 5).unwrap();
        let last = params.fc.len() - 1;
        params.fc[last].0 = Tensor::zeros(params.fc[last].0.shape());
        params.fc[last].1 = Tensor::zeros(params.fc[last].1.shape());
        let (p0, p1) = model_forward(&params, &any_window(), Mode::Eval).unwrap();
        assert!((p0 - 0.5).abs() < 1e-12 && (p1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posteriors_sum_to_one() {
        let params = ModelParams::<f64>::init(&ArchConfig::tiny(), 6).unwrap();
        let (p0, p1) = model_forward(&params, &any_window(), Mode::Eval).unwrap();
        assert!(p0 > 0.0 && p1 > 0.0);
        assert!((p0 + p1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn train_mode_is_reproducible_under_fixed_key() {
        let params = ModelParams::<f64>::init(&ArchConfig::tiny(), 7).unwrap();
        let w = any_window();
        let a = model_forward(&params, &w, Mode::Train { dropout_key: 99 }).unwrap();
        let b = model_forward(&params, &w, Mode::Train { dropout_key: 99 }).unwrap();
        assert_eq!(a, b);
        let c = model_forward(&params, &w, Mode::Train { dropout_key: 100 }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_window_shape_is_a_dimension_error() {
        let params = ModelParams::<f64>::init(&ArchConfig::tiny(), 8).unwrap();
        let bad = Tensor::<f64>::zeros(&[1, 60, INPUT_MELS]);
        assert!(matches!(
            model_forward(&params, &bad, Mode::Eval),
            Err(CoreError::Dimension { .. })
        ));
    }

    fn random_features(frames: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(&[frames, INPUT_MELS], |_| rng::normal(&mut r))
    }

    #[test]
    fn track_row_count_and_times() {
        let params = ModelParams::<f64>::init(&ArchConfig::tiny(), 9).unwrap();
        let feats = random_features(76, 41);
        let t = posterior_track(&params, &feats, 10, Mode::Eval).unwrap();
        assert_eq!(t.rows(), 1);
        assert_eq!(t.times_ms(), &[750]);

        let feats = random_features(96, 42);
        let t = posterior_track(&params, &feats, 10, Mode::Eval).unwrap();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.window_starts(), &[0, 10, 20]);
        assert_eq!(t.times_ms(), &[750, 850, 950]);
    }

    #[test]
    fn track_rows_match_individual_forward_calls() {
        let params = ModelParams::<f64>::init(&ArchConfig::tiny(), 10).unwrap();
        let feats = random_features(110, 43);
        let t = posterior_track(&params, &feats, 10, Mode::Eval).unwrap();
        for (i, &start) in t.window_starts().iter().enumerate() {
            let w = extract_window(&feats, start);
            let (p0, p1) = model_forward(&params, &w, Mode::Eval).unwrap();
            assert_eq!(t.p(i, 0), p0);
            assert_eq!(t.p(i, 1), p1);
        }
    }

    #[test]
    fn too_short_utterance_errors() {
        let params = ModelParams::<f64>::init(&ArchConfig::tiny(), 11).unwrap();
        let feats = random_features(75, 44);
        assert!(matches!(
            posterior_track(&params, &feats, 10, Mode::Eval),
            Err(CoreError::UtteranceTooShort { frames: 75, needed: 76 })
        ));
    }

    #[test]
    fn trailing_frames_do_not_change_earlier_rows() {
        let params = ModelParams::<f64>::init(&ArchConfig::tiny(), 12).unwrap();
        let feats = random_features(120, 45);
        let longer = {
            let mut data = feats.data().to_vec();
            data.extend(random_features(30, 46).data());
            Tensor::new(vec![150, INPUT_MELS], data).unwrap()
        };
        let a = posterior_track(&params, &feats, 10, Mode::Eval).unwrap();
        let b = posterior_track(&params, &longer, 10, Mode::Eval).unwrap();
        for r in 0..a.rows() {
            assert_eq!(a.p(r, 1), b.p(r, 1));
        }
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let params = ModelParams::<f32>::init(&ArchConfig::tiny(), 13).unwrap();
        let blob = params.to_flat_f64();
        let back = ModelParams::<f32>::from_flat_f64(&params.arch, &blob).unwrap();
        assert_eq!(params, back);
    }
}
