//! Reference segmentation network.
//!
//! A deliberately small, fully differentiable stand-in for a production
//! segmentation model: `conv(k, hidden) -> ReLU -> conv(k, 1) -> sigmoid`
//! with same zero padding, so the per-cell probability map has exactly the
//! shape of the input image (and of the ground-truth mask). Gradients are
//! analytic; [`backward`] is checked against central finite differences in
//! the test suites.
//!
//! Parameters live in one flat vector in a fixed order:
//! conv1 kernels `[hidden][in][kernel…]`, conv1 biases `[hidden]`,
//! conv2 kernels `[hidden][kernel…]`, conv2 bias `[1]`. Kernel positions are
//! row-major. Rank-2 and rank-3 grids share one code path: a rank-2 image is
//! treated as a depth-1 volume with a depth-1 kernel.

use serde::{Deserialize, Serialize};

use crate::error::{GmlError, Result};
use crate::grid::{Grid, ProbabilityGrid};
use crate::rng::Rng;

/// Architecture descriptor for [`ModelWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub spatial_rank: u8,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            spatial_rank: 2,
            in_channels: 1,
            hidden_channels: 8,
            kernel: 3,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return Err(GmlError::InvalidShape(format!(
                "spatial_rank must be 2 or 3, got {}",
                self.spatial_rank
            )));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(GmlError::InvalidShape(format!(
                "kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.hidden_channels == 0 {
            return Err(GmlError::InvalidShape("hidden_channels must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(GmlError::InvalidShape("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of cells in one kernel (`kernel^spatial_rank`).
    pub fn kernel_volume(&self) -> usize {
        self.kernel.pow(u32::from(self.spatial_rank))
    }

    /// Exact flat parameter count implied by this architecture.
    pub fn param_count(&self) -> usize {
        let kv = self.kernel_volume();
        self.hidden_channels * self.in_channels * kv // conv1 kernels
            + self.hidden_channels // conv1 biases
            + self.hidden_channels * kv // conv2 kernels
            + 1 // conv2 bias
    }

    fn conv1_weights(&self) -> std::ops::Range<usize> {
        0..self.hidden_channels * self.in_channels * self.kernel_volume()
    }

    fn conv1_bias(&self) -> std::ops::Range<usize> {
        let s = self.conv1_weights().end;
        s..s + self.hidden_channels
    }

    fn conv2_weights(&self) -> std::ops::Range<usize> {
        let s = self.conv1_bias().end;
        s..s + self.hidden_channels * self.kernel_volume()
    }

    fn conv2_bias(&self) -> std::ops::Range<usize> {
        let s = self.conv2_weights().end;
        s..s + 1
    }
}

/// Flat parameter vector plus its architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
}

impl ModelWeights {
    pub fn zeros(arch: ArchSpec) -> Result<ModelWeights> {
        arch.validate()?;
        Ok(ModelWeights {
            arch,
            params: vec![0.0; arch.param_count()],
        })
    }

    /// Fan-in-scaled uniform initialization: every parameter of a layer is
    /// drawn from `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, conv1 first.
    pub fn init(arch: ArchSpec, rng: &mut Rng) -> Result<ModelWeights> {
        arch.validate()?;
        let kv = arch.kernel_volume();
        let bound1 = 1.0 / ((arch.in_channels * kv) as f64).sqrt();
        let bound2 = 1.0 / ((arch.hidden_channels * kv) as f64).sqrt();
        let mut params = Vec::with_capacity(arch.param_count());
        for _ in arch.conv1_weights() {
            params.push(rng.uniform_in(-bound1, bound1));
        }
        for _ in arch.conv1_bias() {
            params.push(rng.uniform_in(-bound1, bound1));
        }
        for _ in arch.conv2_weights() {
            params.push(rng.uniform_in(-bound2, bound2));
        }
        for _ in arch.conv2_bias() {
            params.push(rng.uniform_in(-bound2, bound2));
        }
        Ok(ModelWeights { arch, params })
    }

    fn check_finite(&self) -> Result<()> {
        if self.params.len() != self.arch.param_count() {
            return Err(GmlError::ShapeMismatch(format!(
                "parameter vector has length {}, architecture implies {}",
                self.params.len(),
                self.arch.param_count()
            )));
        }
        match self.params.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(GmlError::NonFiniteModel(i)),
            None => Ok(()),
        }
    }
}

/// Spatial extents normalized to a depth/height/width volume.
#[derive(Clone, Copy)]
struct Dims {
    d: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn volume(self) -> usize {
        self.d * self.h * self.w
    }
}

struct Geometry {
    dims: Dims,
    kdims: Dims,
    out_shape: Vec<usize>,
}

/// Validates the image against the architecture and normalizes extents.
///
/// A single-channel model takes an image of rank `spatial_rank`; a
/// multi-channel model takes rank `spatial_rank + 1` with the leading extent
/// equal to `in_channels`.
fn geometry(arch: &ArchSpec, image: &Grid) -> Result<Geometry> {
    let rank = usize::from(arch.spatial_rank);
    let shape = image.shape();
    let spatial: &[usize] = if arch.in_channels == 1 {
        if shape.len() != rank {
            return Err(GmlError::ShapeMismatch(format!(
                "image rank {} does not match spatial_rank {rank}",
                shape.len()
            )));
        }
        shape
    } else {
        if shape.len() != rank + 1 || shape[0] != arch.in_channels {
            return Err(GmlError::ShapeMismatch(format!(
                "expected image shape [{}, <{rank} spatial extents>], got {shape:?}",
                arch.in_channels
            )));
        }
        &shape[1..]
    };
    let dims = match rank {
        2 => Dims {
            d: 1,
            h: spatial[0],
            w: spatial[1],
        },
        _ => Dims {
            d: spatial[0],
            h: spatial[1],
            w: spatial[2],
        },
    };
    let kdims = match rank {
        2 => Dims {
            d: 1,
            h: arch.kernel,
            w: arch.kernel,
        },
        _ => Dims {
            d: arch.kernel,
            h: arch.kernel,
            w: arch.kernel,
        },
    };
    Ok(Geometry {
        dims,
        kdims,
        out_shape: spatial.to_vec(),
    })
}

/// Same-padded convolution: `out[oc] = bias[oc] + sum_ic kernel[oc][ic] * input[ic]`.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    in_ch: usize,
    dims: Dims,
    kdims: Dims,
    kernels: &[f64],
    biases: &[f64],
    out_ch: usize,
    output: &mut [f64],
) {
    let vol = dims.volume();
    let kvol = kdims.volume();
    let (pd, ph, pw) = (kdims.d / 2, kdims.h / 2, kdims.w / 2);
    for oc in 0..out_ch {
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    let mut acc = biases[oc];
                    for ic in 0..in_ch {
                        let kbase = (oc * in_ch + ic) * kvol;
                        let ibase = ic * vol;
                        for kz in 0..kdims.d {
                            let iz = z + kz;
                            if iz < pd || iz - pd >= dims.d {
                                continue;
                            }
                            let iz = iz - pd;
                            for ky in 0..kdims.h {
                                let iy = y + ky;
                                if iy < ph || iy - ph >= dims.h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..kdims.w {
                                    let ix = x + kx;
                                    if ix < pw || ix - pw >= dims.w {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    acc += kernels[kbase + (kz * kdims.h + ky) * kdims.w + kx]
                                        * input[ibase + (iz * dims.h + iy) * dims.w + ix];
                                }
                            }
                        }
                    }
                    output[oc * vol + (z * dims.h + y) * dims.w + x] = acc;
                }
            }
        }
    }
}

struct ForwardPass {
    z1: Vec<f64>,
    a1: Vec<f64>,
    out: Vec<f64>,
}

fn run_forward(w: &ModelWeights, image: &Grid, geo: &Geometry) -> ForwardPass {
    let arch = &w.arch;
    let vol = geo.dims.volume();
    let mut z1 = vec![0.0; arch.hidden_channels * vol];
    conv_forward(
        image.data(),
        arch.in_channels,
        geo.dims,
        geo.kdims,
        &w.params[arch.conv1_weights()],
        &w.params[arch.conv1_bias()],
        arch.hidden_channels,
        &mut z1,
    );
    let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
    let mut z2 = vec![0.0; vol];
    conv_forward(
        &a1,
        arch.hidden_channels,
        geo.dims,
        geo.kdims,
        &w.params[arch.conv2_weights()],
        &w.params[arch.conv2_bias()],
        1,
        &mut z2,
    );
    let out: Vec<f64> = z2.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    ForwardPass { z1, a1, out }
}

/// Per-cell tumor probability for `image` under weights `w`.
///
/// Output shape equals the (spatial) input shape; values are strictly inside
/// `(0, 1)` because the head is a sigmoid.
pub fn forward(w: &ModelWeights, image: &Grid) -> Result<ProbabilityGrid> {
    w.check_finite()?;
    let geo = geometry(&w.arch, image)?;
    let pass = run_forward(w, image, &geo);
    Grid::from_vec(&geo.out_shape, pass.out)
}

/// Exact parameter gradient given `upstream = dLoss/dP`.
///
/// Recomputes the forward pass internally, then applies the chain rule
/// through the sigmoid head, conv2, the ReLU, and conv1. Returns a vector
/// aligned with [`ModelWeights::params`].
pub fn backward(w: &ModelWeights, image: &Grid, upstream: &Grid) -> Result<Vec<f64>> {
    w.check_finite()?;
    let geo = geometry(&w.arch, image)?;
    if upstream.shape() != geo.out_shape.as_slice() {
        return Err(GmlError::ShapeMismatch(format!(
            "upstream shape {:?} does not match output shape {:?}",
            upstream.shape(),
            geo.out_shape
        )));
    }
    let arch = &w.arch;
    let pass = run_forward(w, image, &geo);
    let dims = geo.dims;
    let kdims = geo.kdims;
    let vol = dims.volume();
    let kvol = kdims.volume();
    let (pd, ph, pw) = (kdims.d / 2, kdims.h / 2, kdims.w / 2);

    // Sigmoid head: dz2 = upstream * out * (1 - out).
    let dz2: Vec<f64> = upstream
        .data()
        .iter()
        .zip(&pass.out)
        .map(|(&u, &o)| u * o * (1.0 - o))
        .collect();

    let mut grad = vec![0.0; arch.param_count()];
    let (g_c1w, g_rest) = grad.split_at_mut(arch.conv1_weights().end);
    let (g_c1b, g_rest) = g_rest.split_at_mut(arch.hidden_channels);
    let (g_c2w, g_c2b) = g_rest.split_at_mut(arch.hidden_channels * kvol);

    let c2w = &w.params[arch.conv2_weights()];
    let mut da1 = vec![0.0; arch.hidden_channels * vol];

    // conv2: one output channel over `hidden` input channels.
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let g = dz2[(z * dims.h + y) * dims.w + x];
                if g == 0.0 {
                    continue;
                }
                g_c2b[0] += g;
                for ic in 0..arch.hidden_channels {
                    let kbase = ic * kvol;
                    let ibase = ic * vol;
                    for kz in 0..kdims.d {
                        let iz = z + kz;
                        if iz < pd || iz - pd >= dims.d {
                            continue;
                        }
                        let iz = iz - pd;
                        for ky in 0..kdims.h {
                            let iy = y + ky;
                            if iy < ph || iy - ph >= dims.h {
                                continue;
                            }
                            let iy = iy - ph;
                            for kx in 0..kdims.w {
                                let ix = x + kx;
                                if ix < pw || ix - pw >= dims.w {
                                    continue;
                                }
                                let ix = ix - pw;
                                let k = kbase + (kz * kdims.h + ky) * kdims.w + kx;
                                let i = ibase + (iz * dims.h + iy) * dims.w + ix;
                                g_c2w[k] += g * pass.a1[i];
                                da1[i] += g * c2w[k];
                            }
                        }
                    }
                }
            }
        }
    }

    // ReLU: pass gradient only where the pre-activation was positive.
    let dz1: Vec<f64> = da1
        .iter()
        .zip(&pass.z1)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();

    // conv1: `hidden` output channels over `in_channels` input channels.
    for oc in 0..arch.hidden_channels {
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    let g = dz1[oc * vol + (z * dims.h + y) * dims.w + x];
                    if g == 0.0 {
                        continue;
                    }
                    g_c1b[oc] += g;
                    for ic in 0..arch.in_channels {
                        let kbase = (oc * arch.in_channels + ic) * kvol;
                        let ibase = ic * vol;
                        for kz in 0..kdims.d {
                            let iz = z + kz;
                            if iz < pd || iz - pd >= dims.d {
                                continue;
                            }
                            let iz = iz - pd;
                            for ky in 0..kdims.h {
                                let iy = y + ky;
                                if iy < ph || iy - ph >= dims.h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..kdims.w {
                                    let ix = x + kx;
                                    if ix < pw || ix - pw >= dims.w {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    g_c1w[kbase + (kz * kdims.h + ky) * kdims.w + kx] += g
                                        * image.data()
                                            [ibase + (iz * dims.h + iy) * dims.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(grad)
}

/// Optimizer state paired with a parameter vector of matching length.
#[derive(Debug, Clone)]
pub struct OptState {
    pub learning_rate: f64,
    pub step_count: u64,
    pub kind: OptKind,
}

#[derive(Debug, Clone)]
pub enum OptKind {
    Sgd {
        momentum: f64,
        velocity: Vec<f64>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        first_moment: Vec<f64>,
        second_moment: Vec<f64>,
    },
}

impl OptState {
    pub fn sgd(learning_rate: f64, momentum: f64, n_params: usize) -> OptState {
        OptState {
            learning_rate,
            step_count: 0,
            kind: OptKind::Sgd {
                momentum,
                velocity: vec![0.0; n_params],
            },
        }
    }

    /// Adam with the standard constants `beta = (0.9, 0.999)`, `eps = 1e-8`.
    pub fn adam(learning_rate: f64, n_params: usize) -> OptState {
        OptState {
            learning_rate,
            step_count: 0,
            kind: OptKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                first_moment: vec![0.0; n_params],
                second_moment: vec![0.0; n_params],
            },
        }
    }

    /// Same hyperparameters, zeroed buffers and step count.
    ///
    /// Used for a model that arrived over the wire: checkpoints carry weights
    /// only, so the receiving side starts the copy with fresh optimizer state.
    pub fn fresh(&self) -> OptState {
        match &self.kind {
            OptKind::Sgd { momentum, velocity } => {
                OptState::sgd(self.learning_rate, *momentum, velocity.len())
            }
            OptKind::Adam { first_moment, .. } => {
                OptState::adam(self.learning_rate, first_moment.len())
            }
        }
    }

    fn buffer_len(&self) -> usize {
        match &self.kind {
            OptKind::Sgd { velocity, .. } => velocity.len(),
            OptKind::Adam { first_moment, .. } => first_moment.len(),
        }
    }
}

/// One optimizer step; pure, returns the updated weights and state.
pub fn opt_step(w: ModelWeights, grad: &[f64], st: OptState) -> Result<(ModelWeights, OptState)> {
    if grad.len() != w.params.len() || st.buffer_len() != w.params.len() {
        return Err(GmlError::ShapeMismatch(format!(
            "opt_step lengths disagree: params {}, grad {}, buffers {}",
            w.params.len(),
            grad.len(),
            st.buffer_len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GmlError::NonFiniteGradient(i));
    }
    let mut w = w;
    let mut st = st;
    let lr = st.learning_rate;
    st.step_count += 1;
    match &mut st.kind {
        OptKind::Sgd { momentum, velocity } => {
            for ((p, v), &g) in w.params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
                *v = *momentum * *v + g;
                *p -= lr * *v;
            }
        }
        OptKind::Adam {
            beta1,
            beta2,
            epsilon,
            first_moment,
            second_moment,
        } => {
            let t = st.step_count as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for (((p, m), v), &g) in w
                .params
                .iter_mut()
                .zip(first_moment.iter_mut())
                .zip(second_moment.iter_mut())
                .zip(grad)
            {
                *m = *beta1 * *m + (1.0 - *beta1) * g;
                *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + *epsilon);
            }
        }
    }
    Ok((w, st))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GMLW";
const CHECKPOINT_VERSION: u16 = 1;
/// Fixed header: magic, version, rank, in/hidden channels, kernel, count.
pub const CHECKPOINT_HEADER_LEN: usize = 4 + 2 + 1 + 2 + 2 + 2 + 8;

/// Exact serialized size of a checkpoint for `arch`.
pub fn checkpoint_len(arch: &ArchSpec) -> usize {
    CHECKPOINT_HEADER_LEN + 8 * arch.param_count()
}

/// Serialize weights to the little-endian `GMLW` checkpoint format.
pub fn checkpoint_write(w: &ModelWeights) -> Result<Vec<u8>> {
    w.check_finite()?;
    let mut buf = Vec::with_capacity(checkpoint_len(&w.arch));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(w.arch.spatial_rank);
    buf.extend_from_slice(&(w.arch.in_channels as u16).to_le_bytes());
    buf.extend_from_slice(&(w.arch.hidden_channels as u16).to_le_bytes());
    buf.extend_from_slice(&(w.arch.kernel as u16).to_le_bytes());
    buf.extend_from_slice(&(w.params.len() as u64).to_le_bytes());
    for p in &w.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    Ok(buf)
}

/// Deserialize a `GMLW` checkpoint; the round trip is bitwise exact.
pub fn checkpoint_read(bytes: &[u8]) -> Result<ModelWeights> {
    let corrupt = |why: &str| GmlError::CorruptCheckpoint(why.to_string());
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(GmlError::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let arch = ArchSpec {
        spatial_rank: bytes[6],
        in_channels: usize::from(u16::from_le_bytes([bytes[7], bytes[8]])),
        hidden_channels: usize::from(u16::from_le_bytes([bytes[9], bytes[10]])),
        kernel: usize::from(u16::from_le_bytes([bytes[11], bytes[12]])),
    };
    arch.validate()
        .map_err(|e| GmlError::CorruptCheckpoint(format!("invalid architecture: {e}")))?;
    let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(GmlError::CorruptCheckpoint(format!(
            "param count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    if bytes.len() != CHECKPOINT_HEADER_LEN + 8 * count {
        return Err(corrupt("payload length does not match param count"));
    }
    let mut params = Vec::with_capacity(count);
    for chunk in bytes[CHECKPOINT_HEADER_LEN..].chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(corrupt("non-finite parameter value"));
        }
        params.push(v);
    }
    Ok(ModelWeights { arch, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numerical_grad};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_grid(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Grid {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform_in(lo, hi)).collect();
        Grid::from_vec(shape, data).unwrap()
    }

    #[test]
    fn zero_weights_predict_one_half_everywhere() {
        let w = ModelWeights::zeros(ArchSpec::default()).unwrap();
        let img = Grid::new(&[4, 4], 2.5).unwrap();
        let p = forward(&w, &img).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut rng = Rng::derive(1, "shape-test");
        let w = ModelWeights::init(ArchSpec::default(), &mut rng).unwrap();
        let img = random_grid(&[7, 5], &mut rng, -1.0, 1.0);
        let p = forward(&w, &img).unwrap();
        assert_eq!(p.shape(), &[7, 5]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_pixel_matches_scalar_evaluation() {
        // 1x1 kernels reduce the network to scalars:
        // sigmoid(w2 * relu(w1 * x + b1) + b2).
        let arch = ArchSpec {
            spatial_rank: 2,
            in_channels: 1,
            hidden_channels: 1,
            kernel: 1,
        };
        let w = ModelWeights {
            arch,
            params: vec![0.5, 0.1, -0.3, 0.2], // w1, b1, w2, b2
        };
        let x = 0.7;
        let img = Grid::from_vec(&[1, 1], vec![x]).unwrap();
        let p = forward(&w, &img).unwrap();
        let z1: f64 = 0.5 * x + 0.1;
        let expected = 1.0 / (1.0 + (-(-0.3 * z1.max(0.0) + 0.2)).exp());
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        let w = ModelWeights::zeros(ArchSpec::default()).unwrap();
        let img = Grid::new(&[3, 3, 3], 0.0).unwrap();
        assert!(matches!(
            forward(&w, &img),
            Err(GmlError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_weight_is_rejected() {
        let mut w = ModelWeights::zeros(ArchSpec::default()).unwrap();
        w.params[3] = f64::NAN;
        let img = Grid::new(&[4, 4], 0.0).unwrap();
        assert!(matches!(forward(&w, &img), Err(GmlError::NonFiniteModel(3))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = Rng::derive(2, "zero-upstream");
        let w = ModelWeights::init(ArchSpec::default(), &mut rng).unwrap();
        let img = random_grid(&[5, 5], &mut rng, -1.0, 1.0);
        let g = backward(&w, &img, &Grid::zeros(&[5, 5]).unwrap()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = Rng::derive(3, "linearity");
        let w = ModelWeights::init(ArchSpec::default(), &mut rng).unwrap();
        let img = random_grid(&[6, 6], &mut rng, -1.0, 1.0);
        let up = random_grid(&[6, 6], &mut rng, -1.0, 1.0);
        let up2 = up.map(|v| 2.0 * v);
        let g1 = backward(&w, &img, &up).unwrap();
        let g2 = backward(&w, &img, &up2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_rank2() {
        let mut rng = Rng::derive(4, "fd-rank2");
        let w = ModelWeights::init(ArchSpec::default(), &mut rng).unwrap();
        let img = random_grid(&[6, 6], &mut rng, -1.0, 1.0);
        let up = random_grid(&[6, 6], &mut rng, -1.0, 1.0);
        let analytic = backward(&w, &img, &up).unwrap();
        // Scalar probe: L(theta) = <upstream, forward(theta)>.
        let numeric = numerical_grad(&w.params, 1e-5, |params| {
            let probe = ModelWeights {
                arch: w.arch,
                params: params.to_vec(),
            };
            let p = forward(&probe, &img).unwrap();
            p.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn backward_matches_finite_differences_rank3() {
        let arch = ArchSpec {
            spatial_rank: 3,
            in_channels: 1,
            hidden_channels: 3,
            kernel: 3,
        };
        let mut rng = Rng::derive(5, "fd-rank3");
        let w = ModelWeights::init(arch, &mut rng).unwrap();
        let img = random_grid(&[4, 4, 4], &mut rng, -1.0, 1.0);
        let up = random_grid(&[4, 4, 4], &mut rng, -1.0, 1.0);
        let analytic = backward(&w, &img, &up).unwrap();
        let numeric = numerical_grad(&w.params, 1e-5, |params| {
            let probe = ModelWeights {
                arch,
                params: params.to_vec(),
            };
            let p = forward(&probe, &img).unwrap();
            p.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn backward_matches_finite_differences_multichannel() {
        let arch = ArchSpec {
            spatial_rank: 2,
            in_channels: 2,
            hidden_channels: 3,
            kernel: 3,
        };
        let mut rng = Rng::derive(6, "fd-multichannel");
        let w = ModelWeights::init(arch, &mut rng).unwrap();
        let img = random_grid(&[2, 5, 5], &mut rng, -1.0, 1.0);
        let up = random_grid(&[5, 5], &mut rng, -1.0, 1.0);
        let analytic = backward(&w, &img, &up).unwrap();
        let numeric = numerical_grad(&w.params, 1e-5, |params| {
            let probe = ModelWeights {
                arch,
                params: params.to_vec(),
            };
            let p = forward(&probe, &img).unwrap();
            p.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sgd_step_by_hand() {
        let arch = ArchSpec {
            spatial_rank: 2,
            in_channels: 1,
            hidden_channels: 1,
            kernel: 1,
        };
        let w = ModelWeights {
            arch,
            params: vec![1.0; 4],
        };
        let st = OptState::sgd(0.1, 0.0, 4);
        let (w, st) = opt_step(w, &[1.0; 4], st).unwrap();
        assert!(w.params.iter().all(|&p| (p - 0.9).abs() < 1e-15));
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_about_learning_rate() {
        let arch = ArchSpec {
            spatial_rank: 2,
            in_channels: 1,
            hidden_channels: 1,
            kernel: 1,
        };
        let w = ModelWeights {
            arch,
            params: vec![0.5; 4],
        };
        let st = OptState::adam(1e-3, 4);
        let (w, _) = opt_step(w, &[1.0; 4], st).unwrap();
        // Bias-corrected first step moves by lr / (1 + eps) ~= lr.
        for &p in &w.params {
            assert!((p - (0.5 - 1e-3)).abs() < 1e-10, "param {p}");
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut rng = Rng::derive(7, "zero-lr");
        let w = ModelWeights::init(ArchSpec::default(), &mut rng).unwrap();
        let before = w.params.clone();
        let n = before.len();
        let g: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let (w, _) = opt_step(w, &g, OptState::sgd(0.0, 0.9, n)).unwrap();
        assert_eq!(w.params, before);
        let (w, _) = opt_step(w, &g, OptState::adam(0.0, n)).unwrap();
        assert_eq!(w.params, before);
    }

    #[test]
    fn zero_gradient_zero_momentum_leaves_params_unchanged() {
        let w = ModelWeights::zeros(ArchSpec::default()).unwrap();
        let n = w.params.len();
        let before = w.params.clone();
        let (w, _) = opt_step(w, &vec![0.0; n], OptState::sgd(0.1, 0.0, n)).unwrap();
        assert_eq!(w.params, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let w = ModelWeights::zeros(ArchSpec::default()).unwrap();
        let n = w.params.len();
        let mut g = vec![0.0; n];
        g[5] = f64::INFINITY;
        assert!(matches!(
            opt_step(w, &g, OptState::adam(1e-3, n)),
            Err(GmlError::NonFiniteGradient(5))
        ));
    }

    #[test]
    fn checkpoint_length_formula() {
        let arch = ArchSpec::default();
        let w = ModelWeights::zeros(arch).unwrap();
        let bytes = checkpoint_write(&w).unwrap();
        assert_eq!(bytes.len(), CHECKPOINT_HEADER_LEN + 8 * arch.param_count());
        assert_eq!(bytes.len(), checkpoint_len(&arch));
    }

    #[test]
    fn checkpoint_truncation_is_detected() {
        let mut rng = Rng::derive(8, "ckpt-trunc");
        let w = ModelWeights::init(ArchSpec::default(), &mut rng).unwrap();
        let bytes = checkpoint_write(&w).unwrap();
        assert!(matches!(
            checkpoint_read(&bytes[..bytes.len() - 3]),
            Err(GmlError::CorruptCheckpoint(_))
        ));
        assert!(matches!(
            checkpoint_read(b"NOPE"),
            Err(GmlError::CorruptCheckpoint(_))
        ));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bitwise(seed in 0u64..1_000_000) {
            let mut rng = Rng::derive(seed, "ckpt-roundtrip");
            let w = ModelWeights::init(ArchSpec::default(), &mut rng).unwrap();
            let bytes = checkpoint_write(&w).unwrap();
            let back = checkpoint_read(&bytes).unwrap();
            prop_assert_eq!(&back.arch, &w.arch);
            for (a, b) in back.params.iter().zip(&w.params) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            let again = checkpoint_write(&back).unwrap();
            prop_assert_eq!(again, bytes);
        }
    }
}
