//! Routing latent channels between the autoregressive prior and a fixed
//! standard-normal prior, either after the flow or before it through a
//! learnable invertible linear map over patch channels.

use std::f64::consts::PI;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{patchify, PatchGeometry};
use crate::nn::{to_f64_vec, ParamStore};
use crate::rng::StreamRng;

pub const CONDITION_WARNING: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    None,
    PostFlow,
    PreFlowLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearInit {
    Identity,
    RandomOrthogonal,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorConfig {
    pub mode: FactorMode,
    /// Channels per token kept for the autoregressive prior.
    pub d: usize,
    pub init: LinearInit,
}

impl FactorConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.d == 0 || self.d > channels {
            return Err(Error::OutOfRange(format!("d = {} must lie in 1..={channels}", self.d)));
        }
        if self.mode == FactorMode::None && self.d != channels {
            return Err(Error::Config(format!(
                "factoring mode none requires d = C = {channels}, got {}",
                self.d
            )));
        }
        if self.mode == FactorMode::PreFlowLinear && self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "pre-flow factoring feeds d = {} channels to the coupling flow, which needs an even count",
                self.d
            )));
        }
        Ok(())
    }

    /// Channel count seen by the flow.
    pub fn flow_channels(&self, channels: usize) -> usize {
        match self.mode {
            FactorMode::PreFlowLinear => self.d,
            _ => channels,
        }
    }
}

/// `[ẑ, z̃]`: the first `d` channels and the rest (`None` when `d = C`).
pub fn split_post_flow(z: &Tensor, d: usize) -> Result<(Tensor, Option<Tensor>)> {
    let c = z.dim(D::Minus1)?;
    if d > c || d == 0 {
        return Err(Error::OutOfRange(format!("cannot keep {d} of {c} channels")));
    }
    if d == c {
        return Ok((z.clone(), None));
    }
    Ok((z.narrow(D::Minus1, 0, d)?, Some(z.narrow(D::Minus1, d, c - d)?)))
}

pub fn merge_channels(kept: &Tensor, factored: Option<&Tensor>) -> Result<Tensor> {
    Ok(match factored {
        Some(f) => Tensor::cat(&[kept, f], D::Minus1)?,
        None => kept.clone(),
    })
}

/// Standard-normal log-density summed over all but the batch axis, in f64.
pub fn gaussian_logprob(v: &Tensor) -> Result<Tensor> {
    let v = v.to_dtype(DType::F64)?;
    let per_entry = ((v.sqr()? + (2.0 * PI).ln())? * -0.5)?;
    let rank = per_entry.rank();
    Ok(per_entry.sum((1..rank).collect::<Vec<_>>())?)
}

/// log|det W| with gradient W⁻ᵀ, evaluated through an LU factorization.
struct LogAbsDet;

fn square_from_storage(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<DMatrix<f64>> {
    let dims = layout.dims();
    if dims.len() != 2 || dims[0] != dims[1] {
        candle_core::bail!("log-abs-det expects a square matrix, got {dims:?}");
    }
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("log-abs-det expects a contiguous matrix".into()))?;
    let values: Vec<f64> = match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("log-abs-det expects a float matrix"),
    };
    Ok(DMatrix::from_row_slice(dims[0], dims[1], &values))
}

impl CustomOp1 for LogAbsDet {
    fn name(&self) -> &'static str {
        "log-abs-det"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let m = square_from_storage(storage, layout)?;
        let (_, logabs) = slogdet(&m);
        Ok((CpuStorage::F64(vec![logabs]), Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let n = arg.dim(0)?;
        let values = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let m = DMatrix::from_row_slice(n, n, &values);
        let inv = m
            .try_inverse()
            .ok_or_else(|| candle_core::Error::Msg("log-abs-det gradient of a singular matrix".into()))?;
        let inv_t = inv.transpose();
        let rows: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| inv_t[(i, j)]).collect();
        let g = Tensor::from_vec(rows, (n, n), arg.device())?;
        let g = g.broadcast_mul(&grad_res.to_dtype(DType::F64)?)?;
        Ok(Some(g.to_dtype(arg.dtype())?))
    }
}

/// Sign and log|det| through partial-pivot LU.
pub fn slogdet(m: &DMatrix<f64>) -> (f64, f64) {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut sign = if lu.p().determinant::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let mut logabs = 0.0;
    for i in 0..m.nrows() {
        let d = u[(i, i)];
        if d == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if d < 0.0 {
            sign = -sign;
        }
        logabs += d.abs().ln();
    }
    (sign, logabs)
}

/// Learnable C×C map applied to each flattened patch as `x ↦ W x`.
#[derive(Debug, Clone)]
pub struct InvertibleLinearMap {
    pub weight: Tensor,
}

impl InvertibleLinearMap {
    pub const PARAM: &'static str = "linear.weight";

    pub fn new(store: &mut ParamStore, init: Vec<f64>, channels: usize) -> Result<Self> {
        let weight = store.from_values(Self::PARAM, &[channels, channels], init)?;
        let map = Self { weight };
        map.checked_slogdet()?;
        Ok(map)
    }

    pub fn channels(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.channels();
        Ok(DMatrix::from_row_slice(n, n, &to_f64_vec(&self.weight)?))
    }

    /// `(sign, log|det W|)` for the current weights.
    pub fn slogdet(&self) -> Result<(f64, f64)> {
        Ok(slogdet(&self.matrix()?))
    }

    fn checked_slogdet(&self) -> Result<(f64, f64)> {
        let (sign, logabs) = self.slogdet()?;
        if sign == 0.0 || !logabs.is_finite() {
            return Err(Error::Singular(format!("log|det W| = {logabs}")));
        }
        Ok((sign, logabs))
    }

    pub fn condition_number(&self) -> Result<f64> {
        let sv = self.matrix()?.singular_values();
        let max = sv.max();
        let min = sv.min();
        Ok(if min > 0.0 { max / min } else { f64::INFINITY })
    }

    /// A warning string once the condition number passes [`CONDITION_WARNING`].
    pub fn condition_warning(&self) -> Result<Option<String>> {
        let k = self.condition_number()?;
        Ok((k > CONDITION_WARNING).then(|| format!("linear map condition number {k:.3e} exceeds {CONDITION_WARNING:.0e}")))
    }

    /// `tokens · log|det W|` as a differentiable f64 scalar.
    pub fn volume_term(&self, tokens: usize) -> Result<Tensor> {
        self.checked_slogdet()?;
        Ok((self.weight.apply_op1(LogAbsDet)? * tokens as f64)?)
    }

    fn inverse_transpose(&self) -> Result<Tensor> {
        let inv = self
            .matrix()?
            .try_inverse()
            .ok_or_else(|| Error::Singular("linear map is not invertible".into()))?;
        let n = self.channels();
        let rows: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (j, i))).map(|(r, c)| inv[(r, c)]).collect();
        Ok(Tensor::from_vec(rows, (n, n), &Device::Cpu)?.to_dtype(self.weight.dtype())?)
    }
}

/// Output of [`apply_linear`]: flow input, Gaussian part, and `T·log|det W|`.
#[derive(Debug, Clone)]
pub struct LinearSplit {
    pub kept: Tensor,
    pub factored: Option<Tensor>,
    pub volume: Tensor,
}

pub fn apply_linear(xp: &Tensor, map: &InvertibleLinearMap, d: usize) -> Result<LinearSplit> {
    let tokens = xp.dim(1)?;
    let mapped = xp.broadcast_matmul(&map.weight.t()?)?;
    let (kept, factored) = split_post_flow(&mapped, d)?;
    Ok(LinearSplit {
        kept,
        factored,
        volume: map.volume_term(tokens)?,
    })
}

pub fn invert_linear(kept: &Tensor, factored: Option<&Tensor>, map: &InvertibleLinearMap) -> Result<Tensor> {
    let merged = merge_channels(kept, factored)?;
    Ok(merged.broadcast_matmul(&map.inverse_transpose()?)?)
}

pub fn identity_init(channels: usize) -> Vec<f64> {
    let mut w = vec![0.0; channels * channels];
    for i in 0..channels {
        w[i * channels + i] = 1.0;
    }
    w
}

pub fn random_orthogonal_init(channels: usize, rng: &mut StreamRng) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(channels, channels, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign-fix so the draw is Haar distributed.
    for j in 0..channels {
        if r[(j, j)] < 0.0 {
            for i in 0..channels {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    (0..channels).flat_map(|i| (0..channels).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect()
}

/// Principal directions of flattened patches, no whitening.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// Row-major C×C; row `i` is the i-th principal direction.
    pub weight: Vec<f64>,
    /// Descending covariance eigenvalues.
    pub eigenvalues: Vec<f64>,
    pub channels: usize,
}

pub const PCA_MIN_IMAGES: usize = 256;

pub fn patch_covariance(images: &[Vec<f32>], geometry: PatchGeometry) -> Result<DMatrix<f64>> {
    let c = geometry.channels();
    let mut sum = vec![0.0f64; c];
    let mut outer = DMatrix::<f64>::zeros(c, c);
    let mut count = 0usize;
    for image in images {
        let grid = patchify(image, geometry)?;
        for t in 0..grid.tokens() {
            let row: Vec<f64> = grid.token(t).iter().map(|&v| v as f64).collect();
            for i in 0..c {
                sum[i] += row[i];
                for j in i..c {
                    outer[(i, j)] += row[i] * row[j];
                }
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for i in 0..c {
        for j in i..c {
            let v = outer[(i, j)] / n - (sum[i] / n) * (sum[j] / n);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

pub fn pca_init(images: &[Vec<f32>], geometry: PatchGeometry) -> Result<PcaBasis> {
    if images.len() < PCA_MIN_IMAGES {
        return Err(Error::Config(format!(
            "PCA initialization needs at least {PCA_MIN_IMAGES} images, got {}",
            images.len()
        )));
    }
    let c = geometry.channels();
    let cov = patch_covariance(images, geometry)?;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let bottom = eig.eigenvalues[order[c - 1]];
    if !(top > 0.0) || bottom <= top * 1e-12 {
        return Err(Error::Singular(format!(
            "degenerate patch covariance: eigenvalues span [{bottom:.3e}, {top:.3e}]"
        )));
    }
    let mut weight = Vec::with_capacity(c * c);
    for &k in &order {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        weight.extend(v.iter().map(|x| x * sign));
    }
    Ok(PcaBasis {
        weight,
        eigenvalues: order.iter().map(|&k| eig.eigenvalues[k]).collect(),
        channels: c,
    })
}
