//! Diagonal Gaussian-mixture head over soft tokens.
//!
//! Two views of the same distribution: [`GmmParams`] is a host-side `f64`
//! value used for sampling and guidance, [`GmmBatch`] is the differentiable
//! tensor form the training loss is computed with.

use std::f64::consts::PI;
use std::sync::Mutex;

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, logsumexp_last, Linear, ParamStore};
use crate::rng::StreamRng;

pub const LOG_SCALE_MIN: f64 = -7.0;
pub const LOG_SCALE_MAX: f64 = 7.0;

/// Mixture logits (k), means (k×d), and log-scales (k×d), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub k: usize,
    pub d: usize,
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl GmmParams {
    pub fn new(k: usize, d: usize, logits: Vec<f64>, means: Vec<f64>, log_scales: Vec<f64>) -> Result<Self> {
        if logits.len() != k || means.len() != k * d || log_scales.len() != k * d {
            return Err(Error::Shape(format!(
                "mixture with k={k}, d={d} needs {k}/{}/{} values, got {}/{}/{}",
                k * d,
                k * d,
                logits.len(),
                means.len(),
                log_scales.len()
            )));
        }
        let all_finite = logits.iter().chain(&means).chain(&log_scales).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Numeric("mixture parameters must be finite".into()));
        }
        Ok(Self { k, d, logits, means, log_scales })
    }

    pub fn param_count(&self) -> usize {
        self.k * (2 * self.d + 1)
    }

    fn log_weights(&self, temperature: f64) -> Vec<f64> {
        let scaled: Vec<f64> = self.logits.iter().map(|l| l / temperature).collect();
        let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scaled.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        scaled.into_iter().map(|l| l - lse).collect()
    }

    fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        (0..self.d)
            .map(|j| {
                let ls = self.log_scales[c * self.d + j];
                let z = (x[j] - self.means[c * self.d + j]) * (-ls).exp();
                -0.5 * z * z - ls - half_log_2pi
            })
            .sum()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let lw = self.log_weights(1.0);
        let terms: Vec<f64> = (0..self.k).map(|c| lw[c] + self.component_log_density(c, x)).collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn mean(&self) -> Vec<f64> {
        let w: Vec<f64> = self.log_weights(1.0).into_iter().map(f64::exp).collect();
        (0..self.d)
            .map(|j| (0..self.k).map(|c| w[c] * self.means[c * self.d + j]).sum())
            .collect()
    }
}

/// Negative log-density of `target` under the mixture, in nats.
pub fn gmm_nll(params: &GmmParams, target: &[f64]) -> f64 {
    -params.log_prob(target)
}

fn pick(rng: &mut StreamRng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Ancestral draw: component from `softmax(logits / τ_mix)`, then a Gaussian
/// with scales multiplied by `τ_scale`. `τ_mix = 0` picks the top component.
pub fn gmm_sample(params: &GmmParams, rng: &mut StreamRng, tau_mix: f64, tau_scale: f64) -> Vec<f64> {
    let c = if tau_mix > 0.0 {
        let probs: Vec<f64> = params.log_weights(tau_mix).into_iter().map(f64::exp).collect();
        pick(rng, &probs)
    } else {
        let _: f64 = rng.gen();
        (0..params.k)
            .max_by(|&a, &b| params.logits[a].total_cmp(&params.logits[b]))
            .unwrap_or(0)
    };
    (0..params.d)
        .map(|j| {
            let eps: f64 = StandardNormal.sample(rng);
            params.means[c * params.d + j] + eps * params.log_scales[c * params.d + j].exp() * tau_scale
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfgDraw {
    pub value: Vec<f64>,
    /// Set when every importance weight was non-finite and a uniform pick was used.
    pub degenerate: bool,
}

/// Guided draw approximating the density ∝ p_c(z)^{1+λ} p_u(z)^{−λ}:
/// `budget` candidates from p_c are resampled with weights (p_c/p_u)^λ.
/// With λ = 0 the first candidate is returned and no further randomness is used.
pub fn cfg_sample(
    cond: &GmmParams,
    uncond: &GmmParams,
    lambda: f64,
    rng: &mut StreamRng,
    budget: usize,
    tau_mix: f64,
    tau_scale: f64,
) -> Result<CfgDraw> {
    if !(lambda >= 0.0) || budget == 0 {
        return Err(Error::OutOfRange(format!(
            "guidance needs λ ≥ 0 and a positive candidate budget, got λ={lambda}, K={budget}"
        )));
    }
    if cond.d != uncond.d {
        return Err(Error::Shape("conditional and unconditional mixtures differ in d".into()));
    }
    if lambda == 0.0 {
        return Ok(CfgDraw {
            value: gmm_sample(cond, rng, tau_mix, tau_scale),
            degenerate: false,
        });
    }
    let candidates: Vec<Vec<f64>> = (0..budget).map(|_| gmm_sample(cond, rng, tau_mix, tau_scale)).collect();
    let log_w: Vec<f64> = candidates
        .iter()
        .map(|z| lambda * (cond.log_prob(z) - uncond.log_prob(z)))
        .collect();
    let m = log_w.iter().copied().filter(|w| !w.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        let i = rng.gen_range(0..budget);
        return Ok(CfgDraw {
            value: candidates[i].clone(),
            degenerate: true,
        });
    }
    let w: Vec<f64> = log_w.iter().map(|l| if l.is_nan() { 0.0 } else { (l - m).exp() }).collect();
    let total: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
    let i = pick(rng, &probs);
    Ok(CfgDraw {
        value: candidates[i].clone(),
        degenerate: false,
    })
}

/// Mixture parameters for N positions, packed row-wise as
/// `[logits k | means k·d | log_scales k·d]`. Log-scales are stored raw and
/// clamped to `[LOG_SCALE_MIN, LOG_SCALE_MAX]` wherever they are read.
#[derive(Debug, Clone)]
pub struct GmmBatch {
    pub raw: Tensor,
    pub k: usize,
    pub d: usize,
}

impl GmmBatch {
    pub fn new(raw: Tensor, k: usize, d: usize) -> Result<Self> {
        let (_, w) = raw.dims2()?;
        if w != k * (2 * d + 1) {
            return Err(Error::Shape(format!("mixture rows need {} values for k={k}, d={d}, got {w}", k * (2 * d + 1))));
        }
        Ok(Self { raw, k, d })
    }

    /// Pack logits (N,k), means (N,k,d) and log-scales (N,k,d).
    pub fn from_parts(logits: &Tensor, means: &Tensor, log_scales: &Tensor) -> Result<Self> {
        let (n, k, d) = means.dims3()?;
        let raw = Tensor::cat(&[logits.clone(), means.reshape((n, k * d))?, log_scales.reshape((n, k * d))?], 1)?;
        Self::new(raw, k, d)
    }

    pub fn logits(&self) -> Result<Tensor> {
        Ok(self.raw.narrow(1, 0, self.k)?)
    }

    pub fn means(&self) -> Result<Tensor> {
        let n = self.rows()?;
        Ok(self.raw.narrow(1, self.k, self.k * self.d)?.reshape((n, self.k, self.d))?)
    }

    pub fn log_scales(&self) -> Result<Tensor> {
        let (n, k, d) = (self.rows()?, self.k, self.d);
        Ok(self
            .raw
            .narrow(1, k + k * d, k * d)?
            .reshape((n, k, d))?
            .clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)?)
    }

    /// Per-row negative log-density (N,) in f64, differentiable in both the
    /// parameters and `target` (N,d).
    pub fn nll(&self, target: &Tensor) -> Result<Tensor> {
        let raw = self.raw.contiguous()?;
        let target = target.to_dtype(raw.dtype())?.contiguous()?;
        Ok(raw.apply_op2(&target, MixtureNll::new(self.k, self.d))?)
    }

    /// The same quantity assembled from generic tensor ops.
    pub fn nll_reference(&self, target: &Tensor) -> Result<Tensor> {
        let (means, log_scales) = (self.means()?, self.log_scales()?);
        let diff = target.to_dtype(means.dtype())?.unsqueeze(1)?.broadcast_sub(&means)?;
        let z = diff.mul(&log_scales.neg()?.exp()?)?;
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let log_comp = ((z.sqr()? * -0.5)? - &log_scales)?;
        let log_comp = (log_comp.to_dtype(DType::F64)?.sum(D::Minus1)? - self.d as f64 * half_log_2pi)?;
        let log_w = log_softmax_last(&self.logits()?.to_dtype(DType::F64)?)?;
        Ok(logsumexp_last(&(log_comp + log_w)?)?.neg()?)
    }

    pub fn rows(&self) -> Result<usize> {
        Ok(self.raw.dim(0)?)
    }

    pub fn row(&self, i: usize) -> Result<GmmParams> {
        let (k, d) = (self.k, self.d);
        let v = self.raw.get(i)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        GmmParams::new(
            k,
            d,
            v[..k].to_vec(),
            v[k..k + k * d].to_vec(),
            v[k + k * d..].iter().map(|s| s.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)).collect(),
        )
    }
}

fn host_values(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("mixture NLL expects contiguous inputs".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("mixture NLL expects float inputs"),
    })
}

/// Per-element quantities kept from the forward pass for the gradient.
struct MixtureCache {
    /// Standardized residuals (x − μ)·e^{−s}, N·k·d.
    z: Vec<f64>,
    /// e^{−s}, N·k·d.
    inv_scale: Vec<f64>,
    /// Posterior responsibilities, N·k.
    resp: Vec<f64>,
    /// Mixture weights softmax(logits), N·k.
    prior: Vec<f64>,
}

/// Fused mixture NLL over packed rows `[logits k | means k·d | log_scales k·d]`,
/// log-scales clamped.
struct MixtureNll {
    k: usize,
    d: usize,
    cache: Mutex<Option<MixtureCache>>,
}

impl MixtureNll {
    fn new(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            cache: Mutex::new(None),
        }
    }

    fn width(&self) -> usize {
        self.k * (2 * self.d + 1)
    }

    fn compute(&self, p: &[f64], x: &[f64], n: usize) -> (Vec<f64>, MixtureCache) {
        let (k, d, w) = (self.k, self.d, self.width());
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let mut cache = MixtureCache {
            z: vec![0.0; n * k * d],
            inv_scale: vec![0.0; n * k * d],
            resp: vec![0.0; n * k],
            prior: vec![0.0; n * k],
        };
        let mut out = Vec::with_capacity(n);
        let mut terms = vec![0.0; k];
        for i in 0..n {
            let row = &p[i * w..(i + 1) * w];
            let xi = &x[i * d..(i + 1) * d];
            let logits = &row[..k];
            let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse_w = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
            for c in 0..k {
                let mut acc = logits[c] - lse_w - d as f64 * half_log_2pi;
                cache.prior[i * k + c] = (logits[c] - lse_w).exp();
                let base = (i * k + c) * d;
                for j in 0..d {
                    let ls = row[k + k * d + c * d + j].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
                    let inv = (-ls).exp();
                    let z = (xi[j] - row[k + c * d + j]) * inv;
                    cache.z[base + j] = z;
                    cache.inv_scale[base + j] = inv;
                    acc += -0.5 * z * z - ls;
                }
                terms[c] = acc;
            }
            let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            for c in 0..k {
                cache.resp[i * k + c] = (terms[c] - lse).exp();
            }
            out.push(-lse);
        }
        (out, cache)
    }
}

impl CustomOp2 for MixtureNll {
    fn name(&self) -> &'static str {
        "mixture-nll"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (p, x) = (host_values(s1, l1)?, host_values(s2, l2)?);
        let n = l1.dims()[0];
        if l1.dims() != [n, self.width()] || l2.dims() != [n, self.d] {
            candle_core::bail!("mixture NLL shape mismatch: {:?} vs {:?}", l1.dims(), l2.dims());
        }
        let (out, cache) = self.compute(&p, &x, n);
        *self.cache.lock().expect("mixture cache lock") = Some(cache);
        Ok((CpuStorage::F64(out), Shape::from(n)))
    }

    fn bwd(
        &self,
        params: &Tensor,
        target: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (k, d, w) = (self.k, self.d, self.width());
        let p = params.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let g = grad_res.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let n = g.len();
        let cache = match self.cache.lock().expect("mixture cache lock").take() {
            Some(c) => c,
            None => {
                let x = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                self.compute(&p, &x, n).1
            }
        };
        let mut gp = vec![0.0; n * w];
        let mut gx = vec![0.0; n * d];
        for i in 0..n {
            let row = &p[i * w..(i + 1) * w];
            let out = &mut gp[i * w..(i + 1) * w];
            for c in 0..k {
                let gr = g[i] * cache.resp[i * k + c];
                out[c] = g[i] * cache.prior[i * k + c] - gr;
                let base = (i * k + c) * d;
                for j in 0..d {
                    let z = cache.z[base + j];
                    let pull = gr * z * cache.inv_scale[base + j];
                    out[k + c * d + j] = -pull;
                    let raw_ls = row[k + k * d + c * d + j];
                    if (LOG_SCALE_MIN..=LOG_SCALE_MAX).contains(&raw_ls) {
                        out[k + k * d + c * d + j] = -gr * (z * z - 1.0);
                    }
                    gx[i * d + j] += pull;
                }
            }
        }
        let dev = params.device();
        Ok((
            Some(Tensor::from_vec(gp, (n, w), dev)?.to_dtype(params.dtype())?),
            Some(Tensor::from_vec(gx, (n, d), dev)?.to_dtype(target.dtype())?),
        ))
    }
}

/// Dense projection from backbone width to k(2d+1) mixture parameters.
#[derive(Debug, Clone)]
pub struct GmmHead {
    pub k: usize,
    pub d: usize,
    proj: Linear,
}

impl GmmHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, k: usize, d: usize) -> Result<Self> {
        Ok(Self {
            k,
            d,
            proj: Linear::new(store, name, width, k * (2 * d + 1), true)?,
        })
    }

    /// `hidden` is (N, width).
    pub fn forward(&self, hidden: &Tensor) -> Result<GmmBatch> {
        GmmBatch::new(self.proj.forward(hidden)?, self.k, self.d)
    }
}
