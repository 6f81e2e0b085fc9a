//! Model assembly, the training objective, optimization, evaluation, and
//! generation pipelines.

use std::collections::HashMap;
use std::f64::consts::LN_2;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, LossTargets, SoftSampler, SoftSource, Temperatures, TextMode};
use crate::config::RunConfig;
use crate::curriculum::{apply_rgb_noise, dequantize, latent_jitter, NoiseSchedule};
use crate::data::{
    class_prefix, flip_horizontal, pack_example, text_prompt, DatasetFile, Direction, Label, LabelKind, MixedToken,
    PackConfig, PackedSequence, BOT,
};
use crate::error::{Error, Result};
use crate::factoring::{
    apply_linear, gaussian_logprob, identity_init, invert_linear, merge_channels, pca_init, random_orthogonal_init,
    split_post_flow, FactorConfig, FactorMode, InvertibleLinearMap, LinearInit,
};
use crate::flow::{patchify, unpatchify, Flow, FlowConfig, PatchGeometry, PatchGrid};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::{stream, stream_seed, Purpose, StreamRng};

/// Pixels enter the flow as `x / 128 − 1`.
pub const PIXEL_SCALE: f64 = 128.0;

/// Dataset facts the model is built around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub height: usize,
    pub width: usize,
    pub label_kind: LabelKind,
    pub num_classes: usize,
}

impl ModelShape {
    pub fn of(data: &DatasetFile) -> Self {
        Self {
            height: data.height,
            width: data.width,
            label_kind: data.label_kind,
            num_classes: data.num_classes,
        }
    }
}

/// Per-image averages over examples whose target is the image, in nats,
/// plus the per-token text NLL.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub image_bpd: f64,
    pub ar_nll: f64,
    pub gaussian_nll: f64,
    pub logdet: f64,
    pub volume_term: f64,
    /// `D · ln 128`, the constant from mapping pixels to [−1, 1).
    pub pixel_scale: f64,
    pub text_nll_per_token: f64,
    pub total: f64,
    pub image_examples: usize,
    pub text_tokens: usize,
}

pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    /// bits/dim per example; `None` where the image is not a target.
    pub per_example_bpd: Vec<Option<f64>>,
}

/// Dequantized images in pixel units plus their packed sequences.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub pixels: Vec<Vec<f64>>,
    pub seqs: Vec<PackedSequence>,
}

/// Extra knobs for [`JetFormer::loss_with`].
#[derive(Default)]
pub struct LossOptions<'a> {
    pub jitter: Option<&'a mut StreamRng>,
    /// Replacement text targets, indexed `[example][position]`.
    pub text_targets: Option<&'a [Vec<u32>]>,
    /// Added to the soft-token targets only, shape (B·T, d).
    pub soft_target_offset: Option<&'a Tensor>,
}

pub struct Encoded {
    /// (B, T, d) soft tokens.
    pub kept: Tensor,
    /// (B, T, C − d) Gaussian-prior channels.
    pub factored: Option<Tensor>,
    /// (B,) f64.
    pub logdet: Tensor,
    /// f64 scalar `T · log|det W|`.
    pub volume: Option<Tensor>,
}

pub struct JetFormer {
    pub cfg: RunConfig,
    pub shape: ModelShape,
    pub geometry: PatchGeometry,
    pub factor: FactorConfig,
    pub store: ParamStore,
    pub flow: Flow,
    pub linear: Option<InvertibleLinearMap>,
    pub backbone: Backbone,
}

impl JetFormer {
    /// Build a freshly initialized model. PCA initialization reads `pca_source`.
    pub fn new(cfg: &RunConfig, shape: ModelShape, pca_source: Option<&DatasetFile>) -> Result<Self> {
        let geometry = PatchGeometry::new(shape.height, shape.width, cfg.patch)?;
        let c = geometry.channels();
        let init = match (cfg.factor_mode, cfg.factor_init) {
            (FactorMode::PreFlowLinear, LinearInit::Identity) => Some(identity_init(c)),
            (FactorMode::PreFlowLinear, LinearInit::RandomOrthogonal) => {
                Some(random_orthogonal_init(c, &mut stream(cfg.seed, Purpose::Init, &[1])))
            }
            (FactorMode::PreFlowLinear, LinearInit::Pca) => {
                let data = pca_source.ok_or_else(|| Error::Config("PCA initialization needs training images".into()))?;
                let images: Vec<Vec<f32>> = data
                    .records
                    .iter()
                    .map(|r| r.pixels.iter().map(|&v| v as f32 / PIXEL_SCALE as f32 - 1.0).collect())
                    .collect();
                Some(pca_init(&images, geometry)?.weight)
            }
            _ => None,
        };
        Self::build(cfg, shape, init)
    }

    /// Build with an explicit linear-map initialization (ignored unless the
    /// factoring mode uses the map).
    pub fn build(cfg: &RunConfig, shape: ModelShape, linear_init: Option<Vec<f64>>) -> Result<Self> {
        cfg.validate()?;
        let geometry = PatchGeometry::new(shape.height, shape.width, cfg.patch)?;
        let c = geometry.channels();
        let factor = FactorConfig {
            mode: cfg.factor_mode,
            d: cfg.factor_dims_for(c),
            init: cfg.factor_init,
        };
        factor.validate(c)?;
        let mut store = ParamStore::new(cfg.precision.dtype(), cfg.seed);
        let linear = match cfg.factor_mode {
            FactorMode::PreFlowLinear => {
                let init = linear_init.unwrap_or_else(|| identity_init(c));
                Some(InvertibleLinearMap::new(&mut store, init, c)?)
            }
            _ => None,
        };
        let flow_cfg = FlowConfig {
            depth: cfg.flow_depth,
            width: cfg.flow_width,
            block_depth: cfg.flow_block_depth,
            heads: cfg.flow_heads,
            mlp_hidden: cfg.flow_mlp,
            tokens: geometry.tokens(),
            channels: factor.flow_channels(c),
        };
        let flow = Flow::new(&mut store, flow_cfg, &mut stream(cfg.seed, Purpose::Partition, &[]))?;
        let backbone = Backbone::new(
            &mut store,
            BackboneConfig {
                width: cfg.backbone_width,
                depth: cfg.backbone_depth,
                heads: cfg.backbone_heads,
                kv_heads: cfg.backbone_kv_heads,
                mlp_hidden: cfg.backbone_mlp,
                num_classes: shape.num_classes,
                soft_dim: factor.d,
                mixture_components: cfg.mixture_components,
                dropout: cfg.dropout,
            },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            geometry,
            factor,
            store,
            flow,
            linear,
            backbone,
        })
    }

    /// D = H·W·3.
    pub fn dims(&self) -> usize {
        self.geometry.dims()
    }

    pub fn tokens(&self) -> usize {
        self.geometry.tokens()
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn pack_config(&self, cond_drop: f64) -> PackConfig {
        PackConfig {
            image_tokens: self.tokens(),
            max_text: self.cfg.max_text,
            num_classes: self.shape.num_classes,
            cond_drop,
        }
    }

    fn patch_tensor(&self, pixels: &[Vec<f64>]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(pixels.len() * self.dims());
        for p in pixels {
            let scaled: Vec<f64> = p.iter().map(|v| v / PIXEL_SCALE - 1.0).collect();
            values.extend(patchify(&scaled, self.geometry)?.values);
        }
        let t = Tensor::from_vec(values, (pixels.len(), self.tokens(), self.channels()), self.store.device())?;
        Ok(t.to_dtype(self.dtype())?)
    }

    /// Dequantized pixels (pixel units) to soft tokens and Gaussian channels.
    pub fn encode(&self, pixels: &[Vec<f64>]) -> Result<Encoded> {
        let x = self.patch_tensor(pixels)?;
        let d = self.factor.d;
        match (self.factor.mode, &self.linear) {
            (FactorMode::PreFlowLinear, Some(map)) => {
                let split = apply_linear(&x, map, d)?;
                let out = self.flow.forward(&split.kept)?;
                Ok(Encoded {
                    kept: out.latents,
                    factored: split.factored,
                    logdet: out.logdet,
                    volume: Some(split.volume),
                })
            }
            (FactorMode::PostFlow, _) => {
                let out = self.flow.forward(&x)?;
                let (kept, factored) = split_post_flow(&out.latents, d)?;
                Ok(Encoded {
                    kept,
                    factored,
                    logdet: out.logdet,
                    volume: None,
                })
            }
            _ => {
                let out = self.flow.forward(&x)?;
                Ok(Encoded {
                    kept: out.latents,
                    factored: None,
                    logdet: out.logdet,
                    volume: None,
                })
            }
        }
    }

    /// Inverse of [`JetFormer::encode`] followed by floor-and-clamp to 8 bits.
    pub fn decode(&self, kept: &Tensor, factored: Option<&Tensor>) -> Result<Vec<Vec<u8>>> {
        let kept = kept.to_dtype(self.dtype())?;
        let factored = factored.map(|f| f.to_dtype(self.dtype())).transpose()?;
        let x = match (self.factor.mode, &self.linear) {
            (FactorMode::PreFlowLinear, Some(map)) => {
                let xk = self.flow.inverse(&kept)?;
                invert_linear(&xk, factored.as_ref(), map)?
            }
            (FactorMode::PostFlow, _) => self.flow.inverse(&merge_channels(&kept, factored.as_ref())?)?,
            _ => self.flow.inverse(&kept)?,
        };
        let b = x.dim(0)?;
        let values = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let per = self.dims();
        Ok((0..b)
            .map(|i| {
                let grid = PatchGrid {
                    geometry: self.geometry,
                    values: values[i * per..(i + 1) * per]
                        .iter()
                        .map(|v| ((v + 1.0) * PIXEL_SCALE).floor().clamp(0.0, 255.0) as u8)
                        .collect(),
                };
                unpatchify(&grid)
            })
            .collect())
    }

    pub fn loss(&self, batch: &PreparedBatch, jitter: Option<&mut StreamRng>, ctx: &mut Ctx) -> Result<LossOutput> {
        self.loss_with(
            batch,
            LossOptions {
                jitter,
                ..Default::default()
            },
            ctx,
        )
    }

    /// Full objective: flow, optional factoring, jitter, teacher-forced
    /// backbone, and the bits/dim plus weighted text NLL per example.
    pub fn loss_with(&self, batch: &PreparedBatch, opts: LossOptions<'_>, ctx: &mut Ctx) -> Result<LossOutput> {
        let b = batch.pixels.len();
        if b == 0 || batch.seqs.len() != b {
            return Err(Error::Shape("batch needs one sequence per image".into()));
        }
        let enc = self.encode(&batch.pixels)?;
        let (_, t, d) = enc.kept.dims3()?;
        let kept = match opts.jitter {
            Some(rng) if self.cfg.jitter_std > 0.0 => latent_jitter(&enc.kept, self.cfg.jitter_std, rng)?,
            _ => enc.kept.clone(),
        };
        let flat = kept.reshape((b * t, d))?;
        let stop = self.cfg.stop_gradient && batch.seqs.iter().any(|s| s.direction == Direction::ImageThenText);
        let table = if stop { Tensor::cat(&[&flat, &flat.detach()], 0)? } else { flat.clone() };
        let base: Vec<usize> = batch
            .seqs
            .iter()
            .enumerate()
            .map(|(i, s)| i * t + if stop && s.direction == Direction::ImageThenText { b * t } else { 0 })
            .collect();
        let soft = SoftSource {
            table: table.clone(),
            base: base.clone(),
        };
        let target_source = match opts.soft_target_offset {
            Some(off) => {
                let off = off.to_dtype(table.dtype())?;
                let off = if stop { Tensor::cat(&[&off, &off], 0)? } else { off };
                Some(SoftSource {
                    table: (&table + off)?,
                    base,
                })
            }
            None => None,
        };
        let sl = self.backbone.sequence_loss_with(
            &batch.seqs,
            Some(&soft),
            LossTargets {
                soft: target_source.as_ref(),
                text: opts.text_targets,
            },
            ctx,
        )?;
        let dev = flat.device().clone();
        let gaussian = match &enc.factored {
            Some(f) => gaussian_logprob(f)?.neg()?,
            None => Tensor::zeros(b, DType::F64, &dev)?,
        };
        let volume = match &enc.volume {
            Some(v) => v.clone(),
            None => Tensor::new(0f64, &dev)?,
        };
        let dims = self.dims() as f64;
        let pixel_scale = dims * PIXEL_SCALE.ln();
        let image_nll = ((((&sl.soft_nll + &gaussian)? - &enc.logdet)?.broadcast_sub(&volume)?) + pixel_scale)?;
        let bpd = (&image_nll / (dims * LN_2))?;
        let has_image: Vec<f64> = batch.seqs.iter().map(|s| s.has_image_target() as u8 as f64).collect();
        let mask = Tensor::from_vec(has_image.clone(), b, &dev)?;
        let per_example = ((&bpd * &mask)? + (&sl.text_nll * self.cfg.text_weight)?)?;
        let total = per_example.mean_all()?;

        let host = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_vec1::<f64>()?) };
        let (ar, gs, ld, bp, tx) = (
            host(&sl.soft_nll)?,
            host(&gaussian)?,
            host(&enc.logdet)?,
            host(&bpd)?,
            host(&sl.text_nll)?,
        );
        let vol = volume.to_scalar::<f64>()?;
        let n_img = has_image.iter().filter(|&&m| m > 0.0).count();
        let avg = |v: &[f64]| -> f64 {
            if n_img == 0 {
                0.0
            } else {
                v.iter().zip(&has_image).map(|(x, m)| x * m).sum::<f64>() / n_img as f64
            }
        };
        let text_tokens: usize = sl.text_tokens.iter().sum();
        let breakdown = LossBreakdown {
            image_bpd: avg(&bp),
            ar_nll: avg(&ar),
            gaussian_nll: avg(&gs),
            logdet: avg(&ld),
            volume_term: if n_img == 0 { 0.0 } else { vol },
            pixel_scale,
            text_nll_per_token: if text_tokens == 0 { 0.0 } else { tx.iter().sum::<f64>() / text_tokens as f64 },
            total: total.to_scalar::<f64>()?,
            image_examples: n_img,
            text_tokens,
        };
        let terms = [
            ("ar_nll", breakdown.ar_nll),
            ("gaussian_nll", breakdown.gaussian_nll),
            ("logdet", breakdown.logdet),
            ("volume_term", vol),
            ("text_nll", breakdown.text_nll_per_token),
            ("total", breakdown.total),
        ];
        if let Some((name, v)) = terms.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss term {name} = {v}")));
        }
        Ok(LossOutput {
            total,
            breakdown,
            per_example_bpd: bp
                .iter()
                .zip(&has_image)
                .map(|(&v, &m)| (m > 0.0).then_some(v))
                .collect(),
        })
    }

    fn prefix_sequence(tokens: Vec<MixedToken>, dropped: bool) -> PackedSequence {
        let n = tokens.len();
        PackedSequence::build(tokens, vec![false; n], Direction::TextThenImage, dropped)
    }

    /// Conditioning prefix ending right before the first image token.
    pub fn image_prefix(&self, cond: &Conditioning) -> Result<PackedSequence> {
        let tokens = match (self.shape.label_kind, cond) {
            (LabelKind::Caption, Conditioning::Text(t)) => text_prompt(Some(t), self.cfg.max_text)?,
            (LabelKind::Caption, Conditioning::None) => text_prompt(None, self.cfg.max_text)?,
            (LabelKind::Class, Conditioning::Class(c)) => {
                if *c as usize >= self.shape.num_classes {
                    return Err(Error::OutOfRange(format!("class {c} ≥ {}", self.shape.num_classes)));
                }
                class_prefix(Some(*c))
            }
            (LabelKind::Class | LabelKind::None, Conditioning::None) => class_prefix(None),
            (kind, cond) => {
                return Err(Error::Usage(format!("{cond:?} conditioning does not apply to a {kind:?}-labelled model")))
            }
        };
        Ok(Self::prefix_sequence(tokens, matches!(cond, Conditioning::None)))
    }

    fn gaussian_draw(&self, rng: &mut StreamRng, n: usize, temp: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                e * temp
            })
            .collect()
    }

    fn factored_channels(&self) -> usize {
        self.channels() - self.factor.d
    }

    /// Generate one image per conditioning entry.
    pub fn sample_images(&self, conds: &[Conditioning], opts: &SampleOptions) -> Result<SampleOutput> {
        let n = conds.len();
        if n == 0 {
            return Ok(SampleOutput { images: vec![], degenerate_draws: 0 });
        }
        let prefixes = conds.iter().map(|c| self.image_prefix(c)).collect::<Result<Vec<_>>>()?;
        let uncond: Vec<PackedSequence> = (0..n).map(|_| self.image_prefix(&Conditioning::None)).collect::<Result<_>>()?;
        let mut rngs: Vec<StreamRng> = (0..n).map(|i| stream(opts.seed, Purpose::Sample, &[i as u64, 0])).collect();
        let sampler = if opts.cfg_strength > 0.0 {
            SoftSampler::Cfg {
                lambda: opts.cfg_strength,
                budget: opts.cfg_budget,
            }
        } else {
            SoftSampler::Plain
        };
        let t = self.tokens();
        let gen = self.backbone.generate_soft(&prefixes, Some(&uncond), t, sampler, opts.temps, &mut rngs)?;
        let d = self.factor.d;
        let kept: Vec<f64> = gen.tokens.iter().flat_map(|s| s.concat()).collect();
        let kept = Tensor::from_vec(kept, (n, t, d), self.store.device())?;
        let fc = self.factored_channels();
        let factored = if fc > 0 {
            let v: Vec<f64> = (0..n)
                .flat_map(|i| self.gaussian_draw(&mut stream(opts.seed, Purpose::Sample, &[i as u64, 1]), t * fc, opts.temp_factored))
                .collect();
            Some(Tensor::from_vec(v, (n, t, fc), self.store.device())?)
        } else {
            None
        };
        Ok(SampleOutput {
            images: self.decode(&kept, factored.as_ref())?,
            degenerate_draws: gen.degenerate_draws,
        })
    }

    /// Encode a real image, redraw one part of its latents, and decode.
    pub fn resample_latents(&self, pixels: &[u8], which: Resample, opts: &SampleOptions) -> Result<Vec<u8>> {
        let fc = self.factored_channels();
        if fc == 0 {
            return Err(Error::Config("model keeps every channel; there are no Gaussian latents".into()));
        }
        let deq = dequantize(pixels, &mut stream(opts.seed, Purpose::Eval, &[0]));
        let enc = self.encode(&[deq])?;
        let t = self.tokens();
        let dev = self.store.device();
        let (kept, factored) = match which {
            Resample::Factored => {
                let v = self.gaussian_draw(&mut stream(opts.seed, Purpose::Sample, &[0, 1]), t * fc, opts.temp_factored);
                (enc.kept, Tensor::from_vec(v, (1, t, fc), dev)?)
            }
            Resample::Kept => {
                let prefix = self.image_prefix(&Conditioning::None)?;
                let mut rngs = vec![stream(opts.seed, Purpose::Sample, &[0, 0])];
                let gen = self.backbone.generate_soft(&[prefix], None, t, SoftSampler::Plain, opts.temps, &mut rngs)?;
                let kept = Tensor::from_vec(gen.tokens[0].concat(), (1, t, self.factor.d), dev)?;
                (kept, enc.factored.expect("fc > 0 implies factored channels"))
            }
        };
        Ok(self.decode(&kept, Some(&factored))?.remove(0))
    }

    /// Image-to-text decoding for caption-labelled models.
    pub fn caption_images(&self, images: &[Vec<u8>], max_len: usize, mode: TextMode, seed: u64) -> Result<Vec<Vec<u8>>> {
        if self.shape.label_kind != LabelKind::Caption {
            return Err(Error::Usage("captioning needs a caption-labelled model".into()));
        }
        let deq: Vec<Vec<f64>> = images
            .iter()
            .enumerate()
            .map(|(i, p)| dequantize(p, &mut stream(seed, Purpose::Eval, &[i as u64])))
            .collect();
        let enc = self.encode(&deq)?;
        let (b, t, d) = enc.kept.dims3()?;
        let soft = SoftSource {
            table: enc.kept.reshape((b * t, d))?,
            base: (0..b).map(|i| i * t).collect(),
        };
        let mut tokens: Vec<MixedToken> = (0..t).map(MixedToken::Soft).collect();
        tokens.push(MixedToken::Boundary(BOT));
        let prefix = PackedSequence::build(tokens, vec![false; t + 1], Direction::ImageThenText, false);
        let prefixes = vec![prefix; b];
        let mut rngs: Vec<StreamRng> = (0..b).map(|i| stream(seed, Purpose::Sample, &[i as u64, 2])).collect();
        let ids = self.backbone.generate_text(&prefixes, Some(&soft), max_len, mode, &mut rngs)?;
        Ok(ids.iter().map(|v| crate::data::detokenize(v)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Conditioning {
    Class(u16),
    Text(Vec<u8>),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub cfg_strength: f64,
    pub cfg_budget: usize,
    pub temps: Temperatures,
    pub temp_factored: f64,
    pub seed: u64,
}

impl SampleOptions {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        Self {
            cfg_strength: cfg.cfg_strength,
            cfg_budget: cfg.cfg_budget,
            temps: Temperatures {
                mixture: cfg.temp_mixture,
                scale: cfg.temp_scale,
            },
            temp_factored: cfg.temp_factored,
            seed,
        }
    }
}

pub struct SampleOutput {
    pub images: Vec<Vec<u8>>,
    pub degenerate_draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Redraw the Gaussian-prior channels, keep the soft tokens.
    Factored,
    /// Redraw the soft tokens from the unconditional prior, keep the rest.
    Kept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Matched,
    Mismatched,
    Unconditional,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(LabelMode::Matched),
            "mismatched" => Ok(LabelMode::Mismatched),
            "unconditional" => Ok(LabelMode::Unconditional),
            _ => Err(Error::Usage(format!("unknown label mode {s:?}"))),
        }
    }
}

/// A label that differs from `label`, drawn from the dataset's label space.
fn mismatched_label(label: &Label, data: &DatasetFile, rng: &mut StreamRng) -> Label {
    match label {
        Label::Class(c) if data.num_classes > 1 => {
            let shift = rng.gen_range(1..data.num_classes) as u16;
            Label::Class((c + shift) % data.num_classes as u16)
        }
        Label::Caption(own) => {
            for _ in 0..64 {
                let other = &data.records[rng.gen_range(0..data.len())].label;
                if let Label::Caption(c) = other {
                    if c != own {
                        return other.clone();
                    }
                }
            }
            label.clone()
        }
        other => other.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub bpd: f64,
    pub per_image: Vec<f64>,
}

/// Mean bits/dim with a single dequantization draw per image, no noise or
/// jitter, the image always the target.
pub fn evaluate_bpd(model: &JetFormer, data: &DatasetFile, mode: LabelMode, seed: u64, batch: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    if data.height != model.shape.height || data.width != model.shape.width {
        return Err(Error::Shape(format!(
            "dataset images are {}x{}, model expects {}x{}",
            data.height, data.width, model.shape.height, model.shape.width
        )));
    }
    let pack = model.pack_config(0.0);
    let mut label_rng = stream(seed, Purpose::Labels, &[]);
    let mut per_image = Vec::with_capacity(data.len());
    for chunk_start in (0..data.len()).step_by(batch.max(1)) {
        let end = (chunk_start + batch.max(1)).min(data.len());
        let mut pixels = Vec::with_capacity(end - chunk_start);
        let mut seqs = Vec::with_capacity(end - chunk_start);
        for i in chunk_start..end {
            let r = &data.records[i];
            pixels.push(dequantize(&r.pixels, &mut stream(seed, Purpose::Eval, &[i as u64])));
            let label = match mode {
                LabelMode::Matched => r.label.clone(),
                LabelMode::Mismatched => mismatched_label(&r.label, data, &mut label_rng),
                LabelMode::Unconditional => match r.label {
                    Label::Caption(_) => Label::Caption(vec![]),
                    _ => Label::None,
                },
            };
            let mut seq = pack_example(&label, Direction::TextThenImage, &pack, &mut stream(seed, Purpose::CondDrop, &[i as u64]))?;
            if mode == LabelMode::Unconditional {
                let prefix = model.image_prefix(&Conditioning::None)?;
                let mut tokens = prefix.tokens;
                tokens.extend(seq.tokens[seq.image_start().unwrap_or(0)..].iter().copied());
                let mask = tokens.iter().map(|t| matches!(t, MixedToken::Soft(_))).collect();
                seq = PackedSequence::build(tokens, mask, Direction::TextThenImage, true);
            }
            seqs.push(seq);
        }
        let out = model.loss(&PreparedBatch { pixels, seqs }, None, &mut Ctx::eval())?;
        per_image.extend(out.per_example_bpd.into_iter().map(|v| v.unwrap_or(f64::NAN)));
    }
    let bpd = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport { bpd, per_image })
}

/// bits/dim of the uniform density on [0, 256)^D: exactly log2 256.
pub fn uniform_reference_bpd() -> f64 {
    256f64.log2()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// 0-based index of the update just applied.
    pub step: u64,
    pub sigma: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub breakdown: LossBreakdown,
}

pub const METRICS_HEADER: &str = "step,sigma_t,image_bpd,ar_nll,gaussian_nll,logdet,volume_term,text_nll,grad_norm,lr";

impl StepReport {
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.step,
            self.sigma,
            b.image_bpd,
            b.ar_nll,
            b.gaussian_nll,
            b.logdet,
            b.volume_term,
            b.text_nll_per_token,
            self.grad_norm,
            self.lr
        )
    }
}

/// One training run: model, optimizer, data, and the step counter.
pub struct Trainer {
    pub model: JetFormer,
    pub opt: AdamW,
    pub step: u64,
    pub data: DatasetFile,
    schedule: NoiseSchedule,
    perms: HashMap<u64, Vec<usize>>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, data: DatasetFile) -> Result<Self> {
        let model = JetFormer::new(cfg, ModelShape::of(&data), Some(&data))?;
        Self::from_parts(model, None, 0, data)
    }

    /// Resume from restored parts; `opt` defaults to fresh moments.
    pub fn from_parts(model: JetFormer, opt: Option<AdamW>, step: u64, data: DatasetFile) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("training dataset is empty".into()));
        }
        if ModelShape::of(&data) != model.shape {
            return Err(Error::Config("dataset does not match the model's image size or labels".into()));
        }
        let opt = match opt {
            Some(o) => o,
            None => AdamW::new(OptimConfig::from_run(&model.cfg), &model.store)?,
        };
        let schedule = NoiseSchedule::new(model.cfg.sigma0, model.cfg.sigma_end)?;
        Ok(Self {
            model,
            opt,
            step,
            data,
            schedule,
            perms: HashMap::new(),
        })
    }

    fn seed(&self) -> u64 {
        self.model.cfg.seed
    }

    fn example_index(&mut self, global: u64) -> usize {
        let n = self.data.len() as u64;
        let epoch = global / n;
        let seed = self.seed();
        let perm = self.perms.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n as usize).collect();
            p.shuffle(&mut stream(seed, Purpose::Epoch, &[epoch]));
            p
        });
        let idx = perm[(global % n) as usize];
        if self.perms.len() > 2 {
            self.perms.retain(|&e, _| e + 1 >= epoch);
        }
        idx
    }

    pub fn sigma_at(&self, step: u64) -> Result<f64> {
        self.schedule.sigma_at_step(step, self.model.cfg.steps)
    }

    /// Inputs for update `step`, fully determined by `(seed, step)`.
    pub fn prepare_batch(&mut self, step: u64) -> Result<PreparedBatch> {
        let cfg = self.model.cfg.clone();
        let bs = cfg.batch_size;
        let sigma = self.sigma_at(step)?;
        let pack = self.model.pack_config(cfg.cond_drop);
        let (h, w) = (self.data.height, self.data.width);
        let mut pixels = Vec::with_capacity(bs);
        let mut seqs = Vec::with_capacity(bs);
        for j in 0..bs {
            let key = [step, j as u64];
            let idx = self.example_index(step * bs as u64 + j as u64);
            let record = &self.data.records[idx];
            let mut img = record.pixels.clone();
            if cfg.flip && self.data.label_kind != LabelKind::Caption && stream(cfg.seed, Purpose::Flip, &key).gen::<bool>() {
                img = flip_horizontal(&img, h, w);
            }
            let img = apply_rgb_noise(&img, sigma, &mut stream(cfg.seed, Purpose::RgbNoise, &key));
            pixels.push(dequantize(&img, &mut stream(cfg.seed, Purpose::Dequant, &key)));
            let direction = if stream(cfg.seed, Purpose::Direction, &key).gen::<bool>() {
                Direction::ImageThenText
            } else {
                Direction::TextThenImage
            };
            seqs.push(pack_example(&record.label, direction, &pack, &mut stream(cfg.seed, Purpose::CondDrop, &key))?);
        }
        Ok(PreparedBatch { pixels, seqs })
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let batch = self.prepare_batch(step)?;
        let seed = self.seed();
        let mut jitter = stream(seed, Purpose::Jitter, &[step]);
        let mut ctx = Ctx::train(stream(seed, Purpose::Dropout, &[step]));
        let out = self.model.loss(&batch, Some(&mut jitter), &mut ctx)?;
        let grads = AdamW::collect(&self.model.store, &out.total.backward()?)?;
        let lr = self.opt.cfg.lr_at(step);
        let grad_norm = self.opt.step(&self.model.store, &grads, lr)?;
        if let Some(map) = &self.model.linear {
            if let Some(w) = map.condition_warning()? {
                log::warn!("step {step}: {w}");
            }
        }
        self.step += 1;
        Ok(StepReport {
            step,
            sigma: self.sigma_at(step)?,
            lr,
            grad_norm,
            breakdown: out.breakdown,
        })
    }

    /// Train until `self.step == until`, reporting each step to `on_step`.
    pub fn run_until(&mut self, until: u64, mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        while self.step < until {
            let report = self.train_step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Stable fingerprint of all parameter values, used to compare runs.
pub fn parameter_digest(store: &ParamStore) -> Result<u64> {
    let mut h = 0u64;
    for (name, var) in store.iter() {
        let mut local = stream_seed(name.len() as u64, Purpose::Check, &[]);
        for v in var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
            local = stream_seed(local ^ v.to_bits(), Purpose::Check, &[]);
        }
        h = stream_seed(h ^ local, Purpose::Check, &[]);
    }
    Ok(h)
}
