//! Decoder-only transformer over mixed text and soft-token sequences.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::data::{MixedToken, PackedSequence, EOS, PREFIX_LEN, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::gmm::{cfg_sample, gmm_sample, GmmBatch, GmmHead};
use crate::nn::{log_softmax_last, Block, BlockShape, Ctx, LayerCache, Linear, Norm, NormKind, ParamStore, Rope, NEG_INF_BIAS};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    /// Soft-token dimension.
    pub soft_dim: usize,
    pub mixture_components: usize,
    pub dropout: f64,
}

/// Where soft-token vectors come from: row `base[b] + i` of `table` is
/// `Soft(i)` of sequence `b`.
#[derive(Debug, Clone)]
pub struct SoftSource {
    pub table: Tensor,
    pub base: Vec<usize>,
}

/// Per-example negative log-likelihood sums, in nats, as (B,) f64 tensors.
#[derive(Debug, Clone)]
pub struct SequenceLoss {
    pub soft_nll: Tensor,
    pub text_nll: Tensor,
    pub text_tokens: Vec<usize>,
}

/// Target overrides for the loss: a soft table laid out like the input
/// source, and per-sequence token ids indexed by position.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTargets<'a> {
    pub soft: Option<&'a SoftSource>,
    pub text: Option<&'a [Vec<u32>]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SoftSampler {
    Plain,
    Cfg { lambda: f64, budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub mixture: f64,
    pub scale: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { mixture: 1.0, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMode {
    Greedy,
    Sample,
}

/// Incremental decoding state for a batch of sequences.
pub struct DecodeState {
    caches: Vec<LayerCache>,
    key_valid: Vec<Vec<bool>>,
    next_pos: Vec<u32>,
    /// Final-norm output at the last fed position, (B, width).
    pub last_hidden: Tensor,
}

pub struct Generated {
    pub tokens: Vec<Vec<Vec<f64>>>,
    pub degenerate_draws: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    text_emb: Tensor,
    class_emb: Tensor,
    nolabel_emb: Tensor,
    soft_lift: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    vocab_head: Linear,
    gmm_head: GmmHead,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig) -> Result<Self> {
        let w = cfg.width;
        if cfg.soft_dim == 0 || cfg.mixture_components == 0 {
            return Err(Error::Config("backbone needs positive soft dimension and mixture size".into()));
        }
        let shape = BlockShape {
            width: w,
            heads: cfg.heads,
            kv_heads: cfg.kv_heads,
            mlp_hidden: cfg.mlp_hidden,
            norm: NormKind::Rms,
        };
        if (w / cfg.heads.max(1)) % 2 != 0 {
            return Err(Error::Config("rotary embedding needs an even head dimension".into()));
        }
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("backbone.block{i}"), shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            text_emb: store.randn("backbone.text_emb", &[VOCAB_SIZE, w], 0.02)?,
            class_emb: store.randn("backbone.class_emb", &[cfg.num_classes.max(1) * PREFIX_LEN, w], 0.02)?,
            nolabel_emb: store.randn("backbone.nolabel_emb", &[PREFIX_LEN, w], 0.02)?,
            soft_lift: Linear::new(store, "backbone.soft_lift", cfg.soft_dim, w, true)?,
            blocks,
            norm: Norm::new(store, "backbone.final_norm", w, NormKind::Rms)?,
            vocab_head: Linear::new(store, "backbone.vocab_head", w, VOCAB_SIZE, true)?,
            gmm_head: GmmHead::new(store, "backbone.gmm_head", w, cfg.mixture_components, cfg.soft_dim)?,
        })
    }

    fn head_dim(&self) -> usize {
        self.cfg.width / self.cfg.heads
    }

    fn discrete_index(&self, tok: MixedToken) -> Result<Option<u32>> {
        let classes = self.cfg.num_classes.max(1) * PREFIX_LEN;
        Ok(match tok {
            MixedToken::Text(id) | MixedToken::Boundary(id) => {
                if id as usize >= VOCAB_SIZE {
                    return Err(Error::OutOfRange(format!("token id {id} ≥ {VOCAB_SIZE}")));
                }
                Some(id)
            }
            MixedToken::ClassPrefix { class, slot } => {
                if class as usize >= self.cfg.num_classes || slot as usize >= PREFIX_LEN {
                    return Err(Error::OutOfRange(format!("class prefix ({class}, {slot}) out of range")));
                }
                Some((VOCAB_SIZE + class as usize * PREFIX_LEN + slot as usize) as u32)
            }
            MixedToken::NolabelPrefix(slot) => {
                if slot as usize >= PREFIX_LEN {
                    return Err(Error::OutOfRange(format!("nolabel slot {slot} out of range")));
                }
                Some((VOCAB_SIZE + classes + slot as usize) as u32)
            }
            MixedToken::Soft(_) | MixedToken::Pad => None,
        })
    }

    /// Token embeddings for a rectangular batch of token rows, (B, L, width).
    fn embed_tokens(&self, rows: &[&[MixedToken]], soft: Option<&SoftSource>) -> Result<Tensor> {
        let b = rows.len();
        let l = rows.first().map_or(0, |r| r.len());
        let w = self.cfg.width;
        let dev = self.text_emb.device();
        let dtype = self.text_emb.dtype();
        let zero_row = Tensor::zeros((1, w), dtype, dev)?;
        let table = Tensor::cat(&[&self.text_emb, &self.class_emb, &self.nolabel_emb, &zero_row], 0)?;
        let zero_index = (table.dim(0)? - 1) as u32;
        let mut ids = Vec::with_capacity(b * l);
        let mut soft_rows = Vec::with_capacity(b * l);
        let mut soft_mask = Vec::with_capacity(b * l);
        for (bi, row) in rows.iter().enumerate() {
            if row.len() != l {
                return Err(Error::Shape("ragged batch of sequences".into()));
            }
            for &tok in row.iter() {
                ids.push(self.discrete_index(tok)?.unwrap_or(zero_index));
                match tok {
                    MixedToken::Soft(i) => {
                        let src = soft.ok_or_else(|| Error::Shape("soft token without a soft source".into()))?;
                        soft_rows.push((src.base[bi] + i) as u32);
                        soft_mask.push(1.0);
                    }
                    _ => {
                        soft_rows.push(0);
                        soft_mask.push(0.0);
                    }
                }
            }
        }
        let ids = Tensor::from_vec(ids, b * l, dev)?;
        let mut x = table.index_select(&ids, 0)?;
        if let Some(src) = soft {
            if soft_mask.iter().any(|&m| m > 0.0) {
                let rows = Tensor::from_vec(soft_rows, b * l, dev)?;
                let vecs = src.table.index_select(&rows, 0)?.to_dtype(dtype)?;
                let mask = Tensor::from_vec(soft_mask, (b * l, 1), dev)?.to_dtype(dtype)?;
                x = (x + self.soft_lift.forward(&vecs)?.broadcast_mul(&mask)?)?;
            }
        }
        Ok(x.reshape((b, l, w))?)
    }

    pub fn embed(&self, seqs: &[PackedSequence], soft: Option<&SoftSource>) -> Result<Tensor> {
        let rows: Vec<&[MixedToken]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        self.embed_tokens(&rows, soft)
    }

    fn run_blocks(
        &self,
        mut x: Tensor,
        bias: &Tensor,
        rope: &Rope,
        mut caches: Option<&mut [LayerCache]>,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        for (i, block) in self.blocks.iter().enumerate() {
            let cache = caches.as_deref_mut().map(|c| &mut c[i]);
            x = block.forward(&x, Some(bias), Some(rope), cache, ctx, self.cfg.dropout)?;
        }
        self.norm.forward(&x)
    }

    fn prefix_mask(&self, seqs: &[PackedSequence]) -> Result<(Tensor, Rope)> {
        let b = seqs.len();
        let l = seqs[0].len();
        let mut bias = vec![0f64; b * l * l];
        let mut positions = Vec::with_capacity(b * l);
        for (bi, s) in seqs.iter().enumerate() {
            for i in 0..l {
                positions.push(s.position_ids[i].unwrap_or(0));
                for j in 0..l {
                    let visible = j <= i && (j == i || s.position_ids[j].is_some());
                    if !visible {
                        bias[(bi * l + i) * l + j] = NEG_INF_BIAS;
                    }
                }
            }
        }
        let dtype = self.text_emb.dtype();
        let bias = Tensor::from_vec(bias, (b, 1, l, l), self.text_emb.device())?.to_dtype(dtype)?;
        let rope = Rope::new(&positions, b, self.head_dim(), dtype)?;
        Ok((bias, rope))
    }

    /// Teacher-forced final hidden states, (B, L, width).
    pub fn hidden(&self, seqs: &[PackedSequence], soft: Option<&SoftSource>, ctx: &mut Ctx) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let x = self.embed(seqs, soft)?;
        let (bias, rope) = self.prefix_mask(seqs)?;
        self.run_blocks(x, &bias, &rope, None, ctx)
    }

    pub fn gmm(&self, hidden_rows: &Tensor) -> Result<GmmBatch> {
        self.gmm_head.forward(hidden_rows)
    }

    pub fn text_log_probs(&self, hidden_rows: &Tensor) -> Result<Tensor> {
        log_softmax_last(&self.vocab_head.forward(hidden_rows)?.to_dtype(DType::F64)?)
    }

    /// Summed NLL per example over positions whose next token is a target.
    pub fn sequence_loss(&self, seqs: &[PackedSequence], soft: Option<&SoftSource>, ctx: &mut Ctx) -> Result<SequenceLoss> {
        self.sequence_loss_with(seqs, soft, LossTargets::default(), ctx)
    }

    /// As [`Backbone::sequence_loss`], with target values optionally taken
    /// from somewhere other than the inputs.
    pub fn sequence_loss_with(
        &self,
        seqs: &[PackedSequence],
        soft: Option<&SoftSource>,
        targets: LossTargets<'_>,
        ctx: &mut Ctx,
    ) -> Result<SequenceLoss> {
        let soft_targets = targets.soft.or(soft);
        let hidden = self.hidden(seqs, soft, ctx)?;
        let (b, l, w) = hidden.dims3()?;
        let flat = hidden.reshape((b * l, w))?;
        let dev = flat.device().clone();
        let (mut soft_pos, mut soft_rows, mut soft_owner) = (vec![], vec![], vec![]);
        let (mut text_pos, mut text_ids, mut text_owner) = (vec![], vec![], vec![]);
        let mut text_tokens = vec![0usize; b];
        for (bi, s) in seqs.iter().enumerate() {
            for p in 0..l.saturating_sub(1) {
                if !s.loss_mask[p + 1] {
                    continue;
                }
                match s.tokens[p + 1] {
                    MixedToken::Soft(i) => {
                        let src = soft_targets.ok_or_else(|| Error::Shape("soft target without a soft source".into()))?;
                        soft_pos.push((bi * l + p) as u32);
                        soft_rows.push((src.base[bi] + i) as u32);
                        soft_owner.push(bi);
                    }
                    MixedToken::Text(id) => {
                        text_pos.push((bi * l + p) as u32);
                        text_ids.push(targets.text.map_or(id, |t| t[bi][p + 1]));
                        text_owner.push(bi);
                        text_tokens[bi] += 1;
                    }
                    other => return Err(Error::Shape(format!("{other:?} cannot be a loss target"))),
                }
            }
        }
        let per_example = |values: Tensor, owner: &[usize]| -> Result<Tensor> {
            let mut onehot = vec![0f64; b * owner.len()];
            for (j, &o) in owner.iter().enumerate() {
                onehot[o * owner.len() + j] = 1.0;
            }
            let onehot = Tensor::from_vec(onehot, (b, owner.len()), &dev)?;
            Ok(onehot.matmul(&values.unsqueeze(1)?)?.squeeze(1)?)
        };
        let soft_nll = if soft_pos.is_empty() {
            Tensor::zeros(b, DType::F64, &dev)?
        } else {
            let src = soft_targets.expect("checked above");
            let rows = flat.index_select(&Tensor::new(soft_pos.as_slice(), &dev)?, 0)?;
            let targets = src.table.index_select(&Tensor::new(soft_rows.as_slice(), &dev)?, 0)?;
            per_example(self.gmm(&rows)?.nll(&targets)?, &soft_owner)?
        };
        let text_nll = if text_pos.is_empty() {
            Tensor::zeros(b, DType::F64, &dev)?
        } else {
            let rows = flat.index_select(&Tensor::new(text_pos.as_slice(), &dev)?, 0)?;
            let lp = self.text_log_probs(&rows)?;
            let ids = Tensor::new(text_ids.as_slice(), &dev)?.unsqueeze(1)?;
            per_example(lp.gather(&ids, 1)?.squeeze(1)?.neg()?, &text_owner)?
        };
        Ok(SequenceLoss {
            soft_nll,
            text_nll,
            text_tokens,
        })
    }

    /// Run a batch of equal-length prefixes and keep their key/value caches.
    pub fn prefill(&self, seqs: &[PackedSequence], soft: Option<&SoftSource>) -> Result<DecodeState> {
        if seqs.is_empty() || seqs[0].is_empty() {
            return Err(Error::Shape("prefill needs a non-empty batch of non-empty prefixes".into()));
        }
        let x = self.embed(seqs, soft)?;
        let (bias, rope) = self.prefix_mask(seqs)?;
        let mut caches = vec![LayerCache::default(); self.blocks.len()];
        let h = self.run_blocks(x, &bias, &rope, Some(&mut caches), &mut Ctx::eval())?;
        let l = seqs[0].len();
        let last_hidden = h.narrow(1, l - 1, 1)?.squeeze(1)?;
        Ok(DecodeState {
            caches,
            key_valid: seqs.iter().map(|s| s.position_ids.iter().map(Option::is_some).collect()).collect(),
            next_pos: seqs
                .iter()
                .map(|s| s.position_ids.iter().flatten().max().map_or(0, |p| p + 1))
                .collect(),
            last_hidden,
        })
    }

    fn step(&self, state: &mut DecodeState, x: Tensor) -> Result<()> {
        let b = state.key_valid.len();
        let w = self.cfg.width;
        for v in state.key_valid.iter_mut() {
            v.push(true);
        }
        let s = state.key_valid[0].len();
        let bias: Vec<f64> = state
            .key_valid
            .iter()
            .flat_map(|v| v.iter().map(|&ok| if ok { 0.0 } else { NEG_INF_BIAS }))
            .collect();
        let dtype = self.text_emb.dtype();
        let bias = Tensor::from_vec(bias, (b, 1, 1, s), x.device())?.to_dtype(dtype)?;
        let rope = Rope::new(&state.next_pos, b, self.head_dim(), dtype)?;
        let h = self.run_blocks(x.reshape((b, 1, w))?, &bias, &rope, Some(&mut state.caches), &mut Ctx::eval())?;
        for p in state.next_pos.iter_mut() {
            *p += 1;
        }
        state.last_hidden = h.squeeze(1)?;
        Ok(())
    }

    /// Feed one soft token per sequence; `values` is (B, d).
    pub fn step_soft(&self, state: &mut DecodeState, values: &Tensor) -> Result<()> {
        let x = self.soft_lift.forward(&values.to_dtype(self.text_emb.dtype())?)?;
        self.step(state, x)
    }

    /// Feed one discrete token per sequence.
    pub fn step_tokens(&self, state: &mut DecodeState, tokens: &[MixedToken]) -> Result<()> {
        let rows: Vec<&[MixedToken]> = tokens.iter().map(std::slice::from_ref).collect();
        let x = self.embed_tokens(&rows, None)?.squeeze(1)?;
        self.step(state, x)
    }

    /// Ancestral soft-token generation. With guidance, `uncond` holds the
    /// nolabel prefixes; both streams receive the accepted token.
    pub fn generate_soft(
        &self,
        cond: &[PackedSequence],
        uncond: Option<&[PackedSequence]>,
        n: usize,
        sampler: SoftSampler,
        temps: Temperatures,
        rngs: &mut [StreamRng],
    ) -> Result<Generated> {
        let b = cond.len();
        if rngs.len() != b {
            return Err(Error::Shape("one random stream per sample is required".into()));
        }
        let mut out = Generated {
            tokens: vec![Vec::with_capacity(n); b],
            degenerate_draws: 0,
        };
        if n == 0 || b == 0 {
            return Ok(out);
        }
        let guided = match sampler {
            SoftSampler::Cfg { lambda, .. } if lambda > 0.0 => true,
            _ => false,
        };
        let mut batch = cond.to_vec();
        if guided {
            let u = uncond.ok_or_else(|| Error::Usage("guidance needs unconditional prefixes".into()))?;
            if u.len() != b || u.iter().zip(cond).any(|(a, c)| a.len() != c.len()) {
                return Err(Error::Shape("conditional and unconditional prefixes must align".into()));
            }
            batch.extend_from_slice(u);
        }
        let mut state = self.prefill(&batch, None)?;
        let d = self.cfg.soft_dim;
        for step in 0..n {
            let params = self.gmm(&state.last_hidden)?;
            let mut chosen = Vec::with_capacity(b * d);
            for (i, rng) in rngs.iter_mut().enumerate() {
                let c = params.row(i)?;
                let v = match sampler {
                    SoftSampler::Cfg { lambda, budget } if guided => {
                        let draw = cfg_sample(&c, &params.row(b + i)?, lambda, rng, budget, temps.mixture, temps.scale)?;
                        out.degenerate_draws += draw.degenerate as usize;
                        draw.value
                    }
                    _ => gmm_sample(&c, rng, temps.mixture, temps.scale),
                };
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite soft token at step {step}")));
                }
                chosen.extend_from_slice(&v);
                out.tokens[i].push(v);
            }
            if step + 1 == n {
                break;
            }
            let mut values = Tensor::from_vec(chosen, (b, d), state.last_hidden.device())?;
            if guided {
                values = Tensor::cat(&[&values, &values], 0)?;
            }
            self.step_soft(&mut state, &values)?;
        }
        Ok(out)
    }

    /// Decode text after each prefix until EOS or `max_len` tokens. The
    /// returned ids exclude EOS.
    pub fn generate_text(
        &self,
        prefix: &[PackedSequence],
        soft: Option<&SoftSource>,
        max_len: usize,
        mode: TextMode,
        rngs: &mut [StreamRng],
    ) -> Result<Vec<Vec<u32>>> {
        let b = prefix.len();
        let mut out = vec![Vec::new(); b];
        if max_len == 0 || b == 0 {
            return Ok(out);
        }
        if mode == TextMode::Sample && rngs.len() != b {
            return Err(Error::Shape("one random stream per sample is required".into()));
        }
        let mut done = vec![false; b];
        let mut state = self.prefill(prefix, soft)?;
        for _ in 0..max_len {
            let lp = self.text_log_probs(&state.last_hidden)?.to_vec2::<f64>()?;
            let mut next = Vec::with_capacity(b);
            for i in 0..b {
                let id = match mode {
                    TextMode::Greedy => argmax(&lp[i]),
                    TextMode::Sample => {
                        let u: f64 = rngs[i].gen();
                        let mut acc = 0.0;
                        let mut pick = lp[i].len() - 1;
                        for (j, l) in lp[i].iter().enumerate() {
                            acc += l.exp();
                            if u < acc {
                                pick = j;
                                break;
                            }
                        }
                        pick
                    }
                } as u32;
                if !done[i] {
                    if id == EOS {
                        done[i] = true;
                    } else {
                        out[i].push(id);
                    }
                }
                next.push(MixedToken::Text(id));
            }
            if done.iter().all(|&x| x) {
                break;
            }
            self.step_tokens(&mut state, &next)?;
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

/// Row `i` of a (B, L, W) hidden tensor at sequence position `p`.
pub fn hidden_at(hidden: &Tensor, b: usize, p: usize) -> Result<Tensor> {
    Ok(hidden.get(b)?.get(p)?.unsqueeze(0)?)
}

/// Mean over the last dimension, used by tests as a cheap fingerprint.
pub fn fingerprint(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.mean(D::Minus1)?.sum_all()?.to_scalar::<f64>()?)
}
