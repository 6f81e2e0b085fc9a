//! Affine-coupling normalizing flow over patch tokens.
//!
//! Each coupling block keeps half of the channels (chosen by a fixed random
//! mask) and transforms the other half as `(ỹ + b(ȳ)) ⊙ σ(a(ȳ))`, where `a`
//! and `b` are two heads on a shared transformer over the token axis.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{self, Block, BlockShape, Ctx, Linear, Norm, NormKind, ParamStore};
use crate::rng::StreamRng;

/// Image size and patch size; all derived token counts live here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width} is not divisible by patch size {patch}"
            )));
        }
        Ok(Self { height, width, patch })
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn channels(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Number of pixel values, `H·W·3`.
    pub fn dims(&self) -> usize {
        self.height * self.width * 3
    }
}

/// Flattened-patch view of one image: `tokens × channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    pub geometry: PatchGeometry,
    pub values: Vec<T>,
}

impl<T: Copy> PatchGrid<T> {
    pub fn tokens(&self) -> usize {
        self.geometry.tokens()
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels()
    }

    pub fn token(&self, t: usize) -> &[T] {
        let c = self.channels();
        &self.values[t * c..(t + 1) * c]
    }
}

/// Cut an `H×W×3` image into row-major patches; within a patch channels run
/// over (pixel row, pixel column, RGB).
pub fn patchify<T: Copy>(image: &[T], geometry: PatchGeometry) -> Result<PatchGrid<T>> {
    let PatchGeometry { height, width, patch } = geometry;
    if image.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "expected {}x{}x3 = {} values, got {}",
            height,
            width,
            height * width * 3,
            image.len()
        )));
    }
    let mut values = Vec::with_capacity(image.len());
    for pr in 0..height / patch {
        for pc in 0..width / patch {
            for r in 0..patch {
                let row = pr * patch + r;
                let start = (row * width + pc * patch) * 3;
                values.extend_from_slice(&image[start..start + patch * 3]);
            }
        }
    }
    Ok(PatchGrid { geometry, values })
}

pub fn unpatchify<T: Copy + Default>(grid: &PatchGrid<T>) -> Vec<T> {
    let PatchGeometry { height, width, patch } = grid.geometry;
    let mut image = vec![T::default(); height * width * 3];
    let mut src = 0;
    for pr in 0..height / patch {
        for pc in 0..width / patch {
            for r in 0..patch {
                let row = pr * patch + r;
                let start = (row * width + pc * patch) * 3;
                image[start..start + patch * 3].copy_from_slice(&grid.values[src..src + patch * 3]);
                src += patch * 3;
            }
        }
    }
    image
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub depth: usize,
    pub width: usize,
    pub block_depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub tokens: usize,
    pub channels: usize,
}

/// Predicts scale logits `a` and shifts `b` from the pass-through half.
#[derive(Debug, Clone)]
struct Predictor {
    input: Linear,
    position: Tensor,
    blocks: Vec<Block>,
    norm: Norm,
    scale: Linear,
    shift: Linear,
}

impl Predictor {
    fn new(store: &mut ParamStore, name: &str, cfg: &FlowConfig) -> Result<Self> {
        let half = cfg.channels / 2;
        let shape = BlockShape {
            width: cfg.width,
            heads: cfg.heads,
            kv_heads: cfg.heads,
            mlp_hidden: cfg.mlp_hidden,
            norm: NormKind::Layer,
        };
        let blocks = (0..cfg.block_depth)
            .map(|j| Block::new(store, &format!("{name}.vit{j}"), shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), half, cfg.width, true)?,
            position: store.randn(&format!("{name}.position"), &[cfg.tokens, cfg.width], 0.02)?,
            blocks,
            norm: Norm::new(store, &format!("{name}.norm"), cfg.width, NormKind::Layer)?,
            scale: Linear::zeros(store, &format!("{name}.scale"), cfg.width, half)?,
            shift: Linear::zeros(store, &format!("{name}.shift"), cfg.width, half)?,
        })
    }

    fn forward(&self, pass: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.input.forward(pass)?.broadcast_add(&self.position)?;
        let mut ctx = Ctx::eval();
        for block in &self.blocks {
            h = block.forward(&h, None, None, None, &mut ctx, 0.0)?;
        }
        let h = self.norm.forward(&h)?;
        Ok((self.scale.forward(&h)?, self.shift.forward(&h)?))
    }
}

#[derive(Debug, Clone)]
pub struct CouplingBlock {
    pub index: usize,
    /// `true` marks a transformed channel; exactly half are set.
    partition: Vec<bool>,
    pass_idx: Tensor,
    transformed_idx: Tensor,
    merge_idx: Tensor,
    predictor: Predictor,
}

fn partition_indices(partition: &[bool]) -> Result<(Tensor, Tensor, Tensor)> {
    let c = partition.len();
    let pass: Vec<u32> = (0..c as u32).filter(|&i| !partition[i as usize]).collect();
    let transformed: Vec<u32> = (0..c as u32).filter(|&i| partition[i as usize]).collect();
    if c % 2 != 0 || pass.len() != c / 2 {
        return Err(Error::Shape(format!(
            "partition must select exactly half of {c} channels, selects {}",
            transformed.len()
        )));
    }
    let mut merge = vec![0u32; c];
    for (j, &ch) in pass.iter().chain(transformed.iter()).enumerate() {
        merge[ch as usize] = j as u32;
    }
    let dev = Device::Cpu;
    Ok((
        Tensor::new(pass.as_slice(), &dev)?,
        Tensor::new(transformed.as_slice(), &dev)?,
        Tensor::new(merge.as_slice(), &dev)?,
    ))
}

impl CouplingBlock {
    pub fn new(store: &mut ParamStore, index: usize, cfg: &FlowConfig, rng: &mut StreamRng) -> Result<Self> {
        if cfg.channels % 2 != 0 {
            return Err(Error::Shape(format!("coupling needs an even channel count, got {}", cfg.channels)));
        }
        let mut order: Vec<usize> = (0..cfg.channels).collect();
        order.shuffle(rng);
        let mut partition = vec![false; cfg.channels];
        for &ch in &order[cfg.channels / 2..] {
            partition[ch] = true;
        }
        let predictor = Predictor::new(store, &format!("flow.block{index}"), cfg)?;
        Self::with_partition(index, partition, predictor)
    }

    fn with_partition(index: usize, partition: Vec<bool>, predictor: Predictor) -> Result<Self> {
        let (pass_idx, transformed_idx, merge_idx) = partition_indices(&partition)?;
        Ok(Self {
            index,
            partition,
            pass_idx,
            transformed_idx,
            merge_idx,
            predictor,
        })
    }

    pub fn partition(&self) -> &[bool] {
        &self.partition
    }

    pub fn set_partition(&mut self, partition: Vec<bool>) -> Result<()> {
        if partition.len() != self.partition.len() {
            return Err(Error::Shape("partition length changed".into()));
        }
        let (p, t, m) = partition_indices(&partition)?;
        self.partition = partition;
        self.pass_idx = p;
        self.transformed_idx = t;
        self.merge_idx = m;
        Ok(())
    }

    fn check(&self, y: &Tensor) -> Result<()> {
        let c = y.dim(D::Minus1)?;
        if c != self.partition.len() {
            return Err(Error::Shape(format!(
                "coupling block {} expects {} channels, got {c}",
                self.index,
                self.partition.len()
            )));
        }
        Ok(())
    }

    /// Returns the transformed grid (B, T, C) and the per-example log-determinant (B,) in f64.
    pub fn forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(y)?;
        let y = y.contiguous()?;
        let pass = y.index_select(&self.pass_idx, 2)?;
        let moving = y.index_select(&self.transformed_idx, 2)?;
        let (a, b) = self.predictor.forward(&pass)?;
        let log_scale = nn::log_sigmoid(&a)?;
        let moved = moving.add(&b)?.mul(&log_scale.exp()?)?;
        let logdet = log_scale.to_dtype(DType::F64)?.sum((1, 2))?;
        let out = Tensor::cat(&[pass, moved], 2)?.index_select(&self.merge_idx, 2)?;
        Ok((out, logdet))
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        self.check(y)?;
        let y = y.contiguous()?;
        let pass = y.index_select(&self.pass_idx, 2)?;
        let moved = y.index_select(&self.transformed_idx, 2)?;
        let (a, b) = self.predictor.forward(&pass)?;
        let scale = nn::log_sigmoid(&a)?.exp()?;
        let smallest: f64 = scale.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar()?;
        if !(smallest > 0.0) {
            return Err(Error::Numeric(format!(
                "coupling block {}: scale underflowed to {smallest}",
                self.index
            )));
        }
        let moving = moved.div(&scale)?.sub(&b)?;
        Ok(Tensor::cat(&[pass, moving], 2)?.index_select(&self.merge_idx, 2)?)
    }
}

/// Flow latents and the per-example log|det ∂f/∂x| (nats, f64).
#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub latents: Tensor,
    pub logdet: Tensor,
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub config: FlowConfig,
    pub blocks: Vec<CouplingBlock>,
}

impl Flow {
    pub fn new(store: &mut ParamStore, cfg: FlowConfig, rng: &mut StreamRng) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| CouplingBlock::new(store, i, &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: cfg, blocks })
    }

    pub fn partitions(&self) -> Vec<Vec<bool>> {
        self.blocks.iter().map(|b| b.partition().to_vec()).collect()
    }

    pub fn set_partitions(&mut self, partitions: Vec<Vec<bool>>) -> Result<()> {
        if partitions.len() != self.blocks.len() {
            return Err(Error::Format(format!(
                "{} partitions for {} coupling blocks",
                partitions.len(),
                self.blocks.len()
            )));
        }
        for (block, p) in self.blocks.iter_mut().zip(partitions) {
            block.set_partition(p)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<FlowOutput> {
        let batch = x.dim(0)?;
        let mut z = x.clone();
        let mut logdet = Tensor::zeros(batch, DType::F64, x.device())?;
        for block in &self.blocks {
            let (next, ld) = block.forward(&z)?;
            z = next;
            logdet = (logdet + ld)?;
        }
        Ok(FlowOutput { latents: z, logdet })
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for block in self.blocks.iter().rev() {
            x = block.inverse(&x)?;
        }
        Ok(x)
    }
}
