//! Push random patch tensors through a coupling flow and back.

use candle_core::{DType, Device, Tensor};
use jetflow::flow::{Flow, FlowConfig};
use jetflow::nn::ParamStore;
use jetflow::rng::{stream, Purpose};

fn main() -> jetflow::Result<()> {
    let cfg = FlowConfig {
        depth: 4,
        width: 32,
        block_depth: 1,
        heads: 2,
        mlp_hidden: 64,
        tokens: 16,
        channels: 48,
    };
    for dtype in [DType::F32, DType::F64] {
        let mut store = ParamStore::new(dtype, 7);
        let flow = Flow::new(&mut store, cfg, &mut stream(7, Purpose::Partition, &[]))?;
        // Heads start at zero; give them something to do.
        store.randomize(0.1, |n| n.ends_with(".scale.weight") || n.ends_with(".shift.weight"))?;
        let x = Tensor::randn(0f32, 1.0, (8, cfg.tokens, cfg.channels), &Device::Cpu)?.to_dtype(dtype)?;
        let out = flow.forward(&x)?;
        let back = flow.inverse(&out.latents)?;
        let err = (back - &x)?.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let logdet = out.logdet.to_vec1::<f64>()?;
        println!("{dtype:?}: max |x - f^-1(f(x))| = {err:.3e}, logdet[0] = {:.4}", logdet[0]);
    }
    Ok(())
}
