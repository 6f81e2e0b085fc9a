//! Stop a run halfway, save, reload, finish, and compare with a straight run.

use jetflow::checkpoint::Checkpoint;
use jetflow::config::RunConfig;
use jetflow::data::{synth_shapes, SynthShapesSpec};
use jetflow::engine::{parameter_digest, Trainer};

fn main() -> jetflow::Result<()> {
    let cfg = RunConfig {
        flow_block_depth: 1,
        mixture_components: 16,
        flow_depth: 2,
        flow_width: 16,
        flow_heads: 2,
        flow_mlp: 32,
        backbone_depth: 1,
        backbone_width: 32,
        backbone_mlp: 64,
        batch_size: 8,
        steps: 40,
        ..RunConfig::default()
    };
    let data = synth_shapes(&SynthShapesSpec::new(16, 256, 0))?;

    let mut straight = Trainer::new(&cfg, data.clone())?;
    straight.run_until(cfg.steps, |_, _| Ok(()))?;

    let mut first = Trainer::new(&cfg, data.clone())?;
    first.run_until(cfg.steps / 2, |_, _| Ok(()))?;
    let path = std::env::temp_dir().join("jetflow_midpoint.jfck");
    Checkpoint::of_trainer(&first).save(&path)?;
    drop(first);
    let mut resumed = Checkpoint::load(&path)?.trainer(data)?;
    println!("resumed at step {}", resumed.step);
    resumed.run_until(cfg.steps, |_, _| Ok(()))?;

    let a = parameter_digest(&straight.model.store)?;
    let b = parameter_digest(&resumed.model.store)?;
    println!("straight {a:016x}\nresumed  {b:016x}\n{}", if a == b { "identical" } else { "DIFFERENT" });
    Ok(())
}
