// Sweeps the distillation and temporal weights over the ablation grid,
// evaluating each trained run with both guidance modes.

use continual_t2v::cli::{ablation_csv, cmd_ablate, Sweep};
use continual_t2v::config::RunConfig;
use continual_t2v::synthdata::{gen_dataset, VideoDims};

pub fn run_example() -> anyhow::Result<()> {
    let root = tempfile::tempdir()?;
    let data = root.path().join("data");
    gen_dataset(3, 2, 8, VideoDims::default())?.write(&data)?;
    let mut cfg = RunConfig::default();
    cfg.train.steps_per_task = 10;
    cfg.diffusion.sample_steps = 10;

    let rows = cmd_ablate(&data, Sweep::Guidance, &cfg, &root.path().join("sweep"))?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
