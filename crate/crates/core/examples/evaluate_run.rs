// Trains naive and vidclearn runs on one stream and evaluates both: the
// metrics table per checkpoint and the task-quality matrix.

use continual_t2v::config::RunConfig;
use continual_t2v::continual::{run_stream, Strategy, TaskStream};
use continual_t2v::evaluation::{evaluate_run, metrics_csv};
use continual_t2v::synthdata::{gen_dataset, VideoDims};

pub fn run_example() -> anyhow::Result<()> {
    let ds = gen_dataset(4, 3, 5, VideoDims::default())?;
    let stream = TaskStream::from_dataset(&ds)?;
    let mut cfg = RunConfig::default();
    cfg.train.steps_per_task = 30;
    cfg.diffusion.sample_steps = 15;
    let root = tempfile::tempdir()?;

    let mut rows = Vec::new();
    for strategy in [Strategy::Naive, Strategy::VidCLearn] {
        let dir = root.path().join(strategy.name());
        run_stream(&stream, strategy, &cfg, &dir, None)?;
        let ev = evaluate_run(&dir, &ds, None)?;
        println!("{strategy} quality matrix:\n{}", ev.matrix.to_csv());
        rows.extend(ev.rows);
    }
    print!("{}", metrics_csv(&rows));
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
