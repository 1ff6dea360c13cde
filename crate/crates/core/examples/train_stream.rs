// Trains the three strategies on the same short task stream and prints the
// per-task loss terms each one ends on.

use continual_t2v::config::RunConfig;
use continual_t2v::continual::{run_stream, Strategy, TaskStream};
use continual_t2v::synthdata::{gen_dataset, VideoDims};

pub fn run_example() -> anyhow::Result<()> {
    let ds = gen_dataset(4, 0, 3, VideoDims::default())?;
    let stream = TaskStream::from_dataset(&ds)?;
    let mut cfg = RunConfig::default();
    cfg.train.steps_per_task = 40;

    let root = tempfile::tempdir()?;
    for strategy in [Strategy::Naive, Strategy::Ewc, Strategy::VidCLearn] {
        let run = run_stream(&stream, strategy, &cfg, &root.path().join(strategy.name()), None)?;
        println!("{strategy}:");
        for (task, entry) in run.manifest.tasks.iter().zip(&run.manifest.stream) {
            println!(
                "  {:<30} L_s {:.4}  L_KL {:.4}  L_t {:.4}  total {:.4}",
                entry.caption, task.final_l_s, task.final_l_kl, task.final_l_t, task.final_l_tot
            );
        }
        anyhow::ensure!(run.checkpoints.len() == stream.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
