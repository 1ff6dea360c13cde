// Trains briefly, then generates a video for an unseen prompt with both
// guidance modes and reports which training video served as the source.

use continual_t2v::config::RunConfig;
use continual_t2v::continual::{run_stream, Strategy, TaskStream};
use continual_t2v::denoiser::Denoiser;
use continual_t2v::inference::{guided_generate, Guidance};
use continual_t2v::synthdata::{gen_dataset, probe, ProbeResult, VideoDims};

pub fn run_example() -> anyhow::Result<()> {
    let ds = gen_dataset(5, 2, 11, VideoDims::default())?;
    let stream = TaskStream::from_dataset(&ds)?;
    let mut cfg = RunConfig::default();
    cfg.train.steps_per_task = 30;
    let dir = tempfile::tempdir()?;
    let run = run_stream(&stream, Strategy::VidCLearn, &cfg, dir.path(), None)?;

    let ck = continual_t2v::denoiser::Checkpoint::load(run.checkpoints.last().expect("one per task"))?;
    let model = Denoiser::new(&ck.header.arch, &ck.params);
    let setup = cfg.diffusion.build()?;
    let prompt = &ds.eval()[0].caption;
    println!("prompt: {prompt}");
    for guidance in Guidance::ALL {
        let g = guided_generate(&model, &setup, &run.store, &ds, prompt, guidance)?;
        let seen = match probe(&g.video)? {
            ProbeResult::Recognized(a) => format!("{} {} {}", a.color.name(), a.shape.name(), a.motion.name()),
            ProbeResult::Unrecognized => "nothing recognizable".into(),
        };
        println!("  {:<9} source {:?} -> probe sees {seen}", guidance.name(), g.source.prompt);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
