// Generates a small captioned moving-shapes dataset, writes it to disk,
// reloads it and reads the scene back out of a few videos with the probe.

use continual_t2v::synthdata::{gen_dataset, probe, Dataset, ProbeResult, VideoDims};

pub fn run_example() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let ds = gen_dataset(6, 3, 42, VideoDims::default())?;
    ds.write(dir.path())?;
    let reloaded = Dataset::load(dir.path())?;
    anyhow::ensure!(reloaded == ds, "reloaded dataset differs");

    println!("{} train / {} eval videos of shape {}", ds.train().len(), ds.eval().len(), ds.dims);
    for s in ds.train() {
        let seen = match probe(&s.video)? {
            ProbeResult::Recognized(a) => format!("{} {} {}", a.color.name(), a.shape.name(), a.motion.name()),
            ProbeResult::Unrecognized => "nothing".into(),
        };
        println!("{:<10} {:<32} probe: {seen}", s.id, s.caption);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
