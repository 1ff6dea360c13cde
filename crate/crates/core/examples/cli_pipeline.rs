// Drives the command-line entry point through a whole experiment:
// gen-data, train, generate, eval and matrix.

use continual_t2v::cli;

fn call(args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec!["continual-t2v"];
    argv.extend_from_slice(args);
    println!("$ continual-t2v {}", args.join(" "));
    let code = cli::run(argv);
    anyhow::ensure!(code == cli::EXIT_OK, "exit code {code}");
    Ok(())
}

pub fn run_example() -> anyhow::Result<()> {
    let root = tempfile::tempdir()?;
    let path = |name: &str| root.path().join(name).to_string_lossy().into_owned();
    let (data, run, cfg) = (path("data"), path("run"), path("config.json"));
    std::fs::write(&cfg, r#"{"train": {"steps_per_task": 20}, "diffusion": {"sample_steps": 15}}"#)?;

    call(&["gen-data", "--out", &data, "--train", "3", "--eval", "2", "--seed", "4"])?;
    call(&["train", "--data", &data, "--strategy", "vidclearn", "--out", &run, "--config", &cfg])?;
    call(&[
        "generate",
        "--checkpoint",
        &format!("{run}/task_2.ckpt"),
        "--store",
        &format!("{run}/prompts.json"),
        "--data",
        &data,
        "--prompt",
        "a red circle moves right",
        "--out",
        &path("sample.f32"),
    ])?;
    call(&["eval", "--run", &run, "--out", &path("metrics.csv")])?;
    call(&["matrix", "--run", &run, "--out", &path("matrix.csv")])?;
    print!("{}", std::fs::read_to_string(path("metrics.csv"))?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
