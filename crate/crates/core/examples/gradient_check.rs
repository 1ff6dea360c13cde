// Compares the hand-derived gradient of every training objective with
// central finite differences on a handful of parameters.

use continual_t2v::denoiser::{init_params, loss, loss_and_grad, Denoiser, DenoiserArch, Objective, TrainingExample};
use continual_t2v::losses::LossConfig;
use continual_t2v::numerics::{seeded_normal, Rng};
use continual_t2v::retrieval::embed_prompt;

pub fn run_example() -> anyhow::Result<()> {
    let arch = DenoiserArch::default();
    let params = init_params(&arch, 1);
    let mut rng = Rng::seed_from(1);
    let z = seeded_normal(&[3, 4, 6, 6], &mut rng)?;
    let eps = seeded_normal(&[3, 4, 6, 6], &mut rng)?;
    let cond = embed_prompt("a yellow square moves up")?;
    let teacher_params = init_params(&arch, 2);
    let teacher_out = Denoiser::new(&arch, &teacher_params).predict(&z, 30, cond.as_slice())?;
    let loss_cfg = LossConfig::default();
    let anchor = init_params(&arch, 3);
    let fisher = vec![0.5; params.len()];

    let example = TrainingExample {
        z_t: &z,
        t: 30,
        cond: cond.as_slice(),
        target_noise: &eps,
    };
    let objectives = [
        ("reconstruction", Objective::Reconstruction),
        (
            "composite",
            Objective::Composite {
                teacher_out: &teacher_out,
                config: &loss_cfg,
                first_task: false,
            },
        ),
        (
            "ewc",
            Objective::Penalized {
                anchor: anchor.as_slice(),
                fisher: &fisher,
                lambda: 3.0,
            },
        ),
    ];
    let h = 1e-5;
    for (name, obj) in &objectives {
        let (_, grad) = loss_and_grad(&arch, &params, &example, obj)?;
        let mut worst = 0.0f64;
        for i in (0..params.len()).step_by(97) {
            let mut p = params.clone();
            p.as_mut_slice()[i] += h;
            let up = loss(&arch, &p, &example, obj)?.total;
            p.as_mut_slice()[i] -= 2.0 * h;
            let down = loss(&arch, &p, &example, obj)?.total;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6));
        }
        println!("{name:<15} max relative error {worst:.2e}");
        anyhow::ensure!(worst < 1e-3, "{name} gradient mismatch");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
