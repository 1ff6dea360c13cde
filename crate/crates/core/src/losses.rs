//! Training objectives: noise reconstruction, temperature-softened KL
//! distillation, their weighted combination, temporal consistency and the
//! total loss. Every term that feeds a gradient has a `*_and_grad` variant
//! returning the derivative with respect to the student prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, softmax, temporal_delta, temporal_delta_adjoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the KL term against the reconstruction term.
    pub alpha: f64,
    /// Weight of the distillation loss in the total.
    pub gamma: f64,
    /// Weight of the temporal consistency loss in the total.
    pub lambda_t: f64,
    /// Softmax temperature of the distillation term.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.8,
            gamma: 1.0,
            lambda_t: 10.0,
            temperature: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !(self.lambda_t >= 0.0) {
            return Err(Error::invalid(format!(
                "gamma ({}) and lambda ({}) must be nonnegative",
                self.gamma, self.lambda_t
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Mean squared error over every element.
pub fn reconstruction_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    y.same_shape(y_hat)?;
    let n = y.len() as f64;
    Ok(y.data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Reconstruction loss and its gradient with respect to `y_hat`.
pub fn reconstruction_loss_and_grad(y: &Tensor, y_hat: &Tensor) -> Result<(f64, Tensor)> {
    let loss = reconstruction_loss(y, y_hat)?;
    let k = 2.0 / y.len() as f64;
    let grad = y_hat.zip_with(y, |p, t| k * (p - t))?;
    Ok((loss, grad))
}

fn frame_vectors(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [c, t, h, w] = x.dims4()?;
    let frame = h * w;
    let data = x.data();
    Ok((0..t)
        .map(|f| {
            (0..c)
                .flat_map(|ch| data[(ch * t + f) * frame..(ch * t + f + 1) * frame].iter().copied())
                .collect()
        })
        .collect())
}

/// `T^2` times the mean over frames of `KL(softmax(teacher/T) || softmax(student/T))`,
/// each frame flattened over channels and pixels.
pub fn kl_distillation(teacher_out: &Tensor, student_out: &Tensor, temperature: f64) -> Result<f64> {
    teacher_out.same_shape(student_out)?;
    let tf = frame_vectors(teacher_out)?;
    let sf = frame_vectors(student_out)?;
    let mut total = 0.0;
    for (t, s) in tf.iter().zip(&sf) {
        let p = softmax(t, temperature)?;
        let q = softmax(s, temperature)?;
        total += kl_divergence(&p, &q)?;
    }
    Ok(temperature * temperature * total / tf.len() as f64)
}

/// KL distillation loss and its gradient with respect to the student output.
/// The teacher output is a constant.
pub fn kl_distillation_and_grad(
    teacher_out: &Tensor,
    student_out: &Tensor,
    temperature: f64,
) -> Result<(f64, Tensor)> {
    let loss = kl_distillation(teacher_out, student_out, temperature)?;
    let [c, t, h, w] = student_out.dims4()?;
    let frame = h * w;
    let tf = frame_vectors(teacher_out)?;
    let sf = frame_vectors(student_out)?;
    let mut grad = Tensor::zeros(student_out.shape())?;
    // d/ds [T^2 * KL(p || softmax(s/T))] = T * (q - p), averaged over frames.
    let k = temperature / t as f64;
    let g = grad.data_mut();
    for (f, (tv, sv)) in tf.iter().zip(&sf).enumerate() {
        let p = softmax(tv, temperature)?;
        let q = softmax(sv, temperature)?;
        for ch in 0..c {
            let dst = &mut g[(ch * t + f) * frame..(ch * t + f + 1) * frame];
            let off = ch * frame;
            for (i, d) in dst.iter_mut().enumerate() {
                *d = k * (q[off + i] - p[off + i]);
            }
        }
    }
    Ok((loss, grad))
}

/// Weighted combination of the KL and reconstruction terms. On the first
/// task there is nothing to retain and the reconstruction term is returned
/// unweighted.
pub fn distillation_loss(l_kl: f64, l_s: f64, alpha: f64, first_task: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if first_task {
        return Ok(l_s);
    }
    Ok(alpha * l_kl + (1.0 - alpha) * l_s)
}

/// Mean squared difference between the frame-to-frame changes of the
/// prediction and of the target, averaged over all `T - 1` transitions.
pub fn temporal_consistency_loss(p: &Tensor, n: &Tensor) -> Result<f64> {
    Ok(temporal_consistency_loss_and_grad(p, n)?.0)
}

/// Temporal consistency loss and its gradient with respect to `p`.
pub fn temporal_consistency_loss_and_grad(p: &Tensor, n: &Tensor) -> Result<(f64, Tensor)> {
    p.same_shape(n)?;
    let d = temporal_delta(p)?.sub(&temporal_delta(n)?)?;
    let m = d.len() as f64;
    let loss = d.sq_norm() / m;
    let grad = temporal_delta_adjoint(&d.scale(2.0 / m))?;
    Ok((loss, grad))
}

pub fn total_loss(l_distill: f64, l_t: f64, gamma: f64, lambda_t: f64) -> Result<f64> {
    if !(gamma >= 0.0) || !(lambda_t >= 0.0) {
        return Err(Error::invalid(format!(
            "gamma ({gamma}) and lambda ({lambda_t}) must be nonnegative"
        )));
    }
    Ok(gamma * l_distill + lambda_t * l_t)
}

/// Quadratic anchor penalty `(lambda / 2) * sum_i F_i (theta_i - anchor_i)^2`
/// and its gradient with respect to `theta`.
pub fn ewc_penalty_and_grad(
    theta: &[f64],
    anchor: &[f64],
    fisher: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != anchor.len() || theta.len() != fisher.len() {
        return Err(Error::Shape(format!(
            "penalty vectors differ in length: {} / {} / {}",
            theta.len(),
            anchor.len(),
            fisher.len()
        )));
    }
    let mut value = 0.0;
    let grad = theta
        .iter()
        .zip(anchor)
        .zip(fisher)
        .map(|((&th, &a), &f)| {
            let d = th - a;
            value += f * d * d;
            lambda * f * d
        })
        .collect();
    Ok((0.5 * lambda * value, grad))
}

/// Per-term values of one evaluation of a training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_kl: f64,
    pub l_distill: f64,
    pub l_t: f64,
    pub penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_kl, self.l_distill, self.l_t, self.penalty, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Full composite objective evaluated on one prediction. Returns the term
/// values and the gradient of the total with respect to `prediction`.
pub fn composite_loss_and_grad(
    prediction: &Tensor,
    target_noise: &Tensor,
    teacher_out: &Tensor,
    cfg: &LossConfig,
    first_task: bool,
) -> Result<(LossBreakdown, Tensor)> {
    let (l_s, g_s) = reconstruction_loss_and_grad(target_noise, prediction)?;
    let (l_kl, g_kl) = if first_task {
        (0.0, Tensor::zeros(prediction.shape())?)
    } else {
        kl_distillation_and_grad(teacher_out, prediction, cfg.temperature)?
    };
    let (l_t, g_t) = temporal_consistency_loss_and_grad(prediction, target_noise)?;
    let l_distill = distillation_loss(l_kl, l_s, cfg.alpha, first_task)?;
    let total = total_loss(l_distill, l_t, cfg.gamma, cfg.lambda_t)?;

    let (w_kl, w_s) = if first_task {
        (0.0, 1.0)
    } else {
        (cfg.alpha, 1.0 - cfg.alpha)
    };
    let mut grad = g_s;
    for ((g, k), t) in grad.data_mut().iter_mut().zip(g_kl.data()).zip(g_t.data()) {
        *g = cfg.gamma * (w_kl * k + w_s * *g) + cfg.lambda_t * t;
    }
    Ok((
        LossBreakdown {
            l_s,
            l_kl,
            l_distill,
            l_t,
            penalty: 0.0,
            total,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_normal, Rng};
    use proptest::prelude::*;

    fn scalar_frames(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let y = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let zero = Tensor::zeros(&[2]).unwrap();
        assert_eq!(reconstruction_loss(&y, &y).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&y, &zero).unwrap(), 2.5);
        let shift = |t: &Tensor| t.map(|v| v + 7.25);
        assert_eq!(reconstruction_loss(&shift(&y), &shift(&zero)).unwrap(), 2.5);
        assert!(reconstruction_loss(&y, &Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn kl_distillation_examples() {
        let mut rng = Rng::seed_from(1);
        let t = seeded_normal(&[3, 4, 2, 2], &mut rng).unwrap();
        assert_eq!(kl_distillation(&t, &t, 4.0).unwrap(), 0.0);
        assert_eq!(kl_distillation(&t, &t, 8.0).unwrap(), 0.0);

        // One frame of two values: teacher [1, 0], student [0, 1], T = 1.
        let teacher = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let student = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let (p, q) = (e / (1.0 + e), 1.0 / (1.0 + e));
        let expected = p * (p / q).ln() + q * (q / p).ln();
        let got = kl_distillation(&teacher, &student, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        // tanh(1/2) = 0.46212, quoted elsewhere rounded as 0.4623.
        assert!((got - 0.5f64.tanh()).abs() < 1e-12);
        assert!((got - 0.4623).abs() < 1e-3);
    }

    #[test]
    fn distillation_examples() {
        assert_eq!(distillation_loss(123.0, 0.7, 0.8, true).unwrap(), 0.7);
        assert_eq!(distillation_loss(5.0, 0.7, 0.0, false).unwrap(), 0.7);
        assert!((distillation_loss(1.0, 2.0, 0.8, false).unwrap() - 1.2).abs() < 1e-15);
        assert!(distillation_loss(1.0, 2.0, 1.5, false).is_err());
        assert!(distillation_loss(1.0, 2.0, -0.1, false).is_err());
    }

    #[test]
    fn temporal_examples() {
        let p = scalar_frames(&[0.0, 1.0, 3.0]);
        let n = scalar_frames(&[0.0, 0.0, 0.0]);
        assert_eq!(temporal_consistency_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(temporal_consistency_loss(&p, &n).unwrap(), 2.5);
        assert!(temporal_consistency_loss(&scalar_frames(&[1.0]), &scalar_frames(&[1.0])).is_err());
    }

    #[test]
    fn temporal_loss_ignores_time_constant_offsets() {
        let mut rng = Rng::seed_from(2);
        let p = seeded_normal(&[3, 5, 4, 4], &mut rng).unwrap();
        let n = seeded_normal(&[3, 5, 4, 4], &mut rng).unwrap();
        let offset = seeded_normal(&[3, 1, 4, 4], &mut rng).unwrap();
        let shifted = broadcast_time(&n, &offset);
        assert!(temporal_consistency_loss(&shifted, &n).unwrap() <= 1e-12);
        let base = temporal_consistency_loss(&p, &n).unwrap();
        let moved = temporal_consistency_loss(&broadcast_time(&p, &offset), &n).unwrap();
        assert!((base - moved).abs() <= 1e-12);
    }

    fn broadcast_time(x: &Tensor, offset: &Tensor) -> Tensor {
        let [c, t, h, w] = x.dims4().unwrap();
        let mut out = x.clone();
        for ch in 0..c {
            for f in 0..t {
                for i in 0..h * w {
                    out.data_mut()[(ch * t + f) * h * w + i] += offset.data()[ch * h * w + i];
                }
            }
        }
        out
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.5, 123.0, 1.5, 0.0).unwrap(), 0.75);
        assert!((total_loss(0.5, 0.05, 1.0, 10.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 1.0, 10.0).unwrap(), 0.0);
        assert!(total_loss(0.5, 0.05, -1.0, 10.0).is_err());
    }

    #[test]
    fn ewc_penalty_is_quadratic() {
        let anchor = [0.5, -1.0, 2.0];
        let fisher = [1.0, 0.5, 3.0];
        let (at_anchor, g) = ewc_penalty_and_grad(&anchor, &anchor, &fisher, 10.0).unwrap();
        assert_eq!(at_anchor, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let delta = [0.1, -0.2, 0.05];
        let theta1: Vec<f64> = anchor.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let theta2: Vec<f64> = anchor.iter().zip(&delta).map(|(a, d)| a + 2.0 * d).collect();
        let (p1, _) = ewc_penalty_and_grad(&theta1, &anchor, &fisher, 10.0).unwrap();
        let (p2, _) = ewc_penalty_and_grad(&theta2, &anchor, &fisher, 10.0).unwrap();
        assert!((p2 - 4.0 * p1).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&Tensor) -> f64, x: &Tensor, grad: &Tensor) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = grad.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                "coordinate {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(9);
        let shape = [2, 3, 2, 3];
        let pred = seeded_normal(&shape, &mut rng).unwrap();
        let target = seeded_normal(&shape, &mut rng).unwrap();
        let teacher = seeded_normal(&shape, &mut rng).unwrap();

        let (_, g) = reconstruction_loss_and_grad(&target, &pred).unwrap();
        fd_check(|p| reconstruction_loss(&target, p).unwrap(), &pred, &g);

        let (_, g) = kl_distillation_and_grad(&teacher, &pred, 2.0).unwrap();
        fd_check(|p| kl_distillation(&teacher, p, 2.0).unwrap(), &pred, &g);

        let (_, g) = temporal_consistency_loss_and_grad(&pred, &target).unwrap();
        fd_check(|p| temporal_consistency_loss(p, &target).unwrap(), &pred, &g);

        let cfg = LossConfig::default();
        for first in [false, true] {
            let (_, g) = composite_loss_and_grad(&pred, &target, &teacher, &cfg, first).unwrap();
            fd_check(
                |p| composite_loss_and_grad(p, &target, &teacher, &cfg, first).unwrap().0.total,
                &pred,
                &g,
            );
        }
    }

    #[test]
    fn degenerate_config_reduces_to_mse() {
        let mut rng = Rng::seed_from(10);
        let shape = [3, 4, 3, 3];
        let pred = seeded_normal(&shape, &mut rng).unwrap();
        let target = seeded_normal(&shape, &mut rng).unwrap();
        let teacher = seeded_normal(&shape, &mut rng).unwrap();
        let cfg = LossConfig {
            alpha: 0.0,
            gamma: 1.0,
            lambda_t: 0.0,
            temperature: 4.0,
        };
        let (b, g) = composite_loss_and_grad(&pred, &target, &teacher, &cfg, false).unwrap();
        let (l, gm) = reconstruction_loss_and_grad(&target, &pred).unwrap();
        assert_eq!(b.total, l);
        assert_eq!(g, gm);
    }

    proptest! {
        #[test]
        fn kl_distillation_nonnegative(seed in 0u64..1000, temp in 0.5f64..8.0) {
            let mut rng = Rng::seed_from(seed);
            let a = seeded_normal(&[2, 3, 2, 2], &mut rng).unwrap();
            let b = seeded_normal(&[2, 3, 2, 2], &mut rng).unwrap();
            prop_assert!(kl_distillation(&a, &b, temp).unwrap() >= 0.0);
            // A per-frame constant shift leaves every softmax unchanged.
            let shifted = a.map(|v| v + 3.0);
            prop_assert!(kl_distillation(&a, &shifted, temp).unwrap() < 1e-12);
        }

        #[test]
        fn distillation_monotone(l_kl in 0.0f64..10.0, l_s in 0.0f64..10.0, d in 0.0f64..5.0, alpha in 0.01f64..0.99) {
            let base = distillation_loss(l_kl, l_s, alpha, false).unwrap();
            prop_assert!(distillation_loss(l_kl + d, l_s, alpha, false).unwrap() >= base);
            prop_assert!(distillation_loss(l_kl, l_s + d, alpha, false).unwrap() >= base);
        }
    }
}
