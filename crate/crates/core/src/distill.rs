//! Hybrid noise and variance distillation from a frozen teacher.

use serde::{Deserialize, Serialize};

use crate::backbone::{BoundParams, Denoiser, Dit, ModelConfig};
use crate::diffusion::{l_simple, mse, variance_from_raw, variance_from_raw_var, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Weights of the two distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 0.5,
            lambda2: 0.05,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }

    /// `a + λ₁·b + λ₂·c` in `f64`.
    pub fn combine(&self, l_simple: f64, l_noise: f64, l_var: f64) -> f64 {
        l_simple + self.lambda1 * l_noise + self.lambda2 * l_var
    }
}

/// Noise-prediction matching: elementwise MSE between teacher and student ε.
pub fn l_noise<T: Scalar>(g: &mut Graph<T>, eps_teacher: Var, eps_student: Var) -> Result<Var> {
    l_simple(g, eps_student, eps_teacher)
}

/// Variance matching: elementwise MSE between teacher and student Σ.
pub fn l_var<T: Scalar>(g: &mut Graph<T>, sigma_teacher: Var, sigma_student: Var) -> Result<Var> {
    l_simple(g, sigma_student, sigma_teacher)
}

/// One training batch: clean images, the shared noise draw, timesteps, labels.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x0: Tensor<T>,
    pub noise: Tensor<T>,
    pub t: Vec<usize>,
    pub y: Vec<usize>,
}

/// Logged loss components. Terms that could not be evaluated (no teacher, or
/// no variance head) are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_simple: f64,
    pub l_noise: Option<f64>,
    pub l_var: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Rejects teacher/student pairs that cannot share a batch.
pub fn check_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    let pairs = [
        ("in_channels", teacher.in_channels, student.in_channels),
        ("image_size", teacher.image_size, student.image_size),
        ("num_classes", teacher.num_classes, student.num_classes),
        ("num_timesteps", teacher.num_timesteps, student.num_timesteps),
    ];
    for (name, a, b) in pairs {
        if a != b {
            return Err(Error::Config(format!("teacher {name} = {a}, student {name} = {b}")));
        }
    }
    Ok(())
}

/// `L = L_simple + λ₁·L_noise + λ₂·L_var` on the student's graph.
///
/// The teacher runs on its own inference graph at the student's `x_t`. A term
/// with zero weight is not added to the graph, so with `λ₁ = λ₂ = 0` the total
/// is exactly `L_simple`; its value is still reported when a teacher is given.
pub fn hybrid_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: &Dit<T>,
    params: &BoundParams,
    teacher: Option<&Dit<T>>,
    batch: &Batch<T>,
    schedule: &DiffusionSchedule,
    cfg: &DistillConfig,
) -> Result<HybridLoss> {
    cfg.validate()?;
    if cfg.needs_teacher() && teacher.is_none() {
        return Err(Error::Config("nonzero distillation weight without a teacher".into()));
    }
    if let Some(tm) = teacher {
        check_compatible(&tm.config, &student.config)?;
    }
    if cfg.lambda2 > 0.0 && (!student.config.learn_sigma || teacher.is_some_and(|t| !t.config.learn_sigma)) {
        return Err(Error::Config("variance distillation needs variance heads on both models".into()));
    }

    let x_t = schedule.q_sample(&batch.x0, &batch.t, &batch.noise)?;
    let xv = g.constant(x_t.clone());
    let out = student.forward(g, params, xv, &batch.t, &batch.y)?;
    let noise = g.constant(batch.noise.clone());
    let simple = l_simple(g, out.eps, noise)?;
    let mut total = simple;
    let mut breakdown = LossBreakdown {
        l_simple: g.value(simple).item()?.as_f64(),
        ..Default::default()
    };

    if let Some(tm) = teacher {
        let pred = tm.predict(&x_t, &batch.t, &batch.y)?;
        if cfg.lambda1 > 0.0 {
            let te = g.constant(pred.eps.clone());
            let ln = l_noise(g, te, out.eps)?;
            breakdown.l_noise = Some(g.value(ln).item()?.as_f64());
            let w = g.scale(ln, cfg.lambda1);
            total = g.add(total, w)?;
        } else {
            breakdown.l_noise = Some(mse(&pred.eps, g.value(out.eps))?);
        }
        if let (Some(tv), Some(sv)) = (&pred.v, out.v) {
            let sigma_t = variance_from_raw(tv, &batch.t, schedule)?;
            if cfg.lambda2 > 0.0 {
                let st = g.constant(sigma_t);
                let ss = variance_from_raw_var(g, sv, &batch.t, schedule)?;
                let lv = l_var(g, st, ss)?;
                breakdown.l_var = Some(g.value(lv).item()?.as_f64());
                let w = g.scale(lv, cfg.lambda2);
                total = g.add(total, w)?;
            } else {
                let sigma_s = variance_from_raw(g.value(sv), &batch.t, schedule)?;
                breakdown.l_var = Some(mse(&sigma_t, &sigma_s)?);
            }
        }
    }
    breakdown.total = g.value(total).item()?.as_f64();
    if !breakdown.total.is_finite() {
        return Err(Error::NumericFault { stage: "hybrid loss".into() });
    }
    Ok(HybridLoss { total, breakdown })
}
