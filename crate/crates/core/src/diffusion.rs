//! DDPM noise schedule, forward corruption, losses, the learned-variance
//! parameterization and the ancestral sampler with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Denoiser;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init, Graph, Tensor, Var};

/// Precomputed per-step quantities. Arrays are indexed by step `i`; for a
/// respaced schedule `timesteps[i]` is the original timestep the model sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub timesteps: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// `β̃ᵢ = βᵢ(1 − ᾱᵢ₋₁)/(1 − ᾱᵢ)`; exactly zero at `i = 0`.
    pub posterior_variance: Vec<f64>,
    /// `log β̃ᵢ`, with `β̃₀` replaced by `β₀`.
    pub posterior_log_variance: Vec<f64>,
    pub posterior_mean_coef1: Vec<f64>,
    pub posterior_mean_coef2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.num_timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear β schedule over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Ok(DiffusionSchedule::from_betas((0..steps).collect(), beta))
}

impl DiffusionSchedule {
    fn from_betas(timesteps: Vec<usize>, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let n = beta.len();
        let mut posterior_variance = vec![0.0; n];
        let mut posterior_log_variance = vec![0.0; n];
        let mut coef1 = vec![0.0; n];
        let mut coef2 = vec![0.0; n];
        for i in 0..n {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            posterior_variance[i] = beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i]);
            posterior_log_variance[i] = if i == 0 {
                beta[0].ln()
            } else {
                posterior_variance[i].ln()
            };
            coef1[i] = beta[i] * prev.sqrt() / (1.0 - alpha_bar[i]);
            coef2[i] = (1.0 - prev) * alpha[i].sqrt() / (1.0 - alpha_bar[i]);
        }
        DiffusionSchedule {
            timesteps,
            beta,
            alpha,
            alpha_bar,
            posterior_variance,
            posterior_log_variance,
            posterior_mean_coef1: coef1,
            posterior_mean_coef2: coef2,
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Contract(format!(
                "timestep {i} out of range [0, {})",
                self.len()
            )));
        }
        Ok(())
    }

    /// `steps` uniformly strided timesteps with βs re-derived from ᾱ so that
    /// the cumulative products at the kept timesteps are unchanged.
    pub fn respace(&self, steps: usize) -> Result<DiffusionSchedule> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::Config(format!(
                "sampling steps must be in [1, {total}], got {steps}"
            )));
        }
        if steps == total {
            return Ok(self.clone());
        }
        let keep: Vec<usize> = if steps == 1 {
            vec![0]
        } else {
            let stride = (total - 1) as f64 / (steps - 1) as f64;
            let mut v: Vec<usize> = (0..steps).map(|i| (i as f64 * stride).round() as usize).collect();
            v.dedup();
            v
        };
        let mut last = 1.0;
        let mut beta = Vec::with_capacity(keep.len());
        for &t in &keep {
            beta.push(1.0 - self.alpha_bar[t] / last);
            last = self.alpha_bar[t];
        }
        let timesteps = keep.iter().map(|&t| self.timesteps[t]).collect();
        Ok(DiffusionSchedule::from_betas(timesteps, beta))
    }

    /// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·noise`, one timestep per batch item.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>> {
        if x0.shape() != noise.shape() {
            return Err(Error::shape("q_sample", format!("{:?} vs {:?}", x0.shape(), noise.shape())));
        }
        let per = per_item(x0, t)?;
        let mut out = x0.clone();
        out.requires_grad = false;
        for (bi, &ti) in t.iter().enumerate() {
            self.check_step(ti)?;
            let a = T::lit(self.alpha_bar[ti].sqrt());
            let s = T::lit((1.0 - self.alpha_bar[ti]).sqrt());
            let range = bi * per..(bi + 1) * per;
            for (o, &n) in out.data_mut()[range.clone()].iter_mut().zip(&noise.data()[range]) {
                *o = a * *o + s * n;
            }
        }
        Ok(out)
    }

    /// Per-item column `[b, 1, 1, 1]` of `f(step)`, matching image batches.
    pub fn column<T: Scalar>(&self, t: &[usize], f: impl Fn(&Self, usize) -> f64) -> Result<Tensor<T>> {
        for &ti in t {
            self.check_step(ti)?;
        }
        Ok(Tensor::from_parts(
            vec![t.len(), 1, 1, 1],
            t.iter().map(|&ti| T::lit(f(self, ti))).collect(),
        ))
    }

    /// Posterior `q(x_{t−1} | x_t, x₀)` mean.
    pub fn posterior_mean<T: Scalar>(&self, x0: &Tensor<T>, x_t: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let per = per_item(x0, t)?;
        let mut out = Tensor::zeros(x0.shape().to_vec());
        for (bi, &ti) in t.iter().enumerate() {
            self.check_step(ti)?;
            let (c1, c2) = (
                T::lit(self.posterior_mean_coef1[ti]),
                T::lit(self.posterior_mean_coef2[ti]),
            );
            let r = bi * per..(bi + 1) * per;
            for ((o, &a), &b) in out.data_mut()[r.clone()]
                .iter_mut()
                .zip(&x0.data()[r.clone()])
                .zip(&x_t.data()[r])
            {
                *o = c1 * a + c2 * b;
            }
        }
        Ok(out)
    }
}

fn per_item<T: Scalar>(x: &Tensor<T>, t: &[usize]) -> Result<usize> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b != t.len() || b == 0 {
        return Err(Error::shape(
            "diffusion",
            format!("batch of {b} with {} timesteps", t.len()),
        ));
    }
    Ok(x.len() / b)
}

/// Mean squared error over all elements.
pub fn l_simple<T: Scalar>(g: &mut Graph<T>, eps_hat: Var, eps: Var) -> Result<Var> {
    if g.shape(eps_hat) != g.shape(eps) {
        return Err(Error::shape(
            "l_simple",
            format!("{:?} vs {:?}", g.shape(eps_hat), g.shape(eps)),
        ));
    }
    let d = g.sub(eps_hat, eps)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq))
}

/// Tensor-level mean squared error, accumulated in `f64`.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// Interpolation coefficient from the raw variance output:
/// `(clip(raw, −1, 1) + 1) / 2`.
pub fn interp_coefficient<T: Scalar>(g: &mut Graph<T>, raw: Var) -> Var {
    let c = g.clamp(raw, -1.0, 1.0);
    let s = g.add_scalar(c, 1.0);
    g.scale(s, 0.5)
}

/// `log Σ = v·log β_t + (1 − v)·log β̃_t` on the graph, from raw output.
pub fn log_variance_from_raw<T: Scalar>(
    g: &mut Graph<T>,
    raw: Var,
    t: &[usize],
    schedule: &DiffusionSchedule,
) -> Result<Var> {
    let v = interp_coefficient(g, raw);
    let lo = g.constant(schedule.column(t, |s, i| s.posterior_log_variance[i])?);
    let span = g.constant(schedule.column(t, |s, i| s.beta[i].ln() - s.posterior_log_variance[i])?);
    let w = g.mul(v, span)?;
    g.add(w, lo)
}

pub fn variance_from_raw_var<T: Scalar>(
    g: &mut Graph<T>,
    raw: Var,
    t: &[usize],
    schedule: &DiffusionSchedule,
) -> Result<Var> {
    let lv = log_variance_from_raw(g, raw, t, schedule)?;
    Ok(g.exp(lv))
}

/// Σ from an interpolation coefficient `v ∈ [0, 1]` (shape `[b, ...]`).
pub fn variance_from_v<T: Scalar>(v: &Tensor<T>, t: &[usize], schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    let per = per_item(v, t)?;
    let mut out = v.clone();
    out.requires_grad = false;
    for (bi, &ti) in t.iter().enumerate() {
        schedule.check_step(ti)?;
        let lb = schedule.beta[ti].ln();
        let lt = schedule.posterior_log_variance[ti];
        for o in &mut out.data_mut()[bi * per..(bi + 1) * per] {
            let c = o.as_f64();
            *o = T::lit((c * lb + (1.0 - c) * lt).exp());
        }
    }
    Ok(out)
}

/// Σ from the raw variance head output. Evaluated with the same operations as
/// [`variance_from_raw_var`], so both give bitwise-equal values.
pub fn variance_from_raw<T: Scalar>(raw: &Tensor<T>, t: &[usize], schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let r = g.constant(raw.clone());
    let s = variance_from_raw_var(&mut g, r, t, schedule)?;
    Ok(g.value(s).clone())
}

/// One ancestral step at step index `t`:
/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, plus `√Σ·noise` when `t ≥ 1`.
pub fn p_sample_step<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sigma: &Tensor<T>,
    schedule: &DiffusionSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    schedule.check_step(t)?;
    for (name, other) in [("eps_hat", eps_hat), ("sigma", sigma), ("noise", noise)] {
        if other.shape() != x_t.shape() {
            return Err(Error::shape(
                "p_sample_step",
                format!("{name} {:?} vs x_t {:?}", other.shape(), x_t.shape()),
            ));
        }
    }
    let inv_sqrt_alpha = T::lit(1.0 / schedule.alpha[t].sqrt());
    let eps_coef = T::lit(schedule.beta[t] / (1.0 - schedule.alpha_bar[t]).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(sigma.data().iter().zip(noise.data()))
        .map(|((&x, &e), (&s, &n))| {
            let mean = (x - eps_coef * e) * inv_sqrt_alpha;
            if t == 0 {
                mean
            } else {
                mean + s.sqrt() * n
            }
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// KL divergence between diagonal Gaussians, elementwise on the graph.
pub fn normal_kl<T: Scalar>(
    g: &mut Graph<T>,
    mean1: Var,
    logvar1: Var,
    mean2: Var,
    logvar2: Var,
) -> Result<Var> {
    let dl = g.sub(logvar2, logvar1)?;
    let r = g.sub(logvar1, logvar2)?;
    let ratio = g.exp(r);
    let dm = g.sub(mean1, mean2)?;
    let dm2 = g.square(dm)?;
    let neg = g.neg(logvar2);
    let inv = g.exp(neg);
    let w = g.mul(dm2, inv)?;
    let s = g.add(dl, ratio)?;
    let s = g.add(s, w)?;
    let s = g.add_scalar(s, -1.0);
    Ok(g.scale(s, 0.5))
}

/// Variational bound term for training the variance head: the mean KL (in
/// bits) between the true posterior and the model's reverse step, with the
/// noise prediction detached so only Σ receives gradient.
pub fn vlb_term<T: Scalar>(
    g: &mut Graph<T>,
    x0: &Tensor<T>,
    x_t: &Tensor<T>,
    t: &[usize],
    eps_hat: Var,
    raw_v: Var,
    schedule: &DiffusionSchedule,
) -> Result<Var> {
    let true_mean = g.constant(schedule.posterior_mean(x0, x_t, t)?);
    let true_logvar = g.constant(schedule.column(t, |s, i| s.posterior_log_variance[i])?);
    let eps = g.detach(eps_hat);
    let xt = g.constant(x_t.clone());
    let coef = g.constant(schedule.column(t, |s, i| s.beta[i] / (1.0 - s.alpha_bar[i]).sqrt())?);
    let inv = g.constant(schedule.column(t, |s, i| 1.0 / s.alpha[i].sqrt())?);
    let e = g.mul(eps, coef)?;
    let d = g.sub(xt, e)?;
    let model_mean = g.mul(d, inv)?;
    let model_logvar = log_variance_from_raw(g, raw_v, t, schedule)?;
    let kl = normal_kl(g, true_mean, true_logvar, model_mean, model_logvar)?;
    let m = g.mean(kl);
    Ok(g.scale(m, 1.0 / std::f64::consts::LN_2))
}

/// Options for [`sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub cfg_scale: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Fresh per-item noise stream; each batch item owns one stream so results do
/// not depend on how a batch is partitioned.
pub fn item_rng(seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64);
    rng
}

/// Ancestral sampling from pure noise for labels `y`.
///
/// With `cfg_scale > 1` the model also runs on the null label and the noise
/// estimate becomes `ε_null + s·(ε_cond − ε_null)`; the variance comes from
/// the conditional branch. Models without a variance head use `β̃`.
pub fn sample<T: Scalar, M: Denoiser<T> + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    y: &[usize],
    null_label: usize,
    image_shape: [usize; 3],
    opts: SampleOptions,
) -> Result<Tensor<T>> {
    if !(opts.cfg_scale >= 1.0) {
        return Err(Error::Config(format!("cfg scale must be >= 1, got {}", opts.cfg_scale)));
    }
    let sched = schedule.respace(opts.steps)?;
    let b = y.len();
    let per: usize = image_shape.iter().product();
    let mut shape = vec![b];
    shape.extend(image_shape);
    let mut rngs: Vec<ChaCha8Rng> = (0..b).map(|i| item_rng(opts.seed, i)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Tensor<T> {
        let mut data = Vec::with_capacity(b * per);
        for r in rngs.iter_mut() {
            data.extend(init::randn::<T, _>(&[per], r).into_data());
        }
        Tensor::from_parts(shape.clone(), data)
    };
    let mut x = draw(&mut rngs);
    let guided = opts.cfg_scale > 1.0;
    for i in (0..sched.len()).rev() {
        let t_model = vec![sched.timesteps[i]; b];
        let steps = vec![i; b];
        let (eps, v) = if guided {
            let xx = crate::tensor::kernels::concat(&[&x, &x], 0)?;
            let mut tt = t_model.clone();
            tt.extend(&t_model);
            let mut yy = y.to_vec();
            yy.extend(std::iter::repeat_n(null_label, b));
            let pred = model.predict(&xx, &tt, &yy)?;
            let cond = crate::tensor::kernels::slice_axis(&pred.eps, 0, 0, b)?;
            let uncond = crate::tensor::kernels::slice_axis(&pred.eps, 0, b, b)?;
            let s = T::lit(opts.cfg_scale);
            let eps = crate::tensor::kernels::broadcast_binary("cfg", &uncond, &cond, |u, c| u + s * (c - u))?;
            let v = match pred.v {
                Some(v) => Some(crate::tensor::kernels::slice_axis(&v, 0, 0, b)?),
                None => None,
            };
            (eps, v)
        } else {
            let pred = model.predict(&x, &t_model, y)?;
            (pred.eps, pred.v)
        };
        let sigma = match v {
            Some(raw) => variance_from_raw(&raw, &steps, &sched)?,
            None => {
                let col = sched.posterior_variance[i].max(if i == 0 { sched.beta[0] } else { 0.0 });
                Tensor::full(x.shape().to_vec(), T::lit(col))
            }
        };
        let noise = if i > 0 { draw(&mut rngs) } else { Tensor::zeros(x.shape().to_vec()) };
        x = p_sample_step(&x, i, &eps, &sigma, &sched, &noise)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Prediction;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert!((s.alpha_bar[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_terminal_alpha_bar() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // direct product of (1 - beta_i)
        let prod: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!((s.alpha_bar[999] - prod).abs() < 1e-15);
        assert!(s.alpha_bar[999] < 1e-4);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        for t in 1..1000 {
            assert!(s.posterior_variance[t] > 0.0 && s.posterior_variance[t] <= s.beta[t]);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
        assert!(make_schedule(0, 0.01, 0.02).is_err());
    }

    #[test]
    fn q_sample_zero_noise_scales_signal() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let x0 = Tensor::<f64>::from_f64([1, 4], &[1., -2., 0.5, 3.]).unwrap();
        let xt = s.q_sample(&x0, &[7], &Tensor::zeros([1, 4])).unwrap();
        let a = s.alpha_bar[7].sqrt();
        for (o, i) in xt.data().iter().zip(x0.data()) {
            assert!((o - a * i).abs() < 1e-15);
        }
        assert!(s.q_sample(&x0, &[10], &Tensor::zeros([1, 4])).is_err());
    }

    #[test]
    fn variance_endpoints_and_midpoint() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let t = [40usize];
        let ones = Tensor::<f64>::ones([1, 3]);
        let (b, bt) = (s.beta[40], s.posterior_variance[40]);
        let hi = variance_from_v(&ones, &t, &s).unwrap();
        let lo = variance_from_v(&Tensor::<f64>::zeros([1, 3]), &t, &s).unwrap();
        let mid = variance_from_v(&Tensor::full([1, 3], 0.5), &t, &s).unwrap();
        assert!((hi.data()[0] - b).abs() < 1e-15);
        assert!((lo.data()[0] - bt).abs() < 1e-15);
        assert!((mid.data()[0] - (b * bt).sqrt()).abs() < 1e-15);
        // t = 0 collapses both endpoints onto β₀
        let z = variance_from_v(&Tensor::<f64>::zeros([1, 1]), &[0], &s).unwrap();
        assert!((z.data()[0] - s.beta[0]).abs() < 1e-18);
    }

    #[test]
    fn p_sample_zero_inputs_divide_by_sqrt_alpha() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let x = Tensor::<f64>::from_f64([1, 2], &[0.4, -1.0]).unwrap();
        let z = Tensor::zeros([1, 2]);
        let y = p_sample_step(&x, 5, &z, &Tensor::ones([1, 2]), &s, &z).unwrap();
        assert!((y.data()[0] - 0.4 / s.alpha[5].sqrt()).abs() < 1e-15);
        // t = 0 ignores noise
        let n = Tensor::ones([1, 2]);
        let a = p_sample_step(&x, 0, &z, &Tensor::ones([1, 2]), &s, &n).unwrap();
        let b = p_sample_step(&x, 0, &z, &Tensor::ones([1, 2]), &s, &z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn respacing_keeps_endpoints_and_alpha_bar() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let r = s.respace(250).unwrap();
        assert_eq!(r.len(), 250);
        assert_eq!(r.timesteps[0], 0);
        assert_eq!(*r.timesteps.last().unwrap(), 999);
        for (i, &t) in r.timesteps.iter().enumerate() {
            assert!((r.alpha_bar[i] - s.alpha_bar[t]).abs() < 1e-12);
        }
        assert!(s.respace(1001).is_err());
        assert_eq!(s.respace(1000).unwrap(), s);
    }

    struct Shrink;

    impl Denoiser<f64> for Shrink {
        fn predict(&self, x_t: &Tensor<f64>, _t: &[usize], y: &[usize]) -> Result<Prediction<f64>> {
            let per = x_t.len() / y.len();
            let data = x_t
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| 0.1 * x + 0.01 * y[i / per] as f64)
                .collect();
            Ok(Prediction { eps: Tensor::new(x_t.shape().to_vec(), data)?, v: None })
        }
    }

    fn opts(seed: u64) -> SampleOptions {
        SampleOptions { cfg_scale: 1.0, steps: 20, seed }
    }

    #[test]
    fn sampling_is_reproducible_and_batch_independent() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let a = sample(&Shrink, &s, &[0, 1, 2], 3, [1, 2, 2], opts(9)).unwrap();
        let b = sample(&Shrink, &s, &[0, 1, 2], 3, [1, 2, 2], opts(9)).unwrap();
        assert!(a.bitwise_eq(&b));
        let first = sample(&Shrink, &s, &[0, 1], 3, [1, 2, 2], opts(9)).unwrap();
        assert!(first.bitwise_eq(&crate::tensor::kernels::slice_axis(&a, 0, 0, 2).unwrap()));
        let other = sample(&Shrink, &s, &[0, 1, 2], 3, [1, 2, 2], opts(10)).unwrap();
        assert!(!other.bitwise_eq(&a));
    }

    #[test]
    fn guidance_scale_below_one_rejected() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let o = SampleOptions { cfg_scale: 0.5, ..opts(0) };
        assert!(matches!(sample(&Shrink, &s, &[0], 1, [1, 1, 1], o), Err(Error::Config(_))));
    }

    #[test]
    fn unit_guidance_equals_conditional_sampling() {
        // s = 1 must give the conditional model alone, whatever the null branch says
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let a = sample(&Shrink, &s, &[2], 0, [1, 2, 2], opts(4)).unwrap();
        let b = sample(&Shrink, &s, &[2], 3, [1, 2, 2], opts(4)).unwrap();
        assert!(a.bitwise_eq(&b));
        let guided = SampleOptions { cfg_scale: 2.0, ..opts(4) };
        let c = sample(&Shrink, &s, &[2], 0, [1, 2, 2], guided).unwrap();
        assert!(!c.bitwise_eq(&a));
    }

    #[test]
    fn q_sample_moments() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let t = 300;
        let n = 20000;
        let mut rng = item_rng(1, 0);
        let noise = init::randn::<f64, _>(&[n, 1], &mut rng);
        let x0 = Tensor::full([n, 1], 0.8);
        let xt = s.q_sample(&x0, &vec![t; n], &noise).unwrap();
        let mean = xt.mean();
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = s.alpha_bar[t];
        // 5 standard errors
        assert!((mean - 0.8 * ab.sqrt()).abs() < 5.0 * ((1.0 - ab) / n as f64).sqrt());
        assert!((var - (1.0 - ab)).abs() < 5.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn vlb_is_zero_when_model_matches_posterior() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::<f64>::from_f64([1, 2], &[0.3, -0.4]).unwrap();
        let noise = Tensor::<f64>::from_f64([1, 2], &[1.1, 0.2]).unwrap();
        let t = [17usize];
        let xt = s.q_sample(&x0, &t, &noise).unwrap();
        // v = 0 selects β̃ exactly, and the true noise gives the true mean
        let mut g = Graph::new();
        let eps = g.constant(noise);
        let raw = g.constant(Tensor::full([1, 2], -1.0));
        let l = vlb_term(&mut g, &x0, &xt, &t, eps, raw, &s).unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn posterior_variance_bounded_by_beta(steps in 2usize..400, a in 1e-5f64..1e-2, span in 0.0f64..0.1) {
            let s = make_schedule(steps, a, a + span).unwrap();
            for t in 0..steps {
                prop_assert!(s.posterior_variance[t] <= s.beta[t]);
                prop_assert!(s.posterior_variance[t] >= 0.0);
            }
        }

        #[test]
        fn respacing_preserves_kept_alpha_bar(steps in 1usize..200) {
            let s = make_schedule(200, 1e-4, 0.02).unwrap();
            let r = s.respace(steps).unwrap();
            prop_assert_eq!(r.len(), steps);
            prop_assert!(r.timesteps.windows(2).all(|w| w[0] < w[1]));
            for (i, &t) in r.timesteps.iter().enumerate() {
                prop_assert!((r.alpha_bar[i] - s.alpha_bar[t]).abs() < 1e-12);
                prop_assert!(r.posterior_variance[i] <= r.beta[i]);
            }
        }
    }
}
