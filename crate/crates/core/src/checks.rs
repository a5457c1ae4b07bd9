//! Finite-difference gradient suite over every differentiable operation, the
//! attention variants and a tiny full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{linear_attention, softmax_attention, AttentionConfig, AttentionParams, AttentionVariant, LinearForm};
use crate::backbone::{init_specs, BoundParams, param_specs, Dit, ModelConfig, ParamStore};
use crate::diffusion::{make_schedule, vlb_term};
use crate::distill::{hybrid_loss, Batch, DistillConfig};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{gradcheck, DEFAULT_STEP};
use crate::tensor::{init, Graph, Tensor, Var};

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub evaluations: usize,
}

type Loss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Random values with magnitude at least `gap`, away from kinks at zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    init::randn::<f64, _>(shape, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct sensitivity.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4).collect();
    let wv = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<Tensor<f64>>, Loss)> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| init::randn::<f64, _>(s, rng);
    let mut v: Vec<(String, Vec<Tensor<f64>>, Loss)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $f:expr) => {
            v.push(($name.to_string(), vec![$($input),*], Box::new($f)));
        };
    }
    case!("add_broadcast", [r(rng, &[2, 3, 4]), r(rng, &[3, 1])], |g, x| {
        let y = g.add(x[0], x[1])?;
        probe(g, y)
    });
    case!("sub", [r(rng, &[3, 4]), r(rng, &[4])], |g, x| {
        let y = g.sub(x[0], x[1])?;
        probe(g, y)
    });
    case!("mul_broadcast", [r(rng, &[2, 3, 4]), r(rng, &[2, 1, 4])], |g, x| {
        let y = g.mul(x[0], x[1])?;
        probe(g, y)
    });
    case!("div", [r(rng, &[3, 4]), r(rng, &[3, 4]).map(|v| v.abs() + 0.5)], |g, x| {
        let y = g.div(x[0], x[1])?;
        probe(g, y)
    });
    case!("scale_add_scalar_neg", [r(rng, &[5])], |g, x| {
        let a = g.scale(x[0], 1.7);
        let b = g.add_scalar(a, -0.3);
        let c = g.neg(b);
        probe(g, c)
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let (sa, sb) = (if ta { [2, 4, 3] } else { [2, 3, 4] }, if tb { [5, 4] } else { [4, 5] });
        case!(format!("matmul_t{}{}", ta as u8, tb as u8), [r(rng, &sa), r(rng, &sb)], move |g, x| {
            let y = g.matmul_t(x[0], ta, x[1], tb)?;
            probe(g, y)
        });
    }
    case!("matmul_batched", [r(rng, &[2, 2, 3, 4]), r(rng, &[2, 2, 4, 2])], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        probe(g, y)
    });
    case!("reshape_permute", [r(rng, &[2, 3, 4])], |g, x| {
        let a = g.permute(x[0], &[2, 0, 1])?;
        let b = g.reshape(a, &[8, 3])?;
        probe(g, b)
    });
    case!("sum_mean_axis", [r(rng, &[2, 3, 4])], |g, x| {
        let a = g.sum_axis(x[0], 1)?;
        let b = g.mean_axis(x[0], 2)?;
        let (pa, pb) = (probe(g, a)?, probe(g, b)?);
        let s = g.add(pa, pb)?;
        let m = g.mean(x[0]);
        g.add(s, m)
    });
    case!("slice_concat", [r(rng, &[2, 5]), r(rng, &[2, 3])], |g, x| {
        let a = g.slice(x[0], 1, 1, 3)?;
        let c = g.concat(&[a, x[1]], 1)?;
        probe(g, c)
    });
    case!("relu", [away_from_zero(&[3, 4], 0.05, rng)], |g, x| {
        let y = g.relu(x[0]);
        probe(g, y)
    });
    case!("gelu", [r(rng, &[3, 4])], |g, x| {
        let y = g.gelu(x[0]);
        probe(g, y)
    });
    case!("silu", [r(rng, &[3, 4])], |g, x| {
        let y = g.silu(x[0]);
        probe(g, y)
    });
    case!("exp_log", [r(rng, &[6]).map(|v| v.abs() + 0.2)], |g, x| {
        let a = g.log(x[0]);
        let b = g.exp(x[0]);
        let s = g.add(a, b)?;
        probe(g, s)
    });
    case!("square", [r(rng, &[6])], |g, x| {
        let y = g.square(x[0])?;
        probe(g, y)
    });
    case!("clamp", [away_from_zero(&[8], 0.05, rng).map(|v| if (v.abs() - 0.8).abs() < 0.05 { v * 1.2 } else { v })], |g, x| {
        let y = g.clamp(x[0], -0.8, 0.8);
        probe(g, y)
    });
    case!("softmax", [r(rng, &[2, 3, 5])], |g, x| {
        let y = g.softmax(x[0])?;
        probe(g, y)
    });
    case!("layernorm", [r(rng, &[3, 6])], |g, x| {
        let y = g.layernorm(x[0], 1e-6)?;
        probe(g, y)
    });
    case!("depthwise_conv", [r(rng, &[2, 3, 4, 5]), r(rng, &[3, 1, 3, 3]), r(rng, &[3])], |g, x| {
        let y = g.conv2d_depthwise(x[0], x[1], Some(x[2]))?;
        probe(g, y)
    });
    case!("focused", [r(rng, &[2, 3, 4]).map(|v| v.abs() + 0.1)], |g, x| {
        let y = g.focused(x[0], 3)?;
        probe(g, y)
    });
    case!("guard", [away_from_zero(&[6], 0.1, rng)], |g, x| {
        let y = g.guard(x[0], 1e-6);
        probe(g, y)
    });
    case!("index_select", [r(rng, &[4, 3])], |g, x| {
        let y = g.index_select(x[0], &[2, 0, 2])?;
        probe(g, y)
    });
    v
}

fn attention_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<Tensor<f64>>, Loss)> {
    let mut out: Vec<(String, Vec<Tensor<f64>>, Loss)> = Vec::new();
    let variants = [
        (AttentionVariant::Softmax, LinearForm::Scaled),
        (AttentionVariant::LinearRelu, LinearForm::Quadratic),
        (AttentionVariant::LinearRelu, LinearForm::Factorized),
        (AttentionVariant::LinearReluDwc, LinearForm::Scaled),
        (AttentionVariant::FocusedRelu, LinearForm::Scaled),
        (AttentionVariant::FocusedGelu, LinearForm::Scaled),
    ];
    for (variant, form) in variants {
        let base = if variant.is_linear() {
            AttentionConfig::linear(8, 2)
        } else {
            AttentionConfig::softmax(8, 2)
        };
        let mut cfg = base.with_variant(variant);
        cfg.dwc_kernel = 3;
        let specs = cfg.param_specs("");
        let store: ParamStore<f64> = init_specs(&specs, 11);
        let paths: Vec<String> = store.paths().map(String::from).collect();
        let mut inputs = vec![init::randn::<f64, _>(&[1, 4, 8], rng)];
        for p in &paths {
            let t = store.require(p).expect("spec path");
            inputs.push(init::randn::<f64, _>(t.shape(), rng).map(|v| 0.5 * v));
        }
        let name = format!("attention_{}_{:?}", variant.name(), form).to_lowercase();
        out.push((
            name,
            inputs,
            Box::new(move |g, x| {
                let mut bound = BoundParams::default();
                for (i, p) in paths.iter().enumerate() {
                    bound.insert(p.clone(), x[i + 1]);
                }
                let ap = AttentionParams::bind(&bound, "", &cfg)?;
                let y = if cfg.variant.is_linear() {
                    linear_attention(g, x[0], &ap, &cfg, Some((2, 2)), form)?
                } else {
                    softmax_attention(g, x[0], &ap, &cfg)?
                };
                probe(g, y)
            }),
        ));
    }
    out
}

/// A one-block model small enough to perturb every parameter.
pub fn tiny_config(variant: AttentionVariant) -> ModelConfig {
    let mut cfg = ModelConfig::lit_micro();
    cfg.depth = 1;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.image_size = 4;
    cfg.num_classes = 2;
    cfg.freq_dim = 8;
    cfg.mlp_ratio = 2;
    cfg.dwc_kernel = 3;
    cfg.num_timesteps = 20;
    cfg.attention = variant;
    cfg
}

/// A model whose every parameter is drawn from Normal(0, 0.4²), so that no
/// output is trivially zero.
pub fn randomized_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<Dit<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(&cfg) {
        store.insert(spec.path, init::randn::<T, _>(&spec.shape, &mut rng).map(|v| v * T::lit(0.4)));
    }
    Dit::from_params(cfg, store)
}

fn randomized_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        store.insert(spec.path, init::randn::<f64, _>(&spec.shape, rng).map(|v| 0.4 * v));
    }
    store
}

fn model_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<Tensor<f64>>, Loss)> {
    let mut out: Vec<(String, Vec<Tensor<f64>>, Loss)> = Vec::new();
    for variant in [AttentionVariant::Softmax, AttentionVariant::LinearReluDwc] {
        let cfg = tiny_config(variant);
        let params = randomized_params(&cfg, rng);
        let paths: Vec<String> = params.paths().map(String::from).collect();
        let mut inputs: Vec<Tensor<f64>> = paths.iter().map(|p| params.require(p).unwrap().clone()).collect();
        let x0 = init::randn::<f64, _>(&[2, 1, 4, 4], rng);
        inputs.push(x0.clone());
        let model = Dit::from_params(cfg.clone(), params.clone()).expect("tiny model");
        let schedule = make_schedule(cfg.num_timesteps, 1e-3, 0.2).expect("schedule");
        let noise = init::randn::<f64, _>(&[2, 1, 4, 4], rng);
        let teacher = Dit::from_params(cfg.clone(), randomized_params(&cfg, rng)).expect("teacher");
        let bind = {
            let paths = paths.clone();
            move |x: &[Var]| {
                let mut bound = BoundParams::default();
                for (i, p) in paths.iter().enumerate() {
                    bound.insert(p.clone(), x[i]);
                }
                bound
            }
        };
        let n = paths.len();
        let (m1, b1) = (model.clone(), bind.clone());
        out.push((
            format!("model_forward_{}", variant.name()),
            inputs.clone(),
            Box::new(move |g, x| {
                let bound = b1(x);
                let o = m1.forward(g, &bound, x[n], &[3, 17], &[0, 2])?;
                let e = probe(g, o.eps)?;
                let v = probe(g, o.v.expect("learned variance"))?;
                g.add(e, v)
            }),
        ));
        // The mean path is detached by design, so only the variance input
        // is perturbed here.
        let (s2, nz, x0c) = (schedule.clone(), noise.clone(), x0.clone());
        let eps = init::randn::<f64, _>(&[2, 1, 4, 4], rng);
        let raw = init::randn::<f64, _>(&[2, 1, 4, 4], rng).map(|v| 0.8 * v.tanh());
        out.push((
            "vlb_variance".to_string(),
            vec![raw],
            Box::new(move |g, x| {
                let t = [4usize, 12];
                let x_t = s2.q_sample(&x0c, &t, &nz)?;
                let e = g.constant(eps.clone());
                vlb_term(g, &x0c, &x_t, &t, e, x[0], &s2)
            }),
        ));
        let (m3, b3) = (model, bind);
        out.push((
            format!("model_hybrid_{}", variant.name()),
            inputs[..n].to_vec(),
            Box::new(move |g, x| {
                let bound = b3(x);
                let batch = Batch {
                    x0: x0.clone(),
                    noise: noise.clone(),
                    t: vec![2, 15],
                    y: vec![1, 2],
                };
                let h = hybrid_loss(g, &m3, &bound, Some(&teacher), &batch, &schedule, &DistillConfig::default())?;
                Ok(h.total)
            }),
        ));
    }
    out
}

/// Runs every case and reports its worst relative error.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng);
    cases.extend(attention_cases(&mut rng));
    cases.extend(model_cases(&mut rng));
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let r = gradcheck(&inputs, DEFAULT_STEP, f)?;
            Ok(GradCase {
                name,
                max_rel_error: r.max_rel_error(),
                evaluations: r.evaluations,
            })
        })
        .collect()
}

/// Agreement of the three linear evaluation orders on one random layer.
#[derive(Debug, Clone, Serialize)]
pub struct FormCase {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
    /// `‖factorized − quadratic‖∞ / ‖quadratic‖∞`
    pub factorized_rel: f64,
    /// `‖scaled − quadratic‖∞ / ‖quadratic‖∞`
    pub scaled_rel: f64,
}

impl FormCase {
    pub fn worst(&self) -> f64 {
        self.factorized_rel.max(self.scaled_rel)
    }
}

/// Token layout used for the DWC branch: square when possible, else one row.
pub fn token_grid(n: usize) -> (usize, usize) {
    crate::attention::square_grid(n).unwrap_or((1, n))
}

/// Evaluates one random layer in all three orders at precision `T`.
pub fn form_agreement<T: Scalar>(
    tokens: usize,
    dim: usize,
    heads: usize,
    variant: AttentionVariant,
    seed: u64,
) -> Result<FormCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttentionConfig::linear(dim, heads).with_variant(variant);
    let specs = cfg.param_specs("");
    let mut store: ParamStore<T> = init_specs(&specs, seed);
    for (_, t) in store.iter_mut() {
        *t = init::randn::<T, _>(t.shape(), &mut rng).map(|v| v * T::lit(0.5));
    }
    let x = init::randn::<T, _>(&[2, tokens, dim], &mut rng);
    let grid = Some(token_grid(tokens));
    let run = |form: LinearForm| -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let bound = store.bind(&mut g);
        let ap = AttentionParams::bind(&bound, "", &cfg)?;
        let xv = g.constant(x.clone());
        let y = linear_attention(&mut g, xv, &ap, &cfg, grid, form)?;
        Ok(g.value(y).clone())
    };
    let quad = run(LinearForm::Quadratic)?;
    let fact = run(LinearForm::Factorized)?;
    let scaled = run(LinearForm::Scaled)?;
    let floor = T::lit(1e-30);
    Ok(FormCase {
        tokens,
        dim,
        heads,
        variant,
        factorized_rel: fact.rel_error(&quad, floor)?.as_f64(),
        scaled_rel: scaled.rel_error(&quad, floor)?.as_f64(),
    })
}

/// `cases` random layers over N ∈ {1,2,8,64}, D ∈ {8,32}, h ∈ {1,2,4} and
/// every linear kernel variant.
pub fn equivalence_suite<T: Scalar>(cases: usize, seed: u64) -> Result<Vec<FormCase>> {
    use rand::Rng;
    const TOKENS: [usize; 4] = [1, 2, 8, 64];
    const DIMS: [usize; 2] = [8, 32];
    const HEADS: [usize; 3] = [1, 2, 4];
    const VARIANTS: [AttentionVariant; 4] = [
        AttentionVariant::LinearRelu,
        AttentionVariant::LinearReluDwc,
        AttentionVariant::FocusedRelu,
        AttentionVariant::FocusedGelu,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|i| {
            // The first 24 cases cover the grid once; the rest are drawn.
            let (n, d, h) = if i < 24 {
                (TOKENS[i % 4], DIMS[(i / 4) % 2], HEADS[i / 8])
            } else {
                (
                    TOKENS[rng.random_range(0..4)],
                    DIMS[rng.random_range(0..2)],
                    HEADS[rng.random_range(0..3)],
                )
            };
            let variant = VARIANTS[i % VARIANTS.len()];
            form_agreement::<T>(n, d, h, variant, rng.random())
        })
        .collect()
}
