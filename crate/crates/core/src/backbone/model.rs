use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_forward, attention_maps, AttentionParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init, Graph, Tensor, Var};

use super::config::{ModelConfig, LAYERNORM_EPS};
use super::params::{BoundParams, Init, ParamSpec, ParamStore};

/// Every parameter of `cfg`, in definition (and serialization) order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    let w = Init::TruncNormal(0.02);
    let mut s = vec![
        ParamSpec::new("x_embedder.weight", [cfg.patch_dim(), d], w),
        ParamSpec::new("x_embedder.bias", [d], Init::Zeros),
        ParamSpec::new("t_embedder.fc1.weight", [cfg.freq_dim, d], w),
        ParamSpec::new("t_embedder.fc1.bias", [d], Init::Zeros),
        ParamSpec::new("t_embedder.fc2.weight", [d, d], w),
        ParamSpec::new("t_embedder.fc2.bias", [d], Init::Zeros),
        ParamSpec::new("y_embedder.table", [cfg.num_classes + 1, d], w),
    ];
    let attn = cfg.attention_config();
    let hidden = cfg.mlp_ratio * d;
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}.");
        s.push(ParamSpec::new(format!("{b}adaln.weight"), [d, 6 * d], Init::Zeros));
        s.push(ParamSpec::new(format!("{b}adaln.bias"), [6 * d], Init::Zeros));
        s.extend(attn.param_specs(&format!("{b}attn.")));
        s.push(ParamSpec::new(format!("{b}mlp.fc1.weight"), [d, hidden], w));
        s.push(ParamSpec::new(format!("{b}mlp.fc1.bias"), [hidden], Init::Zeros));
        s.push(ParamSpec::new(format!("{b}mlp.fc2.weight"), [hidden, d], w));
        s.push(ParamSpec::new(format!("{b}mlp.fc2.bias"), [d], Init::Zeros));
    }
    let out = cfg.patch * cfg.patch * cfg.out_channels();
    s.push(ParamSpec::new("final_layer.adaln.weight", [d, 2 * d], Init::Zeros));
    s.push(ParamSpec::new("final_layer.adaln.bias", [2 * d], Init::Zeros));
    s.push(ParamSpec::new("final_layer.linear.weight", [d, out], Init::Zeros));
    s.push(ParamSpec::new("final_layer.linear.bias", [out], Init::Zeros));
    s
}

/// Fresh parameters: truncated normal (std 0.02) weights, zero biases,
/// zero adaLN and output layers.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    Ok(init_specs(&param_specs(cfg), seed))
}

/// Initializes `specs` in order from one seeded stream.
pub fn init_specs<T: Scalar>(specs: &[ParamSpec], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
            Init::TruncNormal(std) => init::trunc_normal(&spec.shape, std, &mut rng),
            Init::Uniform(b) => init::uniform(&spec.shape, b, &mut rng),
        };
        store.insert(spec.path.clone(), t);
    }
    store
}

/// `[sin(t·ω₀..), cos(t·ω₀..)]` with `ωᵢ = 10000^(−i/(dim/2))`.
pub fn timestep_sinusoid<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        data.extend(args.iter().map(|a| T::lit(a.sin())));
        data.extend(args.iter().map(|a| T::lit(a.cos())));
    }
    Tensor::from_parts(vec![t.len(), dim], data)
}

/// Fixed 2-d sine-cosine position features `[grid², dim]`.
pub fn pos_embed_2d<T: Scalar>(grid: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            // first half encodes the column, second half the row
            for pos in [c as f64, r as f64] {
                data.extend(omega.iter().map(|w| T::lit((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::lit((pos * w).cos())));
            }
        }
    }
    Tensor::from_parts(vec![grid * grid, dim], data)
}

/// `[b, C, S, S] -> [b, N, p·p·C]`, tokens in row-major grid order and each
/// token laid out as (row-in-patch, column-in-patch, channel).
pub fn patchify<T: Scalar>(g: &mut Graph<T>, x: Var, patch: usize) -> Result<Var> {
    let (b, c, h, w) = match g.shape(x) {
        &[b, c, h, w] => (b, c, h, w),
        s => return Err(Error::shape("patchify", format!("expected [b,C,S,S], got {:?}", s))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let r = g.reshape(x, &[b, c, gh, patch, gw, patch])?;
    let p = g.permute(r, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(p, &[b, gh * gw, patch * patch * c])
}

/// Inverse of [`patchify`] for `channels` output channels on a square grid.
pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, x: Var, patch: usize, channels: usize) -> Result<Var> {
    let (b, n, f) = match g.shape(x) {
        &[b, n, f] => (b, n, f),
        s => return Err(Error::shape("unpatchify", format!("expected [b,N,F], got {:?}", s))),
    };
    if f != patch * patch * channels {
        return Err(Error::shape(
            "unpatchify",
            format!("token width {f} != {patch}²·{channels}"),
        ));
    }
    let grid = crate::attention::square_grid(n)?.0;
    let r = g.reshape(x, &[b, grid, grid, patch, patch, channels])?;
    let p = g.permute(r, &[0, 5, 1, 3, 2, 4])?;
    g.reshape(p, &[b, channels, grid * patch, grid * patch])
}

/// Rows of the label table; index `num_classes` is the null label.
pub fn label_embedding<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    y: &[usize],
    num_classes: usize,
) -> Result<Var> {
    if let Some(&bad) = y.iter().find(|&&v| v > num_classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range [0, {num_classes}]"
        )));
    }
    g.index_select(table, y)
}

/// `x · (1 + scale) + shift` with per-sample `[b, D]` modulation broadcast
/// over tokens.
pub fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let (b, d) = (g.shape(shift)[0], g.shape(shift)[1]);
    let shift = g.reshape(shift, &[b, 1, d])?;
    let scale = g.reshape(scale, &[b, 1, d])?;
    let one = g.add_scalar(scale, 1.0);
    let y = g.mul(x, one)?;
    g.add(y, shift)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, path: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{path}.weight"))?)?;
    g.add(y, p.get(&format!("{path}.bias"))?)
}

fn chunk<T: Scalar>(g: &mut Graph<T>, m: Var, i: usize, d: usize) -> Result<Var> {
    g.slice(m, 1, i * d, d)
}

/// One adaLN-Zero block:
/// `x + g₁⊙Attn(mod(LN x; s₁, c₁))`, then `x + g₂⊙FFN(mod(LN x; s₂, c₂))`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    index: usize,
    x: Var,
    c: Var,
) -> Result<Var> {
    let d = cfg.hidden;
    let prefix = format!("blocks.{index}.");
    let act = g.silu(c);
    let m = linear(g, p, &format!("{prefix}adaln"), act)?;
    let shift_msa = chunk(g, m, 0, d)?;
    let scale_msa = chunk(g, m, 1, d)?;
    let gate_msa = chunk(g, m, 2, d)?;
    let shift_mlp = chunk(g, m, 3, d)?;
    let scale_mlp = chunk(g, m, 4, d)?;
    let gate_mlp = chunk(g, m, 5, d)?;
    let b = g.shape(c)[0];

    let acfg = cfg.attention_config();
    let ap = AttentionParams::bind(p, &format!("{prefix}attn."), &acfg)?;
    let h = g.layernorm(x, LAYERNORM_EPS)?;
    let h = modulate(g, h, shift_msa, scale_msa)?;
    let h = attention_forward(g, h, &ap, &acfg, Some((cfg.grid(), cfg.grid())))?;
    let gate = g.reshape(gate_msa, &[b, 1, d])?;
    let h = g.mul(h, gate)?;
    let x = g.add(x, h)?;

    let h = g.layernorm(x, LAYERNORM_EPS)?;
    let h = modulate(g, h, shift_mlp, scale_mlp)?;
    let h = linear(g, p, &format!("{prefix}mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}mlp.fc2"), h)?;
    let gate = g.reshape(gate_mlp, &[b, 1, d])?;
    let h = g.mul(h, gate)?;
    g.add(x, h)
}

/// Graph handles of a forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Predicted noise `[b, C, S, S]`.
    pub eps: Var,
    /// Raw variance-interpolation output `[b, C, S, S]`, when learned.
    pub v: Option<Var>,
}

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, stage: impl FnOnce() -> String) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault { stage: stage() })
    }
}

/// A configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dit<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Detached model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub eps: Tensor<T>,
    pub v: Option<Tensor<T>>,
}

/// Anything that predicts noise (and optionally variance) for a batch.
pub trait Denoiser<T: Scalar> {
    fn predict(&self, x_t: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<Prediction<T>>;
}

impl<T: Scalar> Dit<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Dit { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for spec in param_specs(&config) {
            let t = params.require(&spec.path)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Structural {
                    message: format!(
                        "parameter {} has shape {:?}, config expects {:?}",
                        spec.path,
                        t.shape(),
                        spec.shape
                    ),
                    paths: vec![spec.path],
                });
            }
        }
        Ok(Dit { config, params })
    }

    /// Conditioning vector `c = MLP(sinusoid(t)) + table[y]`, `[b, D]`.
    pub fn conditioning(&self, g: &mut Graph<T>, p: &BoundParams, t: &[usize], y: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        if let Some(&bad) = t.iter().find(|&&v| v >= cfg.num_timesteps) {
            return Err(Error::Contract(format!(
                "timestep {bad} out of range [0, {})",
                cfg.num_timesteps
            )));
        }
        let freq = g.constant(timestep_sinusoid(t, cfg.freq_dim));
        let h = linear(g, p, "t_embedder.fc1", freq)?;
        let h = g.silu(h);
        let temb = linear(g, p, "t_embedder.fc2", h)?;
        let yemb = label_embedding(g, p.get("y_embedder.table")?, y, cfg.num_classes)?;
        g.add(temb, yemb)
    }

    /// Full forward pass on `x_t: [b, C, S, S]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x_t: Var,
        t: &[usize],
        y: &[usize],
    ) -> Result<ModelOutput> {
        self.forward_inner(g, p, x_t, t, y, None)
    }

    fn forward_inner(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x_t: Var,
        t: &[usize],
        y: &[usize],
        mut maps: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let b = match g.shape(x_t) {
            &[b, c, h, w] if c == cfg.in_channels && h == cfg.image_size && w == cfg.image_size => b,
            s => {
                return Err(Error::shape(
                    "model_forward",
                    format!(
                        "expected [b, {}, {}, {}], got {:?}",
                        cfg.in_channels, cfg.image_size, cfg.image_size, s
                    ),
                ))
            }
        };
        if t.len() != b || y.len() != b {
            return Err(Error::shape(
                "model_forward",
                format!("batch {b} with {} timesteps and {} labels", t.len(), y.len()),
            ));
        }
        let tokens = patchify(g, x_t, cfg.patch)?;
        let h = linear(g, p, "x_embedder", tokens)?;
        let pos = g.constant(pos_embed_2d(cfg.grid(), cfg.hidden));
        let mut x = g.add(h, pos)?;
        let c = self.conditioning(g, p, t, y)?;
        check_finite(g, x, || "embedding".into())?;
        check_finite(g, c, || "conditioning".into())?;

        for i in 0..cfg.depth {
            if let Some(maps) = maps.as_deref_mut() {
                maps.push(self.block_attention_maps(g, p, i, x, c)?);
            }
            x = block_forward(g, p, cfg, i, x, c)?;
            check_finite(g, x, || format!("block {i}"))?;
        }

        let d = cfg.hidden;
        let act = g.silu(c);
        let m = linear(g, p, "final_layer.adaln", act)?;
        let shift = chunk(g, m, 0, d)?;
        let scale = chunk(g, m, 1, d)?;
        let h = g.layernorm(x, LAYERNORM_EPS)?;
        let h = modulate(g, h, shift, scale)?;
        let h = linear(g, p, "final_layer.linear", h)?;
        let img = unpatchify(g, h, cfg.patch, cfg.out_channels())?;
        check_finite(g, img, || "final layer".into())?;
        if cfg.learn_sigma {
            let eps = g.slice(img, 1, 0, cfg.in_channels)?;
            let v = g.slice(img, 1, cfg.in_channels, cfg.in_channels)?;
            Ok(ModelOutput { eps, v: Some(v) })
        } else {
            Ok(ModelOutput { eps: img, v: None })
        }
    }

    fn block_attention_maps(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        index: usize,
        x: Var,
        c: Var,
    ) -> Result<Tensor<T>> {
        let d = self.config.hidden;
        let act = g.silu(c);
        let m = linear(g, p, &format!("blocks.{index}.adaln"), act)?;
        let shift = chunk(g, m, 0, d)?;
        let scale = chunk(g, m, 1, d)?;
        let h = g.layernorm(x, LAYERNORM_EPS)?;
        let h = modulate(g, h, shift, scale)?;
        let acfg = self.config.attention_config();
        let ap = AttentionParams::bind(p, &format!("blocks.{index}.attn."), &acfg)?;
        attention_maps(g, h, &ap, &acfg)
    }

    /// Per-layer attention maps `[b, h, N, N]` for a batch.
    pub fn attention_maps(&self, x_t: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let x = g.constant(x_t.clone());
        let mut maps = Vec::new();
        self.forward_inner(&mut g, &p, x, t, y, Some(&mut maps))?;
        Ok(maps)
    }
}

impl<T: Scalar> Denoiser<T> for Dit<T> {
    fn predict(&self, x_t: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<Prediction<T>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let x = g.constant(x_t.clone());
        let out = self.forward(&mut g, &p, x, t, y)?;
        Ok(Prediction {
            eps: g.value(out.eps).clone(),
            v: out.v.map(|v| g.value(v).clone()),
        })
    }
}
