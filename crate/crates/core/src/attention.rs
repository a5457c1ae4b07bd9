//! Softmax and kernelized linear attention, multi-head plumbing and the
//! head-similarity diagnostic.
//!
//! Linear attention is available in three evaluation orders that compute the
//! same function:
//!
//! * [`LinearForm::Quadratic`]: materializes the `N×N` similarity matrix
//!   `φ(Q)φ(K)ᵀ` and normalizes each row. Kept as a reference.
//! * [`LinearForm::Factorized`]: `φ(Q)(φ(K)ᵀV)` with row sums `φ(Q)Σφ(K)`.
//! * [`LinearForm::Scaled`]: the production order, `kv = (φ(K)ᵀ/√N)(V/√N)`,
//!   `z = 1/(φ(Q)·mean(φ(K)) + ε)`, output `φ(Q)·kv·z`.
//!
//! All three share the denominator `Σⱼ φ(qᵢ)·φ(kⱼ) + N·ε`, which is what the
//! scaled order computes once its `1/N` factors are expanded.

use serde::{Deserialize, Serialize};

use crate::backbone::{BoundParams, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Magnitude floor for the normalizer of linear attention.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Softmax,
    /// ReLU kernel, no depthwise convolution.
    LinearRelu,
    /// ReLU kernel plus depthwise convolution on the values.
    LinearReluDwc,
    FocusedRelu,
    FocusedGelu,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::Softmax,
        AttentionVariant::LinearRelu,
        AttentionVariant::LinearReluDwc,
        AttentionVariant::FocusedRelu,
        AttentionVariant::FocusedGelu,
    ];

    pub fn is_linear(self) -> bool {
        self != AttentionVariant::Softmax
    }

    /// Every linear variant except the plain ReLU baseline carries a DWC branch.
    pub fn has_dwc(self) -> bool {
        matches!(
            self,
            AttentionVariant::LinearReluDwc | AttentionVariant::FocusedRelu | AttentionVariant::FocusedGelu
        )
    }

    pub fn is_focused(self) -> bool {
        matches!(self, AttentionVariant::FocusedRelu | AttentionVariant::FocusedGelu)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Softmax => "softmax",
            AttentionVariant::LinearRelu => "linear_relu",
            AttentionVariant::LinearReluDwc => "linear_relu_dwc",
            AttentionVariant::FocusedRelu => "focused_relu",
            AttentionVariant::FocusedGelu => "focused_gelu",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {s:?}")))
    }
}

/// How the query/key/value projections are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkvLayout {
    /// One `D×3D` matrix `qkv`.
    Fused,
    /// `q` (`D×D`) and a fused `kv` (`D×2D`).
    QKv,
    /// Three `D×D` matrices.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearForm {
    Quadratic,
    Factorized,
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub variant: AttentionVariant,
    pub dwc_kernel: usize,
    pub kernel_eps: f64,
    pub focused_power: u32,
    pub qkv_layout: QkvLayout,
    pub qkv_bias: bool,
}

impl AttentionConfig {
    /// Linear attention with DWC (k = 5), ε = 1e-6, split `q`/`kv` projections.
    pub fn linear(dim: usize, num_heads: usize) -> Self {
        AttentionConfig {
            dim,
            num_heads,
            variant: AttentionVariant::LinearReluDwc,
            dwc_kernel: 5,
            kernel_eps: 1e-6,
            focused_power: 3,
            qkv_layout: QkvLayout::QKv,
            qkv_bias: false,
        }
    }

    pub fn softmax(dim: usize, num_heads: usize) -> Self {
        AttentionConfig {
            variant: AttentionVariant::Softmax,
            qkv_layout: QkvLayout::Fused,
            qkv_bias: true,
            ..Self::linear(dim, num_heads)
        }
    }

    pub fn with_variant(mut self, variant: AttentionVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("attention dim and head count must be positive".into()));
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} is not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.variant.has_dwc() && self.dwc_kernel % 2 == 0 {
            return Err(Error::Config(format!("DWC kernel must be odd, got {}", self.dwc_kernel)));
        }
        if !(self.kernel_eps > 0.0) {
            return Err(Error::Config("kernel eps must be > 0".into()));
        }
        if self.variant.is_focused() && self.focused_power == 0 {
            return Err(Error::Config("focused power must be positive".into()));
        }
        Ok(())
    }

    /// Parameters under `prefix` (which should end in a dot).
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.dim;
        let w = Init::TruncNormal(0.02);
        let mut specs = Vec::new();
        let mut proj = |name: &str, out: usize| {
            specs.push(ParamSpec::new(format!("{prefix}{name}.weight"), [d, out], w));
            if self.qkv_bias {
                specs.push(ParamSpec::new(format!("{prefix}{name}.bias"), [out], Init::Zeros));
            }
        };
        match self.qkv_layout {
            QkvLayout::Fused => proj("qkv", 3 * d),
            QkvLayout::QKv => {
                proj("q", d);
                proj("kv", 2 * d);
            }
            QkvLayout::Separate => {
                proj("q", d);
                proj("k", d);
                proj("v", d);
            }
        }
        specs.push(ParamSpec::new(format!("{prefix}proj.weight"), [d, d], w));
        specs.push(ParamSpec::new(format!("{prefix}proj.bias"), [d], Init::Zeros));
        if self.variant.has_dwc() {
            let (hd, k) = (self.head_dim(), self.dwc_kernel);
            let bound = 1.0 / k as f64;
            specs.push(ParamSpec::new(format!("{prefix}dwc.weight"), [hd, 1, k, k], Init::Uniform(bound)));
            specs.push(ParamSpec::new(format!("{prefix}dwc.bias"), [hd], Init::Uniform(bound)));
        }
        specs
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: Var,
    b: Option<Var>,
}

impl Linear {
    fn bind(p: &BoundParams, path: &str) -> Result<Self> {
        Ok(Linear {
            w: p.get(&format!("{path}.weight"))?,
            b: p.get_opt(&format!("{path}.bias")),
        })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum QkvVars {
    Fused(Linear),
    QKv(Linear, Linear),
    Separate(Linear, Linear, Linear),
}

/// Graph handles of one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    qkv: QkvVars,
    proj: Linear,
    dwc: Option<(Var, Var)>,
}

impl AttentionParams {
    pub fn bind(p: &BoundParams, prefix: &str, cfg: &AttentionConfig) -> Result<Self> {
        let lin = |name: &str| Linear::bind(p, &format!("{prefix}{name}"));
        let qkv = match cfg.qkv_layout {
            QkvLayout::Fused => QkvVars::Fused(lin("qkv")?),
            QkvLayout::QKv => QkvVars::QKv(lin("q")?, lin("kv")?),
            QkvLayout::Separate => QkvVars::Separate(lin("q")?, lin("k")?, lin("v")?),
        };
        let dwc = if cfg.variant.has_dwc() {
            Some((
                p.get(&format!("{prefix}dwc.weight"))?,
                p.get(&format!("{prefix}dwc.bias"))?,
            ))
        } else {
            None
        };
        Ok(AttentionParams {
            qkv,
            proj: lin("proj")?,
            dwc,
        })
    }
}

/// Projects `x: [b, N, D]` to `(q, k, v)`, each `[b, N, D]`.
fn project_qkv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    d: usize,
) -> Result<(Var, Var, Var)> {
    match p.qkv {
        QkvVars::Fused(l) => {
            let y = l.apply(g, x)?;
            let ax = g.shape(y).len() - 1;
            Ok((g.slice(y, ax, 0, d)?, g.slice(y, ax, d, d)?, g.slice(y, ax, 2 * d, d)?))
        }
        QkvVars::QKv(lq, lkv) => {
            let q = lq.apply(g, x)?;
            let kv = lkv.apply(g, x)?;
            let ax = g.shape(kv).len() - 1;
            Ok((q, g.slice(kv, ax, 0, d)?, g.slice(kv, ax, d, d)?))
        }
        QkvVars::Separate(lq, lk, lv) => Ok((lq.apply(g, x)?, lk.apply(g, x)?, lv.apply(g, x)?)),
    }
}

fn dims<T: Scalar>(g: &Graph<T>, x: Var, cfg: &AttentionConfig) -> Result<(usize, usize)> {
    match g.shape(x) {
        &[b, n, d] if d == cfg.dim && n >= 1 => Ok((b, n)),
        s => Err(Error::shape(
            "attention",
            format!("expected [b, N, {}] with N >= 1, got {:?}", cfg.dim, s),
        )),
    }
}

/// `[b, N, D] -> [b, h, N, d]`
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let (b, n, d) = match g.shape(x) {
        &[b, n, d] => (b, n, d),
        s => return Err(Error::shape("split_heads", format!("expected rank 3, got {:?}", s))),
    };
    let r = g.reshape(x, &[b, n, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[b, h, N, d] -> [b, N, D]`
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b, h, n, d) = match g.shape(x) {
        &[b, h, n, d] => (b, h, n, d),
        s => return Err(Error::shape("merge_heads", format!("expected rank 4, got {:?}", s))),
    };
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, n, h * d])
}

/// Kernel feature map: ReLU or GELU, plus ε, optionally followed by the
/// focusing power map over each token row.
pub fn feature_map<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    let act = match cfg.variant {
        AttentionVariant::FocusedGelu => g.gelu(x),
        AttentionVariant::Softmax => {
            return Err(Error::Contract("softmax attention has no kernel feature map".into()))
        }
        _ => g.relu(x),
    };
    let shifted = g.add_scalar(act, cfg.kernel_eps);
    if cfg.variant.is_focused() {
        g.focused(shifted, cfg.focused_power)
    } else {
        Ok(shifted)
    }
}

/// Per-head depthwise convolution of the value field added to the attention
/// output (before the output projection).
///
/// `attn_out`: `[b, N, D]`, `v`: `[b, h, N, d]`, `weight`: `[d, 1, k, k]`.
pub fn dwc_value_augment<T: Scalar>(
    g: &mut Graph<T>,
    attn_out: Var,
    v: Var,
    weight: Var,
    bias: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let (b, h, n, d) = match g.shape(v) {
        &[b, h, n, d] => (b, h, n, d),
        s => return Err(Error::shape("dwc_value_augment", format!("value must be [b,h,N,d], got {:?}", s))),
    };
    let (gh, gw) = grid;
    if gh * gw != n {
        return Err(Error::shape(
            "dwc_value_augment",
            format!("{n} tokens do not form a {gh}x{gw} grid"),
        ));
    }
    let vt = g.permute(v, &[0, 1, 3, 2])?;
    let field = g.reshape(vt, &[b * h, d, gh, gw])?;
    let conv = g.conv2d_depthwise(field, weight, Some(bias))?;
    let flat = g.reshape(conv, &[b, h * d, n])?;
    let tokens = g.permute(flat, &[0, 2, 1])?;
    g.add(attn_out, tokens)
}

/// Square grid for `n` tokens when `n` is a perfect square.
pub fn square_grid(n: usize) -> Result<(usize, usize)> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s == n {
        Ok((s, s))
    } else {
        Err(Error::shape("attention", format!("{n} tokens do not form a square grid")))
    }
}

/// Multi-head scaled dot-product attention with output projection.
pub fn softmax_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Var> {
    cfg.validate()?;
    dims(g, x, cfg)?;
    let (q, k, v) = project_qkv(g, x, p, cfg.dim)?;
    let (qh, kh, vh) = (
        split_heads(g, q, cfg.num_heads)?,
        split_heads(g, k, cfg.num_heads)?,
        split_heads(g, v, cfg.num_heads)?,
    );
    let scores = g.matmul_t(qh, false, kh, true)?;
    let scaled = g.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt());
    let attn = g.softmax(scaled)?;
    let out = g.matmul(attn, vh)?;
    let merged = merge_heads(g, out)?;
    p.proj.apply(g, merged)
}

/// Output of the linear attention core before head merging.
struct LinearCore {
    heads_out: Var,
    v_heads: Var,
}

fn linear_core<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
    form: LinearForm,
) -> Result<LinearCore> {
    let (_, n) = dims(g, x, cfg)?;
    let (q, k, v) = project_qkv(g, x, p, cfg.dim)?;
    let fq = feature_map(g, q, cfg)?;
    let fk = feature_map(g, k, cfg)?;
    let (qh, kh, vh) = (
        split_heads(g, fq, cfg.num_heads)?,
        split_heads(g, fk, cfg.num_heads)?,
        split_heads(g, v, cfg.num_heads)?,
    );
    let nf = n as f64;
    let heads_out = match form {
        LinearForm::Quadratic => {
            let sim = g.matmul_t(qh, false, kh, true)?; // [b,h,N,N]
            let rows = g.sum_axis(sim, 3)?;
            let den = g.add_scalar(rows, nf * cfg.kernel_eps);
            let den = g.guard(den, nf * DENOMINATOR_FLOOR);
            let num = g.matmul(sim, vh)?;
            g.div(num, den)?
        }
        LinearForm::Factorized => {
            let kv = g.matmul_t(kh, true, vh, false)?; // [b,h,d,d]
            let num = g.matmul(qh, kv)?;
            let ksum = g.sum_axis(kh, 2)?; // [b,h,1,d]
            let rows = g.matmul_t(qh, false, ksum, true)?; // [b,h,N,1]
            let den = g.add_scalar(rows, nf * cfg.kernel_eps);
            let den = g.guard(den, nf * DENOMINATOR_FLOOR);
            g.div(num, den)?
        }
        LinearForm::Scaled => {
            let kmean = g.mean_axis(kh, 2)?;
            let rows = g.matmul_t(qh, false, kmean, true)?;
            let den = g.add_scalar(rows, cfg.kernel_eps);
            let den = g.guard(den, DENOMINATOR_FLOOR);
            let one = g.constant(Tensor::scalar(T::one()));
            let z = g.div(one, den)?;
            let ks = g.scale(kh, nf.powf(-0.5));
            let vs = g.scale(vh, nf.powf(-0.5));
            let kv = g.matmul_t(ks, true, vs, false)?;
            let num = g.matmul(qh, kv)?;
            g.mul(num, z)?
        }
    };
    Ok(LinearCore {
        heads_out,
        v_heads: vh,
    })
}

/// Linear attention (any kernel variant) evaluated in the given order,
/// including the DWC branch and output projection.
///
/// `grid` is the token layout for the DWC branch; `None` means square.
pub fn linear_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
    grid: Option<(usize, usize)>,
    form: LinearForm,
) -> Result<Var> {
    cfg.validate()?;
    if !cfg.variant.is_linear() {
        return Err(Error::Config("linear_attention called with softmax variant".into()));
    }
    let core = linear_core(g, x, p, cfg, form)?;
    let mut out = merge_heads(g, core.heads_out)?;
    if let Some((w, b)) = p.dwc {
        let n = g.shape(x)[1];
        let grid = match grid {
            Some(gr) => gr,
            None => square_grid(n)?,
        };
        out = dwc_value_augment(g, out, core.v_heads, w, b, grid)?;
    }
    p.proj.apply(g, out)
}

pub fn linear_attention_quadratic<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
    grid: Option<(usize, usize)>,
) -> Result<Var> {
    linear_attention(g, x, p, cfg, grid, LinearForm::Quadratic)
}

pub fn linear_attention_factorized<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
    grid: Option<(usize, usize)>,
) -> Result<Var> {
    linear_attention(g, x, p, cfg, grid, LinearForm::Factorized)
}

/// The attention layer as used inside the backbone: softmax, or linear in
/// the scaled evaluation order.
pub fn attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
    grid: Option<(usize, usize)>,
) -> Result<Var> {
    if cfg.variant.is_linear() {
        linear_attention(g, x, p, cfg, grid, LinearForm::Scaled)
    } else {
        softmax_attention(g, x, p, cfg)
    }
}

/// Row-normalized per-head attention matrices `[b, h, N, N]`.
pub fn attention_maps<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, n) = dims(g, x, cfg)?;
    let (q, k, _) = project_qkv(g, x, p, cfg.dim)?;
    let maps = if cfg.variant.is_linear() {
        let fq = feature_map(g, q, cfg)?;
        let fk = feature_map(g, k, cfg)?;
        let qh = split_heads(g, fq, cfg.num_heads)?;
        let kh = split_heads(g, fk, cfg.num_heads)?;
        let sim = g.matmul_t(qh, false, kh, true)?;
        let rows = g.sum_axis(sim, 3)?;
        let den = g.add_scalar(rows, n as f64 * cfg.kernel_eps);
        let den = g.guard(den, n as f64 * DENOMINATOR_FLOOR);
        g.div(sim, den)?
    } else {
        let qh = split_heads(g, q, cfg.num_heads)?;
        let kh = split_heads(g, k, cfg.num_heads)?;
        let s = g.matmul_t(qh, false, kh, true)?;
        let s = g.scale(s, 1.0 / (cfg.head_dim() as f64).sqrt());
        g.softmax(s)?
    };
    Ok(g.value(maps).clone())
}

/// Mean pairwise cosine similarity between flattened per-head maps
/// `[h, N, N]` (any trailing shape is flattened per head).
pub fn head_similarity<T: Scalar>(maps: &Tensor<T>) -> Result<f64> {
    let h = *maps
        .shape()
        .first()
        .ok_or_else(|| Error::Contract("head_similarity needs a head axis".into()))?;
    if h < 2 {
        return Err(Error::Contract(format!("head_similarity needs at least 2 heads, got {h}")));
    }
    let per = maps.len() / h;
    let rows: Vec<&[T]> = maps.data().chunks(per).collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..h {
        for j in i + 1..h {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let denom = norms[i] * norms[j];
            total += if denom > 0.0 { dot / denom } else { 0.0 };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_specs, ParamStore};
    use crate::checks::form_agreement;
    use crate::tensor::init;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_store(cfg: &AttentionConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store: ParamStore<f64> = init_specs(&cfg.param_specs(""), seed);
        for (_, t) in store.iter_mut() {
            *t = init::randn::<f64, _>(t.shape(), &mut rng).map(|v| 0.5 * v);
        }
        store
    }

    fn identity(d: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros([d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    fn run(
        store: &ParamStore<f64>,
        cfg: &AttentionConfig,
        x: &Tensor<f64>,
        grid: Option<(usize, usize)>,
        form: LinearForm,
    ) -> Tensor<f64> {
        let mut g = Graph::inference();
        let bound = store.bind(&mut g);
        let ap = AttentionParams::bind(&bound, "", cfg).unwrap();
        let xv = g.constant(x.clone());
        let y = if cfg.variant.is_linear() {
            linear_attention(&mut g, xv, &ap, cfg, grid, form).unwrap()
        } else {
            softmax_attention(&mut g, xv, &ap, cfg).unwrap()
        };
        g.value(y).clone()
    }

    /// `x @ w[:, start..start+len]` for `x: [b, N, D]`.
    fn project(x: &Tensor<f64>, w: &Tensor<f64>, start: usize, len: usize) -> Vec<f64> {
        let (rows, d) = (x.len() / x.shape()[2], x.shape()[2]);
        let cols = w.shape()[1];
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            for c in 0..len {
                out[r * len + c] = (0..d).map(|i| x.data()[r * d + i] * w.data()[i * cols + start + c]).sum();
            }
        }
        out
    }

    #[test]
    fn forms_agree_for_every_kernel() {
        for (i, v) in [
            AttentionVariant::LinearRelu,
            AttentionVariant::LinearReluDwc,
            AttentionVariant::FocusedRelu,
            AttentionVariant::FocusedGelu,
        ]
        .into_iter()
        .enumerate()
        {
            let c = form_agreement::<f64>(16, 8, 2, v, i as u64).unwrap();
            assert!(c.worst() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn single_token_returns_projected_value() {
        let cfg = AttentionConfig::linear(8, 2).with_variant(AttentionVariant::LinearRelu);
        let mut store = random_store(&cfg, 1);
        *store.get_mut("proj.weight").unwrap() = identity(8);
        *store.get_mut("proj.bias").unwrap() = Tensor::zeros([8]);
        let x = init::randn::<f64, _>(&[1, 1, 8], &mut ChaCha8Rng::seed_from_u64(2));
        let q = project(&x, store.get("q.weight").unwrap(), 0, 8);
        let k = project(&x, store.get("kv.weight").unwrap(), 0, 8);
        let v = project(&x, store.get("kv.weight").unwrap(), 8, 8);
        let phi = |z: f64| z.max(0.0) + cfg.kernel_eps;
        let y = run(&store, &cfg, &x, Some((1, 1)), LinearForm::Scaled);
        for h in 0..2 {
            let s: f64 = (0..4).map(|i| phi(q[h * 4 + i]) * phi(k[h * 4 + i])).sum();
            let w = s / (s + cfg.kernel_eps);
            for i in 0..4 {
                let j = h * 4 + i;
                assert!((y.data()[j] - w * v[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dwc_branch_adds_a_depthwise_convolution_of_v() {
        let (d, heads, k, side) = (8, 2, 3, 3);
        let n = side * side;
        let cfg = AttentionConfig::linear(d, heads);
        let mut store = random_store(&cfg, 5);
        *store.get_mut("proj.weight").unwrap() = identity(d);
        *store.get_mut("proj.bias").unwrap() = Tensor::zeros([d]);
        let mut cfg = cfg;
        cfg.dwc_kernel = k;
        let specs = cfg.param_specs("");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for s in specs.iter().filter(|s| s.path.starts_with("dwc")) {
            store.insert(s.path.clone(), init::randn::<f64, _>(&s.shape, &mut rng));
        }
        let plain_cfg = cfg.clone().with_variant(AttentionVariant::LinearRelu);
        let x = init::randn::<f64, _>(&[1, n, d], &mut rng);
        let with = run(&store, &cfg, &x, None, LinearForm::Scaled);
        let without = run(&store, &plain_cfg, &x, None, LinearForm::Scaled);

        let v = project(&x, store.get("kv.weight").unwrap(), d, d);
        let w = store.get("dwc.weight").unwrap().data();
        let b = store.get("dwc.bias").unwrap().data();
        let hd = d / heads;
        let r = (k / 2) as isize;
        for tok in 0..n {
            let (i, j) = ((tok / side) as isize, (tok % side) as isize);
            for ch in 0..d {
                let c = ch % hd;
                let mut acc = b[c];
                for di in -r..=r {
                    for dj in -r..=r {
                        let (ii, jj) = (i + di, j + dj);
                        if ii < 0 || jj < 0 || ii >= side as isize || jj >= side as isize {
                            continue;
                        }
                        let src = ii as usize * side + jj as usize;
                        let tap = ((di + r) as usize) * k + (dj + r) as usize;
                        acc += w[c * k * k + tap] * v[src * d + ch];
                    }
                }
                let diff = with.data()[tok * d + ch] - without.data()[tok * d + ch];
                assert!((diff - acc).abs() < 1e-12, "token {tok} channel {ch}");
            }
        }
    }

    #[test]
    fn non_square_token_count_needs_a_grid() {
        let cfg = AttentionConfig::linear(8, 2);
        let store = random_store(&cfg, 0);
        let mut g = Graph::<f64>::inference();
        let bound = store.bind(&mut g);
        let ap = AttentionParams::bind(&bound, "", &cfg).unwrap();
        let x = g.constant(Tensor::zeros([1, 6, 8]));
        assert!(linear_attention(&mut g, x, &ap, &cfg, None, LinearForm::Scaled).is_err());
        assert!(linear_attention(&mut g, x, &ap, &cfg, Some((2, 3)), LinearForm::Scaled).is_ok());
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(AttentionConfig::linear(10, 4).validate(), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_maps_are_row_stochastic() {
        let cfg = AttentionConfig::softmax(8, 2);
        let store = random_store(&cfg, 3);
        let mut g = Graph::<f64>::inference();
        let bound = store.bind(&mut g);
        let ap = AttentionParams::bind(&bound, "", &cfg).unwrap();
        let x = g.constant(init::randn(&[1, 4, 8], &mut ChaCha8Rng::seed_from_u64(4)));
        let maps = attention_maps(&mut g, x, &ap, &cfg).unwrap();
        assert_eq!(maps.shape(), &[1, 2, 4, 4]);
        for row in maps.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_similarity_extremes() {
        let same = Tensor::<f64>::from_f64([2, 2, 2], &[0.5, 0.5, 1.0, 0.0, 0.5, 0.5, 1.0, 0.0]).unwrap();
        assert!((head_similarity(&same).unwrap() - 1.0).abs() < 1e-12);
        let orth = Tensor::<f64>::from_f64([2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(head_similarity(&orth).unwrap(), 0.0);
        assert!(head_similarity(&Tensor::<f64>::zeros([1, 2, 2])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Linear attention weights are non-negative and sum below one, so
        /// each output channel stays inside the hull of zero and the values.
        #[test]
        fn linear_output_within_value_hull(seed in any::<u64>(), n in 1usize..10, heads in prop::sample::select(vec![1usize, 2, 4])) {
            let cfg = AttentionConfig::linear(8, heads).with_variant(AttentionVariant::LinearRelu);
            let mut store = random_store(&cfg, seed);
            *store.get_mut("proj.weight").unwrap() = identity(8);
            *store.get_mut("proj.bias").unwrap() = Tensor::zeros([8]);
            let x = init::randn::<f64, _>(&[1, n, 8], &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let v = project(&x, store.get("kv.weight").unwrap(), 8, 8);
            let y = run(&store, &cfg, &x, Some((1, n)), LinearForm::Factorized);
            for ch in 0..8 {
                let col = (0..n).map(|t| v[t * 8 + ch]);
                let lo = col.clone().fold(0.0f64, f64::min);
                let hi = col.fold(0.0f64, f64::max);
                for t in 0..n {
                    let o = y.data()[t * 8 + ch];
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }

        /// Permuting the tokens permutes the output when no DWC is present.
        #[test]
        fn linear_attention_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..8) {
            let cfg = AttentionConfig::linear(8, 2).with_variant(AttentionVariant::LinearRelu);
            let store = random_store(&cfg, seed);
            let x = init::randn::<f64, _>(&[1, n, 8], &mut ChaCha8Rng::seed_from_u64(seed ^ 2));
            let mut rev = Vec::with_capacity(n * 8);
            for t in (0..n).rev() {
                rev.extend_from_slice(&x.data()[t * 8..t * 8 + 8]);
            }
            let xr = Tensor::new([1, n, 8], rev).unwrap();
            let y = run(&store, &cfg, &x, Some((1, n)), LinearForm::Scaled);
            let yr = run(&store, &cfg, &xr, Some((1, n)), LinearForm::Scaled);
            for t in 0..n {
                for ch in 0..8 {
                    let a = y.data()[t * 8 + ch];
                    let b = yr.data()[(n - 1 - t) * 8 + ch];
                    prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
                }
            }
        }

        /// The focusing map preserves each row's norm.
        #[test]
        fn focused_map_preserves_row_norm(seed in any::<u64>(), p in 1u32..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = init::randn::<f64, _>(&[3, 6], &mut rng).map(|v| v.abs() + 1e-3);
            let mut g = Graph::<f64>::inference();
            let xv = g.constant(x.clone());
            let y = g.focused(xv, p).unwrap();
            for (a, b) in x.data().chunks(6).zip(g.value(y).data().chunks(6)) {
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((na - nb).abs() < 1e-12 * na.max(1.0));
            }
        }
    }
}
