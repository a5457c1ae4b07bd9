//! Closed-form attention MAC counts, an instrumented counter to check them
//! against, and a wall-clock latency harness.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_forward, linear_attention, softmax_attention, AttentionConfig, AttentionParams, AttentionVariant,
    LinearForm,
};
use crate::backbone::init_specs;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init, instrument, Graph, Tensor};

/// Softmax attention: `4ND² + 2N²D`. No head-count argument: the cost does
/// not depend on it.
pub fn gmacs_mhsa(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

/// Linear attention with DWC: `4ND² + ND + 3ND²/h + k²ND`. Requires `h | D`.
pub fn gmacs_mhla(n: u64, d: u64, h: u64, k: u64) -> Result<u64> {
    if h == 0 || d % h != 0 {
        return Err(Error::Config(format!("head count {h} must divide width {d}")));
    }
    Ok(4 * n * d * d + n * d + 3 * n * d * (d / h) + k * k * n * d)
}

/// MACs expressed in billions.
pub fn to_gmacs(macs: u64) -> f64 {
    macs as f64 / 1e9
}

/// Runs `f` with the MAC tally enabled and returns its result with the count.
pub fn count_macs<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, instrument::MacTally)> {
    if instrument::is_enabled() {
        return Err(Error::Contract("MAC instrumentation is already active".into()));
    }
    instrument::enable();
    let out = f();
    let tally = instrument::disable()?;
    Ok((out?, tally))
}

/// One attention layer geometry to measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub variant: AttentionVariant,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub kernel: usize,
}

impl LayerGeometry {
    pub fn attention_config(&self) -> AttentionConfig {
        let base = if self.variant.is_linear() {
            AttentionConfig::linear(self.dim, self.heads)
        } else {
            AttentionConfig::softmax(self.dim, self.heads)
        };
        let mut cfg = base.with_variant(self.variant);
        cfg.dwc_kernel = self.kernel;
        cfg
    }

    /// The closed-form count for this geometry. Linear variants use the DWC
    /// formula; only variants with a DWC branch match it term for term.
    pub fn analytic_macs(&self) -> Result<u64> {
        let (n, d, h, k) = (self.tokens as u64, self.dim as u64, self.heads as u64, self.kernel as u64);
        if self.variant.is_linear() {
            gmacs_mhla(n, d, h, k)
        } else {
            Ok(gmacs_mhsa(n, d))
        }
    }

    /// Token layout for the DWC branch: square when possible, else one row.
    pub fn grid(&self) -> (usize, usize) {
        let s = (self.tokens as f64).sqrt().round() as usize;
        if s * s == self.tokens {
            (s, s)
        } else {
            (1, self.tokens)
        }
    }
}

/// A layer instance ready to run: parameters and a fixed input.
struct Bench<T: Scalar> {
    cfg: AttentionConfig,
    params: crate::backbone::ParamStore<T>,
    x: Tensor<T>,
    grid: (usize, usize),
}

impl<T: Scalar> Bench<T> {
    fn new(geom: &LayerGeometry, batch: usize, seed: u64) -> Result<Self> {
        let cfg = geom.attention_config();
        cfg.validate()?;
        let params = init_specs(&cfg.param_specs(""), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let x = init::randn(&[batch, geom.tokens, geom.dim], &mut rng);
        Ok(Bench {
            cfg,
            params,
            x,
            grid: geom.grid(),
        })
    }

    fn run(&self, form: Option<LinearForm>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let p = AttentionParams::bind(&bound, "", &self.cfg)?;
        let x = g.constant(self.x.clone());
        let y = match form {
            Some(f) if self.cfg.variant.is_linear() => linear_attention(&mut g, x, &p, &self.cfg, Some(self.grid), f)?,
            Some(_) => softmax_attention(&mut g, x, &p, &self.cfg)?,
            None => attention_forward(&mut g, x, &p, &self.cfg, Some(self.grid))?,
        };
        Ok(g.value(y).clone())
    }
}

/// Counted MACs of one single-image attention forward (projections, core
/// products and DWC), linear variants in the factorized order.
pub fn counted_attention_macs(geom: &LayerGeometry) -> Result<u64> {
    let bench = Bench::<f32>::new(geom, 1, 0)?;
    let (_, tally) = count_macs(|| bench.run(Some(LinearForm::Factorized)))?;
    Ok(tally.total())
}

/// Wall-clock statistics in seconds; `std` is the population deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
}

impl LatencyStats {
    pub fn from_samples(s: &[f64]) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Config("at least one timed trial is required".into()));
        }
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(LatencyStats {
            mean,
            std: var.sqrt(),
            min: s.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub geometry: LayerGeometry,
    pub analytic_macs: u64,
    pub counted_macs: u64,
    pub latency: LatencyStats,
    pub trials: usize,
}

/// Timing options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub batch: usize,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            batch: 1,
            trials: 30,
            warmup: 1,
            seed: 0,
        }
    }
}

/// Times `trials` forwards of the layer as used in the backbone, after
/// `warmup` discarded runs.
pub fn bench_latency(geom: &LayerGeometry, opts: &BenchOptions) -> Result<CostReport> {
    if opts.trials == 0 || opts.warmup == 0 || opts.batch == 0 {
        return Err(Error::Config("batch, trials and warmup must all be at least 1".into()));
    }
    let analytic_macs = geom.analytic_macs()?;
    let counted_macs = counted_attention_macs(geom)?;
    let bench = Bench::<f32>::new(geom, opts.batch, opts.seed)?;
    for _ in 0..opts.warmup {
        std::hint::black_box(bench.run(None)?);
    }
    let mut samples = Vec::with_capacity(opts.trials);
    for _ in 0..opts.trials {
        let start = Instant::now();
        std::hint::black_box(bench.run(None)?);
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(CostReport {
        geometry: *geom,
        analytic_macs,
        counted_macs,
        latency: LatencyStats::from_samples(&samples)?,
        trials: opts.trials,
    })
}

/// One report per head count, sequentially.
pub fn sweep_heads(base: &LayerGeometry, heads: &[usize], opts: &BenchOptions) -> Result<Vec<CostReport>> {
    heads
        .iter()
        .map(|&h| bench_latency(&LayerGeometry { heads: h, ..*base }, opts))
        .collect()
}

pub const CSV_HEADER: [&str; 10] = [
    "variant",
    "N",
    "D",
    "h",
    "k",
    "analytic_macs",
    "counted_macs",
    "latency_mean_s",
    "latency_std_s",
    "trials",
];

pub fn write_csv<W: Write>(reports: &[CostReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        let g = &r.geometry;
        w.write_record([
            g.variant.name().to_string(),
            g.tokens.to_string(),
            g.dim.to_string(),
            g.heads.to_string(),
            g.kernel.to_string(),
            r.analytic_macs.to_string(),
            r.counted_macs.to_string(),
            format!("{:.9e}", r.latency.mean),
            format!("{:.9e}", r.latency.std),
            r.trials.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Largest `N` at which linear attention is not yet cheaper than softmax
/// attention; for every larger `N` it is strictly cheaper. Found by scanning.
pub fn crossover_tokens(d: u64, h: u64, k: u64) -> Result<u64> {
    let mut n = 1u64;
    loop {
        if gmacs_mhla(n, d, h, k)? < gmacs_mhsa(n, d) {
            return Ok(n - 1);
        }
        n += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_geometry() {
        assert_eq!(gmacs_mhsa(1, 1), 6);
        assert_eq!(gmacs_mhla(1, 1, 1, 1).unwrap(), 9);
    }

    #[test]
    fn reference_geometry() {
        // 4·256·384² = 150,994,944; 2·256²·384 = 50,331,648
        assert_eq!(gmacs_mhsa(256, 384), 150_994_944 + 50_331_648);
        // + 256·384 = 98,304; 3·256·384²/2 = 56,623,104; 25·256·384 = 2,457,600
        assert_eq!(
            gmacs_mhla(256, 384, 2, 5).unwrap(),
            150_994_944 + 98_304 + 56_623_104 + 2_457_600
        );
        assert!(gmacs_mhla(256, 384, 5, 5).is_err());
    }

    #[test]
    fn halving_heads_doubles_head_term() {
        let base = gmacs_mhla(64, 32, 4, 3).unwrap();
        let half = gmacs_mhla(64, 32, 2, 3).unwrap();
        assert_eq!(half - base, 3 * 64 * 32 * 32 / 4);
    }

    #[test]
    fn single_trial_has_zero_spread() {
        let s = LatencyStats::from_samples(&[0.25]).unwrap();
        assert_eq!((s.mean, s.std, s.min), (0.25, 0.0, 0.25));
    }

    #[test]
    fn crossover_matches_closed_form() {
        // linear is cheaper exactly when 2N > 1 + 3D/h + k²
        for (d, h, k) in [(8u64, 2u64, 3u64), (384, 2, 5), (32, 4, 5), (384, 6, 3)] {
            let n_star = crossover_tokens(d, h, k).unwrap();
            assert_eq!(n_star, (1 + 3 * d / h + k * k) / 2);
        }
    }

    #[test]
    fn count_macs_requires_clean_state() {
        instrument::enable();
        assert!(count_macs(|| Ok(())).is_err());
        instrument::disable().unwrap();
        let (_, t) = count_macs(|| Ok(())).unwrap();
        assert_eq!(t.total(), 0);
    }

    #[test]
    fn counter_matches_softmax_formula() {
        for (n, d, h) in [(16usize, 8usize, 2usize), (4, 32, 4), (9, 16, 1)] {
            let g = LayerGeometry { variant: AttentionVariant::Softmax, tokens: n, dim: d, heads: h, kernel: 5 };
            assert_eq!(counted_attention_macs(&g).unwrap(), gmacs_mhsa(n as u64, d as u64));
        }
    }

    #[test]
    fn linear_counter_has_two_head_products() {
        // φ(K)ᵀV and φ(Q)(φ(K)ᵀV) are the only d×d-sized products per head
        let (n, d, h, k) = (16u64, 8u64, 2u64, 3u64);
        let g = LayerGeometry {
            variant: AttentionVariant::LinearReluDwc,
            tokens: n as usize,
            dim: d as usize,
            heads: h as usize,
            kernel: k as usize,
        };
        let counted = counted_attention_macs(&g).unwrap();
        assert_eq!(counted, 4 * n * d * d + n * d + 2 * n * d * d / h + k * k * n * d);
        assert_eq!(gmacs_mhla(n, d, h, k).unwrap() - counted, n * d * d / h);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn more_heads_never_cost_more(n in 1u64..2048, d in 1u64..512, k in prop::sample::select(vec![1u64, 3, 5, 7])) {
            let heads: Vec<u64> = (1..=d).filter(|h| d % h == 0).collect();
            for w in heads.windows(2) {
                let a = gmacs_mhla(n, d, w[0], k).unwrap();
                let b = gmacs_mhla(n, d, w[1], k).unwrap();
                prop_assert!(b < a);
            }
        }

        #[test]
        fn crossover_splits_the_token_axis(d in 1u64..256, k in prop::sample::select(vec![1u64, 3, 5])) {
            let h = 1;
            let n_star = crossover_tokens(d, h, k).unwrap();
            for n in [n_star.saturating_sub(1).max(1), n_star.max(1)] {
                prop_assert!(gmacs_mhla(n, d, h, k).unwrap() >= gmacs_mhsa(n, d));
            }
            prop_assert!(gmacs_mhla(n_star + 1, d, h, k).unwrap() < gmacs_mhsa(n_star + 1, d));
        }
    }
}
