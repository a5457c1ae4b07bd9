use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use lit_core::attention::{head_similarity, AttentionVariant};
use lit_core::backbone::{Dit, ModelConfig};
use lit_core::checks::gradient_suite;
use lit_core::complexity::{
    bench_latency, counted_attention_macs, gmacs_mhla, gmacs_mhsa, sweep_heads, to_gmacs, write_csv, BenchOptions,
    LayerGeometry,
};
use lit_core::convert::{inherit, InheritSpec};
use lit_core::diffusion::{item_rng, sample, SampleOptions, ScheduleConfig};
use lit_core::distill::DistillConfig;
use lit_core::pipeline_io::{
    load_checkpoint, read_json, save_checkpoint, save_image_grid, write_json, Checkpoint, ToyDataset,
};
use lit_core::tensor::{init, AdamWConfig, Tensor};
use lit_core::train::{default_grid, distill_grid, train, EvalConfig, Objective, Seeds, TrainConfig};
use lit_core::Scalar;

use crate::{Command, LayerArgs, Precision, SeedArgs, TimingArgs, TrainArgs, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn model_config(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let cfg: ModelConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    } else {
        ModelConfig::preset(spec).map_err(|e| usage(format!("{e}; pass a preset name or an existing JSON file")))
    }
}

fn load<T: Scalar>(path: &Path, what: &str) -> Result<Checkpoint<T>> {
    existing(path, what)?;
    load_checkpoint(path).with_context(|| format!("loading {what} {}", path.display()))
}

fn train_config(cfg: &ModelConfig, args: &TrainArgs, seeds: &SeedArgs) -> TrainConfig {
    let mut t = TrainConfig::desk(args.steps);
    t.batch_size = args.batch_size;
    t.optimizer = AdamWConfig {
        lr: args.lr,
        ..Default::default()
    };
    t.ema_decay = args.ema_decay;
    t.label_dropout = args.label_dropout;
    t.schedule = ScheduleConfig {
        num_timesteps: cfg.num_timesteps,
        ..Default::default()
    };
    t.dataset = ToyDataset::new(cfg.num_classes, cfg.image_size, cfg.in_channels, 1 << 20);
    t.seeds = Seeds {
        init: seeds.seed_init,
        data: seeds.seed_data,
        noise: seeds.seed_noise,
    };
    t.milestones = args.milestones.clone();
    t.out_dir = Some(args.out.clone());
    t
}

/// Everything that determines a run's outputs, written next to them.
#[derive(Serialize)]
struct RunSnapshot<'a> {
    command: &'a str,
    model_config: &'a ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distill: Option<&'a DistillConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inherit_spec: Option<&'a InheritSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    student_init: Option<&'a Path>,
    precision: &'a str,
}

fn snapshot(out: &Path, snap: &RunSnapshot<'_>) -> Result<()> {
    write_json(out.join("resolved_config.json"), snap)?;
    Ok(())
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeacher { config, train, seeds } => match train.precision {
            Precision::F32 => train_teacher::<f32>(&config, &train, &seeds),
            Precision::F64 => train_teacher::<f64>(&config, &train, &seeds),
        },
        Command::Convert {
            teacher,
            config,
            inherit_spec,
            seed_init,
            out,
        } => convert(&teacher, &config, inherit_spec.as_deref(), seed_init, &out),
        Command::TrainStudent {
            student,
            config,
            teacher,
            lambda1,
            lambda2,
            train,
            seeds,
        } => {
            let d = DistillConfig { lambda1, lambda2 };
            match train.precision {
                Precision::F32 => {
                    train_student::<f32>(student.as_deref(), &config, teacher.as_deref(), d, &train, &seeds)
                }
                Precision::F64 => {
                    train_student::<f64>(student.as_deref(), &config, teacher.as_deref(), d, &train, &seeds)
                }
            }
        }
        Command::DistillGrid {
            student,
            teacher,
            alt_teacher,
            eval_size,
            train,
            seeds,
        } => grid(&student, &teacher, alt_teacher.as_deref(), eval_size, &train, &seeds),
        Command::Sample {
            checkpoint,
            n,
            labels,
            cfg_scale,
            steps,
            seed_noise,
            ema,
            precision,
            out,
        } => {
            let opts = SampleOptions {
                cfg_scale,
                steps,
                seed: seed_noise,
            };
            match precision {
                Precision::F32 => sample_cmd::<f32>(&checkpoint, n, &labels, opts, ema, &out),
                Precision::F64 => sample_cmd::<f64>(&checkpoint, n, &labels, opts, ema, &out),
            }
        }
        Command::Bench {
            layer,
            heads,
            timing,
            out,
        } => {
            let geom = geometry(&layer, heads)?;
            let report = bench_latency(&geom, &bench_options(&timing))?;
            emit_csv(&[report], out.as_deref())
        }
        Command::SweepHeads {
            layer,
            heads_list,
            timing,
            out,
        } => {
            if heads_list.is_empty() {
                return Err(usage("--heads-list must name at least one head count"));
            }
            let geom = geometry(&layer, heads_list[0])?;
            for &h in &heads_list {
                if h == 0 || layer.dim % h != 0 {
                    return Err(usage(format!("head count {h} does not divide width {}", layer.dim)));
                }
            }
            let reports = sweep_heads(&geom, &heads_list, &bench_options(&timing))?;
            emit_csv(&reports, Some(&out))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Gmacs {
            tokens,
            dim,
            heads,
            kernel,
            count,
        } => gmacs(tokens, dim, heads, kernel, count),
        Command::Gradcheck { seed, precision } => {
            if precision != Precision::F64 {
                return Err(usage("gradient checks run in 64-bit only; use --precision f64"));
            }
            gradcheck(seed)
        }
        Command::HeadSimilarity {
            checkpoint,
            batch,
            timestep,
            seed_noise,
        } => head_sim(&checkpoint, batch, timestep, seed_noise),
    }
}

fn train_teacher<T: Scalar>(config: &str, args: &TrainArgs, seeds: &SeedArgs) -> Result<()> {
    let cfg = model_config(config)?;
    if cfg.attention != AttentionVariant::Softmax {
        return Err(usage("train-teacher needs a softmax-attention config"));
    }
    let tc = train_config(&cfg, args, seeds);
    snapshot(
        &args.out,
        &RunSnapshot {
            command: "train-teacher",
            model_config: &cfg,
            train: Some(&tc),
            distill: None,
            inherit_spec: None,
            teacher: None,
            student_init: None,
            precision: precision_name(args.precision),
        },
    )?;
    let model = Dit::<T>::new(cfg, seeds.seed_init)?;
    let outcome = train(model, Objective::Teacher, &tc)?;
    let path = args.out.join("final.ckpt");
    save_checkpoint(&outcome.checkpoint(), &path)?;
    if let (Some(first), Some(last)) = (outcome.records.first(), outcome.records.last()) {
        println!("step 1 loss {:.6}  step {} loss {:.6}", first.total, last.step, last.total);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn convert(teacher: &Path, config: &str, spec: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let t = load::<f32>(teacher, "teacher checkpoint")?;
    let student_cfg = model_config(config)?;
    let spec: InheritSpec = match spec {
        Some(p) => {
            existing(p, "inherit spec")?;
            read_json(p)?
        }
        None => InheritSpec::default(),
    };
    let ema = t.ema.as_ref().map(|e| &e.shadow);
    let (params, report) = inherit(&t.params, ema, &t.config, &student_cfg, &spec, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    snapshot(
        out,
        &RunSnapshot {
            command: "convert",
            model_config: &student_cfg,
            train: None,
            distill: None,
            inherit_spec: Some(&spec),
            teacher: Some(teacher),
            student_init: None,
            precision: "f32",
        },
    )?;
    let mut ck = Checkpoint::new(student_cfg, params);
    ck.metadata.insert("seed_init".into(), seed.into());
    save_checkpoint(&ck, out.join("student.ckpt"))?;
    write_json(out.join("conversion_report.json"), &report)?;
    println!(
        "copied {} segments, fresh {}, dropped {}",
        report.copied.len(),
        report.fresh.len(),
        report.dropped.len()
    );
    Ok(())
}

fn student_start<T: Scalar>(student: Option<&Path>, config: &str, seed: u64) -> Result<Dit<T>> {
    match student {
        Some(p) => {
            let ck = load::<T>(p, "student checkpoint")?;
            Ok(Dit::from_params(ck.config, ck.params)?)
        }
        None => Ok(Dit::new(model_config(config)?, seed)?),
    }
}

fn train_student<T: Scalar>(
    student: Option<&Path>,
    config: &str,
    teacher: Option<&Path>,
    distill: DistillConfig,
    args: &TrainArgs,
    seeds: &SeedArgs,
) -> Result<()> {
    distill.validate().map_err(|e| usage(e.to_string()))?;
    if distill.needs_teacher() && teacher.is_none() {
        return Err(usage("--teacher is required when lambda1 + lambda2 > 0"));
    }
    let model = student_start::<T>(student, config, seeds.seed_init)?;
    let teacher_model = match teacher {
        Some(p) => {
            let ck = load::<T>(p, "teacher checkpoint")?;
            let t = Dit::from_params(ck.config, ck.params)?;
            lit_core::distill::check_compatible(&t.config, &model.config)?;
            Some(t)
        }
        None => None,
    };
    let tc = train_config(&model.config, args, seeds);
    snapshot(
        &args.out,
        &RunSnapshot {
            command: "train-student",
            model_config: &model.config,
            train: Some(&tc),
            distill: Some(&distill),
            inherit_spec: None,
            teacher,
            student_init: student,
            precision: precision_name(args.precision),
        },
    )?;
    let outcome = train(
        model,
        Objective::Student {
            teacher: teacher_model.as_ref(),
            distill,
        },
        &tc,
    )?;
    let path = args.out.join("final.ckpt");
    save_checkpoint(&outcome.checkpoint(), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn grid(
    student: &Path,
    teacher: &Path,
    alt: Option<&Path>,
    eval_size: usize,
    args: &TrainArgs,
    seeds: &SeedArgs,
) -> Result<()> {
    let s = load::<f32>(student, "student checkpoint")?;
    let init = Dit::from_params(s.config, s.params)?;
    let t = load::<f32>(teacher, "teacher checkpoint")?;
    let main = Dit::from_params(t.config, t.params)?;
    let alt_model = match alt {
        Some(p) => {
            let a = load::<f32>(p, "alternate teacher checkpoint")?;
            Dit::from_params(a.config, a.params)?
        }
        None => main.clone(),
    };
    let tc = train_config(&init.config, args, seeds);
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    snapshot(
        &args.out,
        &RunSnapshot {
            command: "distill-grid",
            model_config: &init.config,
            train: Some(&tc),
            distill: None,
            inherit_spec: None,
            teacher: Some(teacher),
            student_init: Some(student),
            precision: "f32",
        },
    )?;
    let eval = EvalConfig {
        size: eval_size,
        ..Default::default()
    };
    let results = distill_grid(&init, &[&main, &alt_model], &default_grid(), &tc, &eval)?;
    let path = args.out.join("grid.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in &results {
        println!(
            "teacher {} lambda1 {:<5} lambda2 {:<5} eval L_simple {:.6}",
            r.teacher, r.lambda1, r.lambda2, r.eval_l_simple
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn sample_cmd<T: Scalar>(
    checkpoint: &Path,
    n: usize,
    labels: &[usize],
    opts: SampleOptions,
    use_ema: bool,
    out: &Path,
) -> Result<()> {
    let ck = load::<T>(checkpoint, "checkpoint")?;
    let cfg = ck.config.clone();
    let params = if use_ema {
        ck.ema.map(|e| e.shadow).ok_or_else(|| usage("checkpoint holds no EMA weights"))?
    } else {
        ck.params
    };
    let model = Dit::from_params(cfg.clone(), params)?;
    let y: Vec<usize> = if labels.is_empty() {
        (0..n).map(|i| i % cfg.num_classes).collect()
    } else {
        labels.to_vec()
    };
    if let Some(&bad) = y.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(usage(format!("label {bad} out of range for {} classes", cfg.num_classes)));
    }
    let schedule = ScheduleConfig {
        num_timesteps: cfg.num_timesteps,
        ..Default::default()
    }
    .build()?;
    let images: Tensor<T> = sample(
        &model,
        &schedule,
        &y,
        cfg.num_classes,
        [cfg.in_channels, cfg.image_size, cfg.image_size],
        opts,
    )?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_image_grid(&images, out)?;
    println!("wrote {} ({} images, labels {:?})", out.display(), y.len(), y);
    Ok(())
}

fn geometry(layer: &LayerArgs, heads: usize) -> Result<LayerGeometry> {
    let variant: AttentionVariant = layer.variant.parse().map_err(|e| usage(format!("{e}")))?;
    let geom = LayerGeometry {
        variant,
        tokens: layer.tokens,
        dim: layer.dim,
        heads,
        kernel: layer.kernel,
    };
    geom.attention_config().validate().map_err(|e| usage(e.to_string()))?;
    Ok(geom)
}

fn bench_options(t: &TimingArgs) -> BenchOptions {
    BenchOptions {
        batch: t.batch,
        trials: t.trials,
        warmup: t.warmup,
        seed: 0,
    }
}

fn emit_csv(reports: &[lit_core::complexity::CostReport], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(reports, f)?;
        }
        None => write_csv(reports, std::io::stdout().lock())?,
    }
    Ok(())
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn signed_grouped(n: i128) -> String {
    let body = grouped(n.unsigned_abs() as u64);
    if n < 0 {
        format!("-{body}")
    } else {
        body
    }
}

fn gmacs(n: u64, d: u64, h: u64, k: u64, count: bool) -> Result<()> {
    let sa = gmacs_mhsa(n, d);
    let la = gmacs_mhla(n, d, h, k).map_err(|e| usage(e.to_string()))?;
    println!("MHSA N={n} D={d}: {} MACs ({:.6} GMACs)", grouped(sa), to_gmacs(sa));
    println!("MHLA N={n} D={d} h={h} k={k}: {} MACs ({:.6} GMACs)", grouped(la), to_gmacs(la));
    if count {
        for (variant, analytic) in [
            (AttentionVariant::Softmax, sa),
            (AttentionVariant::LinearReluDwc, la),
        ] {
            let geom = LayerGeometry {
                variant,
                tokens: n as usize,
                dim: d as usize,
                heads: h as usize,
                kernel: k as usize,
            };
            let counted = counted_attention_macs(&geom)?;
            println!(
                "counted {}: {} MACs (formula {}, difference {})",
                variant.name(),
                grouped(counted),
                grouped(analytic),
                signed_grouped(counted as i128 - analytic as i128)
            );
        }
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let cases = gradient_suite(seed)?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        println!("{:<40} {:.3e}", c.name, c.max_rel_error);
        worst = worst.max(c.max_rel_error);
    }
    println!("max relative error {worst:.3e} over {} cases", cases.len());
    if !(worst < 1e-4) {
        bail!("gradient check failed: max relative error {worst:.3e} >= 1e-4");
    }
    Ok(())
}

fn head_sim(checkpoint: &Path, batch: usize, timestep: usize, seed: u64) -> Result<()> {
    let ck = load::<f32>(checkpoint, "checkpoint")?;
    let cfg = ck.config.clone();
    if cfg.heads < 2 {
        return Err(usage("head similarity needs at least two heads"));
    }
    if timestep >= cfg.num_timesteps {
        return Err(usage(format!("timestep must be below {}", cfg.num_timesteps)));
    }
    let model = Dit::from_params(cfg.clone(), ck.params)?;
    let data = ToyDataset::new(cfg.num_classes, cfg.image_size, cfg.in_channels, batch);
    let idx: Vec<usize> = (0..batch).collect();
    let (x0, y) = data.batch::<f32>(seed, &idx);
    let mut rng = item_rng(seed, usize::MAX);
    let noise = init::randn(x0.shape(), &mut rng);
    let schedule = ScheduleConfig {
        num_timesteps: cfg.num_timesteps,
        ..Default::default()
    }
    .build()?;
    let t = vec![timestep; batch];
    let x_t = schedule.q_sample(&x0, &t, &noise)?;
    let maps = model.attention_maps(&x_t, &t, &y)?;
    let mut all = Vec::new();
    for (layer, m) in maps.iter().enumerate() {
        let (h, n) = (m.shape()[1], m.shape()[2]);
        let per = h * n * n;
        let mut sum = 0.0;
        for b in 0..batch {
            let item = Tensor::new(vec![h, n, n], m.data()[b * per..(b + 1) * per].to_vec())?;
            sum += head_similarity(&item)?;
        }
        let mean = sum / batch as f64;
        all.push(mean);
        println!("layer {layer}: mean pairwise head cosine similarity {mean:.6}");
    }
    println!("overall {:.6}", all.iter().sum::<f64>() / all.len().max(1) as f64);
    Ok(())
}

