//! Training loops for teachers and distilled students, and the fixed-set
//! evaluation loss used to compare runs.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Denoiser, Dit};
use crate::convert::{ema_update, EmaState};
use crate::diffusion::{item_rng, l_simple, mse, vlb_term, DiffusionSchedule, ScheduleConfig};
use crate::distill::{hybrid_loss, Batch, DistillConfig};
use crate::error::{Error, Result};
use crate::pipeline_io::{save_checkpoint, training_log_append, Checkpoint, ToyDataset, TrainRecord};
use crate::scalar::Scalar;
use crate::tensor::{init, AdamW, AdamWConfig, Graph, Tensor};

/// Independent seeds for parameter init, data order and diffusion noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub noise: u64,
}

/// Fixed evaluation set: `size` items with stratified timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub size: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            size: 256,
            batch_size: 64,
            seed: 0xe7a1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    /// Probability of replacing a label by the null class.
    pub label_dropout: f64,
    pub schedule: ScheduleConfig,
    pub dataset: ToyDataset,
    pub seeds: Seeds,
    /// Steps after which a checkpoint is written (needs `out_dir`).
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale defaults for an 8×8 single-channel, 4-class problem.
    pub fn desk(steps: usize) -> Self {
        TrainConfig {
            steps,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ema_decay: 0.999,
            label_dropout: 0.1,
            schedule: ScheduleConfig::default(),
            dataset: ToyDataset::new(4, 8, 1, 1 << 20),
            seeds: Seeds::default(),
            milestones: Vec::new(),
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.dataset.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::Config("label dropout must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("EMA decay must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// What to optimize.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a, T: Scalar> {
    /// `L_simple` plus the variational term for a learned variance.
    Teacher,
    /// `L_simple + λ₁·L_noise + λ₂·L_var` against an optional frozen teacher.
    Student {
        teacher: Option<&'a Dit<T>>,
        distill: DistillConfig,
    },
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Dit<T>,
    pub ema: EmaState<T>,
    pub optimizer: AdamW<T>,
    pub records: Vec<TrainRecord>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.model.config.clone(),
            params: self.model.params.clone(),
            ema: Some(self.ema.clone()),
            optimizer: Some(self.optimizer.state.clone()),
            metadata: Default::default(),
        }
    }
}

/// The training batch for `step`: data from the data seed, timesteps, noise
/// and label dropout from the noise seed.
pub fn training_batch<T: Scalar>(cfg: &TrainConfig, num_timesteps: usize, step: usize) -> Batch<T> {
    let b = cfg.batch_size;
    let len = cfg.dataset.len.max(1);
    let mut order = item_rng(cfg.seeds.data, step);
    let indices: Vec<usize> = (0..b).map(|_| order.random_range(0..len)).collect();
    let (x0, mut y) = cfg.dataset.batch::<T>(cfg.seeds.data, &indices);
    let mut rng = item_rng(cfg.seeds.noise, step);
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..num_timesteps)).collect();
    for label in &mut y {
        if rng.random::<f64>() < cfg.label_dropout {
            *label = cfg.dataset.num_classes;
        }
    }
    let noise = init::randn(x0.shape(), &mut rng);
    Batch { x0, noise, t, y }
}

/// Optimizes `model` for `cfg.steps` steps. Aborts with a numeric fault on a
/// non-finite loss; checkpoints already written at milestones are kept.
pub fn train<T: Scalar>(model: Dit<T>, objective: Objective<'_, T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    if schedule.len() != model.config.num_timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model expects {}",
            schedule.len(),
            model.config.num_timesteps
        )));
    }
    if cfg.dataset.image_size != model.config.image_size
        || cfg.dataset.channels != model.config.in_channels
        || cfg.dataset.num_classes != model.config.num_classes
    {
        return Err(Error::Config("dataset geometry does not match the model".into()));
    }
    if let Objective::Student { teacher, distill } = &objective {
        distill.validate()?;
        if let Some(t) = teacher {
            crate::distill::check_compatible(&t.config, &model.config)?;
        }
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = model;
    let mut optimizer = AdamW::new(cfg.optimizer)?;
    let mut ema = EmaState::new(&model.params, cfg.ema_decay)?;
    let mut records = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    let outcome_at = |model: &Dit<T>, ema: &EmaState<T>, opt: &AdamW<T>, step: usize| -> Result<()> {
        if let Some(dir) = &cfg.out_dir {
            if cfg.milestones.contains(&step) {
                let mut ck = Checkpoint {
                    config: model.config.clone(),
                    params: model.params.clone(),
                    ema: Some(ema.clone()),
                    optimizer: Some(opt.state.clone()),
                    metadata: Default::default(),
                };
                ck.metadata.insert("step".into(), step.into());
                save_checkpoint(&ck, dir.join(format!("step_{step:07}.ckpt")))?;
            }
        }
        Ok(())
    };
    outcome_at(&model, &ema, &optimizer, 0)?;

    for step in 0..cfg.steps {
        let batch = training_batch::<T>(cfg, schedule.len(), step);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let (loss, mut record) = match objective {
            Objective::Teacher => teacher_loss(&mut g, &model, &bound, &batch, &schedule)?,
            Objective::Student { teacher, distill } => {
                let h = hybrid_loss(&mut g, &model, &bound, teacher, &batch, &schedule, &distill)?;
                let b = h.breakdown;
                (
                    h.total,
                    TrainRecord {
                        step: 0,
                        l_simple: b.l_simple,
                        l_noise: b.l_noise,
                        l_var: b.l_var,
                        total: b.total,
                        lr: 0.0,
                        wall_time: 0.0,
                    },
                )
            }
        };
        if !record.total.is_finite() {
            return Err(Error::NumericFault {
                stage: format!("loss at step {}", step + 1),
            });
        }
        g.backward(loss)?;
        model.params.zero_grad();
        model.params.accumulate_grads(&g, &bound)?;
        optimizer.step(&mut model.params)?;
        ema_update(&model.params, &mut ema)?;
        record.step = step as u64 + 1;
        record.lr = cfg.optimizer.lr;
        record.wall_time = start.elapsed().as_secs_f64();
        if let Some(dir) = &cfg.out_dir {
            training_log_append(dir.join("train_log.csv"), &record)?;
        }
        records.push(record);
        outcome_at(&model, &ema, &optimizer, step + 1)?;
    }
    model.params.zero_grad();
    for (_, t) in model.params.iter_mut() {
        t.grad = None;
    }
    Ok(TrainOutcome {
        model,
        ema,
        optimizer,
        records,
    })
}

fn teacher_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Dit<T>,
    bound: &crate::backbone::BoundParams,
    batch: &Batch<T>,
    schedule: &DiffusionSchedule,
) -> Result<(crate::tensor::Var, TrainRecord)> {
    let x_t = schedule.q_sample(&batch.x0, &batch.t, &batch.noise)?;
    let xv = g.constant(x_t.clone());
    let out = model.forward(g, bound, xv, &batch.t, &batch.y)?;
    let noise = g.constant(batch.noise.clone());
    let simple = l_simple(g, out.eps, noise)?;
    let mut total = simple;
    if let Some(v) = out.v {
        let vb = vlb_term(g, &batch.x0, &x_t, &batch.t, out.eps, v, schedule)?;
        total = g.add(total, vb)?;
    }
    let record = TrainRecord {
        step: 0,
        l_simple: g.value(simple).item()?.as_f64(),
        l_noise: None,
        l_var: None,
        total: g.value(total).item()?.as_f64(),
        lr: 0.0,
        wall_time: 0.0,
    };
    Ok((total, record))
}

/// Mean `L_simple` of `model` over a fixed evaluation set drawn from `data`.
/// Timesteps are stratified over `[0, T)`; labels are never dropped.
pub fn eval_loss<T: Scalar, M: Denoiser<T> + ?Sized>(
    model: &M,
    data: &ToyDataset,
    schedule: &DiffusionSchedule,
    cfg: &EvalConfig,
) -> Result<f64> {
    if cfg.size == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("evaluation set and batch must be non-empty".into()));
    }
    let total_t = schedule.len();
    let mut weighted = 0.0;
    let mut start = 0;
    while start < cfg.size {
        let n = cfg.batch_size.min(cfg.size - start);
        let items: Vec<usize> = (start..start + n).collect();
        let (x0, y) = data.batch::<T>(cfg.seed, &items);
        let per = x0.len() / n;
        let mut t = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(x0.len());
        for &i in &items {
            let mut rng = item_rng(cfg.seed ^ 0x5eed, i);
            let u: f64 = rng.random();
            t.push((((i as f64 + u) * total_t as f64 / cfg.size as f64) as usize).min(total_t - 1));
            noise.extend(init::randn::<T, _>(&[per], &mut rng).into_data());
        }
        let noise = Tensor::new(x0.shape().to_vec(), noise)?;
        let x_t = schedule.q_sample(&x0, &t, &noise)?;
        let pred = model.predict(&x_t, &t, &y)?;
        weighted += mse(&pred.eps, &noise)? * n as f64;
        start += n;
    }
    Ok(weighted / cfg.size as f64)
}

/// One cell of a distillation-weight grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub teacher: usize,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// The weight grid: noise weights {0, 0.05, 0.1, 0.5} with and without
/// variance weight 0.05 against the main teacher, plus (0.1, 0) against the
/// alternate teacher (index 1).
pub fn default_grid() -> Vec<GridCell> {
    let mut cells = vec![GridCell {
        teacher: 1,
        lambda1: 0.1,
        lambda2: 0.0,
    }];
    for lambda2 in [0.0, 0.05] {
        for lambda1 in [0.0, 0.05, 0.1, 0.5] {
            cells.push(GridCell {
                teacher: 0,
                lambda1,
                lambda2,
            });
        }
    }
    cells
}

/// Summary of one trained grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub teacher: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub final_total: f64,
    pub final_l_simple: f64,
    pub eval_l_simple: f64,
}

/// Trains one student per cell from the same initialization.
pub fn distill_grid<T: Scalar>(
    student_init: &Dit<T>,
    teachers: &[&Dit<T>],
    cells: &[GridCell],
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<GridResult>> {
    let schedule = cfg.schedule.build()?;
    cells
        .iter()
        .map(|cell| {
            let teacher = *teachers
                .get(cell.teacher)
                .ok_or_else(|| Error::Config(format!("grid cell needs teacher {}", cell.teacher)))?;
            let mut run_cfg = cfg.clone();
            run_cfg.out_dir = None;
            let out = train(
                student_init.clone(),
                Objective::Student {
                    teacher: Some(teacher),
                    distill: DistillConfig {
                        lambda1: cell.lambda1,
                        lambda2: cell.lambda2,
                    },
                },
                &run_cfg,
            )?;
            let last = out.records.last().copied().unwrap_or(TrainRecord {
                step: 0,
                l_simple: f64::NAN,
                l_noise: None,
                l_var: None,
                total: f64::NAN,
                lr: cfg.optimizer.lr,
                wall_time: 0.0,
            });
            Ok(GridResult {
                teacher: cell.teacher,
                lambda1: cell.lambda1,
                lambda2: cell.lambda2,
                final_total: last.total,
                final_l_simple: last.l_simple,
                eval_l_simple: eval_loss(&out.model, &cfg.dataset, &schedule, eval)?,
            })
        })
        .collect()
}
