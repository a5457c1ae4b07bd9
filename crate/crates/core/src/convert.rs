//! Weight inheritance from a softmax teacher into a linear-attention student,
//! and the exponential moving average of parameters.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::QkvLayout;
use crate::backbone::{init_params, param_specs, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which teacher weights to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    #[default]
    Raw,
    Ema,
}

/// One attention projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    fn tag(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

/// What to copy from the teacher. The default loads everything except the
/// attention projections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InheritSpec {
    #[serde(default)]
    pub source: WeightSource,
    #[serde(default)]
    pub attention_subset: BTreeSet<Projection>,
    #[serde(default = "yes")]
    pub load_ffn: bool,
    #[serde(default = "yes")]
    pub load_modulation: bool,
    #[serde(default = "yes")]
    pub load_embeddings_and_final: bool,
}

fn yes() -> bool {
    true
}

impl Default for InheritSpec {
    fn default() -> Self {
        InheritSpec {
            source: WeightSource::Raw,
            attention_subset: BTreeSet::new(),
            load_ffn: true,
            load_modulation: true,
            load_embeddings_and_final: true,
        }
    }
}

impl InheritSpec {
    /// Copies nothing: a randomly initialized student.
    pub fn none() -> Self {
        InheritSpec {
            load_ffn: false,
            load_modulation: false,
            load_embeddings_and_final: false,
            ..Default::default()
        }
    }

    /// Copies every teacher tensor the student can hold.
    pub fn all() -> Self {
        InheritSpec {
            attention_subset: Projection::ALL.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn with_attention(mut self, subset: &[Projection]) -> Self {
        self.attention_subset = subset.iter().copied().collect();
        self
    }
}

/// A column range along the last axis of a stored tensor; `None` means the
/// whole tensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub path: String,
    pub columns: Option<(usize, usize)>,
}

impl Segment {
    fn whole(path: impl Into<String>) -> Self {
        Segment {
            path: path.into(),
            columns: None,
        }
    }

    fn cols(path: impl Into<String>, start: usize, len: usize) -> Self {
        Segment {
            path: path.into(),
            columns: Some((start, len)),
        }
    }

    /// Values of this segment in `store`.
    pub fn read<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let t = store.require(&self.path)?;
        match self.columns {
            None => Ok(t.clone()),
            Some((s, l)) => crate::tensor::kernels::slice_axis(t, t.rank() - 1, s, l),
        }
    }

    fn write<T: Scalar>(&self, store: &mut ParamStore<T>, value: &Tensor<T>) -> Result<()> {
        let path = self.path.clone();
        let t = store.get_mut(&path).ok_or_else(|| Error::Structural {
            message: format!("missing student parameter {path}"),
            paths: vec![path.clone()],
        })?;
        let (s, l) = self.columns.unwrap_or((0, *t.shape().last().unwrap_or(&1)));
        let width = *t.shape().last().unwrap_or(&1);
        let rows = t.len() / width;
        if value.len() != rows * l {
            return Err(Error::Structural {
                message: format!("segment {self} holds {} values, source has {}", rows * l, value.len()),
                paths: vec![path],
            });
        }
        let dst = t.data_mut();
        for r in 0..rows {
            dst[r * width + s..r * width + s + l].copy_from_slice(&value.data()[r * l..(r + 1) * l]);
        }
        Ok(())
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.columns {
            None => write!(f, "{}", self.path),
            Some((s, l)) => write!(f, "{}[{}..{}]", self.path, s, s + l),
        }
    }
}

/// Where one projection's weight (and bias) live for a given layout.
fn projection_segments(prefix: &str, layout: QkvLayout, dim: usize, p: Projection, bias: bool) -> Vec<Segment> {
    let (name, start) = match (layout, p) {
        (_, Projection::O) => ("proj", None),
        (QkvLayout::Fused, _) => (
            "qkv",
            Some(match p {
                Projection::Q => 0,
                Projection::K => dim,
                _ => 2 * dim,
            }),
        ),
        (QkvLayout::QKv, Projection::Q) => ("q", None),
        (QkvLayout::QKv, Projection::K) => ("kv", Some(0)),
        (QkvLayout::QKv, _) => ("kv", Some(dim)),
        (QkvLayout::Separate, _) => (p.tag(), None),
    };
    let mk = |suffix: &str| {
        let path = format!("{prefix}{name}.{suffix}");
        match start {
            Some(s) => Segment::cols(path, s, dim),
            None => Segment::whole(path),
        }
    };
    let mut v = vec![mk("weight")];
    if bias || p == Projection::O {
        v.push(mk("bias"));
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Embedding,
    Modulation,
    Ffn,
    Attention(Projection),
    Dwc,
}

/// Every segment of a model, tagged with its group.
fn segments(cfg: &ModelConfig) -> Vec<(Group, Segment)> {
    let attn = cfg.attention_config();
    let mut out = Vec::new();
    for spec in param_specs(cfg) {
        let path = spec.path.as_str();
        let group = if let Some(rest) = path.strip_prefix("blocks.") {
            let rest = rest.split_once('.').map(|x| x.1).unwrap_or("");
            if rest.starts_with("adaln.") {
                Group::Modulation
            } else if rest.starts_with("mlp.") {
                Group::Ffn
            } else if rest.starts_with("attn.dwc.") {
                Group::Dwc
            } else {
                continue;
            }
        } else {
            Group::Embedding
        };
        out.push((group, Segment::whole(path)));
    }
    for i in 0..cfg.depth {
        let prefix = format!("blocks.{i}.attn.");
        for p in Projection::ALL {
            for s in projection_segments(&prefix, attn.qkv_layout, cfg.hidden, p, attn.qkv_bias) {
                out.push((Group::Attention(p), s));
            }
        }
    }
    out
}

/// A copied segment and its teacher origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopiedSegment {
    pub student: Segment,
    pub teacher: Segment,
}

/// What a conversion did, segment by segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub spec: InheritSpec,
    pub seed: u64,
    pub teacher_layout: QkvLayout,
    pub student_layout: QkvLayout,
    pub copied: Vec<CopiedSegment>,
    pub fresh: Vec<Segment>,
    /// Teacher segments with no counterpart in the student.
    pub dropped: Vec<Segment>,
}

impl ConversionReport {
    /// Whether copied and fresh segments partition `cfg`'s segments exactly.
    pub fn is_partition_of(&self, cfg: &ModelConfig) -> bool {
        let all: Vec<Segment> = segments(cfg).into_iter().map(|x| x.1).collect();
        let mut seen: Vec<&Segment> = self.copied.iter().map(|c| &c.student).chain(&self.fresh).collect();
        seen.sort();
        let n = seen.len();
        seen.dedup();
        let mut want: Vec<&Segment> = all.iter().collect();
        want.sort();
        n == seen.len() && seen == want
    }

    pub fn copied_paths(&self) -> BTreeSet<String> {
        self.copied.iter().map(|c| c.student.path.clone()).collect()
    }
}

fn check_geometry(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    let pairs = [
        ("depth", teacher.depth, student.depth),
        ("hidden", teacher.hidden, student.hidden),
        ("patch", teacher.patch, student.patch),
        ("in_channels", teacher.in_channels, student.in_channels),
        ("image_size", teacher.image_size, student.image_size),
    ];
    let bad: Vec<String> = pairs
        .iter()
        .filter(|(_, a, b)| a != b)
        .map(|(n, a, b)| format!("{n}: teacher {a}, student {b}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Structural {
            message: format!("teacher and student geometry differ ({})", bad.join("; ")),
            paths: Vec::new(),
        })
    }
}

/// Builds a student from `student_cfg`: every segment is freshly initialized
/// from `seed`, then the groups named in `spec` are overwritten with teacher
/// values. Head counts may differ; projections are `D×D` either way. Layout
/// differences are reconciled by column slicing.
pub fn inherit<T: Scalar>(
    teacher: &ParamStore<T>,
    teacher_ema: Option<&ParamStore<T>>,
    teacher_cfg: &ModelConfig,
    student_cfg: &ModelConfig,
    spec: &InheritSpec,
    seed: u64,
) -> Result<(ParamStore<T>, ConversionReport)> {
    check_geometry(teacher_cfg, student_cfg)?;
    let source = match spec.source {
        WeightSource::Raw => teacher,
        WeightSource::Ema => {
            teacher_ema.ok_or_else(|| Error::Config("EMA source requested but teacher has no EMA weights".into()))?
        }
    };
    let mut student = init_params::<T>(student_cfg, seed)?;
    let s_attn = student_cfg.attention_config();
    let t_attn = teacher_cfg.attention_config();
    let wanted = |g: Group| match g {
        Group::Embedding => spec.load_embeddings_and_final,
        Group::Modulation => spec.load_modulation,
        Group::Ffn => spec.load_ffn,
        Group::Attention(p) => spec.attention_subset.contains(&p),
        Group::Dwc => false,
    };

    let mut copied = Vec::new();
    let mut fresh = Vec::new();
    let mut used: BTreeSet<Segment> = BTreeSet::new();
    for (group, seg) in segments(student_cfg) {
        let origin = match group {
            Group::Attention(p) => {
                let block = &seg.path[..seg.path.find(".attn.").map(|i| i + 6).unwrap_or(0)];
                let is_bias = seg.path.ends_with(".bias");
                let tsegs = projection_segments(block, t_attn.qkv_layout, teacher_cfg.hidden, p, t_attn.qkv_bias);
                tsegs.into_iter().find(|t| t.path.ends_with(".bias") == is_bias)
            }
            Group::Dwc => None,
            _ => Some(seg.clone()),
        };
        match origin {
            Some(t) if wanted(group) && source.contains(&t.path) => {
                let value = t.read(source)?;
                let target_len = seg.read(&student)?.shape().to_vec();
                if value.shape() != target_len.as_slice() {
                    return Err(Error::Structural {
                        message: format!(
                            "teacher {t} has shape {:?}, student {seg} needs {:?}",
                            value.shape(),
                            target_len
                        ),
                        paths: vec![seg.path.clone()],
                    });
                }
                seg.write(&mut student, &value)?;
                used.insert(t.clone());
                copied.push(CopiedSegment { student: seg, teacher: t });
            }
            _ => fresh.push(seg),
        }
    }
    let dropped = segments(teacher_cfg)
        .into_iter()
        .map(|x| x.1)
        .filter(|s| !used.contains(s))
        .collect();
    let report = ConversionReport {
        spec: spec.clone(),
        seed,
        teacher_layout: t_attn.qkv_layout,
        student_layout: s_attn.qkv_layout,
        copied,
        fresh,
        dropped,
    };
    Ok((student, report))
}

/// Shadow parameters tracking `decay·shadow + (1 − decay)·live`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub shadow: ParamStore<T>,
    pub decay: f64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(live: &ParamStore<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        let mut shadow = live.clone();
        for (_, t) in shadow.iter_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
        Ok(EmaState { shadow, decay })
    }
}

pub fn ema_update<T: Scalar>(live: &ParamStore<T>, ema: &mut EmaState<T>) -> Result<()> {
    let missing: Vec<String> = live
        .paths()
        .filter(|p| !ema.shadow.contains(p))
        .chain(ema.shadow.paths().filter(|p| !live.contains(p)))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Structural {
            message: "EMA shadow and live parameters differ".into(),
            paths: missing,
        });
    }
    let d = T::lit(ema.decay);
    let nd = T::lit(1.0 - ema.decay);
    for (path, s) in ema.shadow.iter_mut() {
        let l = live.require(path)?;
        if l.shape() != s.shape() {
            return Err(Error::Structural {
                message: format!("EMA shape {:?} vs live {:?}", s.shape(), l.shape()),
                paths: vec![path.clone()],
            });
        }
        for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
            *a = d * *a + nd * b;
        }
    }
    Ok(())
}
