//! Data-free knowledge transfer: black-box teachers, pseudo-dataset
//! reconstruction, and student distillation.
//!
//! A teacher is reachable only through [`Teacher::answer`]. A student sends a
//! query, the teacher returns its Top-1 class (and optionally its k-hot RRF
//! ranking), and the student keeps the `(query, answer)` pair as a pseudo
//! training sample.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DfrdError, Result};
use crate::mlp::{train, LabeledSample, MlpModel, SoftSample, TrainConfig};
use crate::rrf::{onehot_from_rrf, top_k, OneHotLabel, RrfVector};
use crate::samplers::{build_query_set, Query, QuerySet, SamplerSpec};
use crate::seed;

/// A teacher's reply to one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub label: OneHotLabel,
    pub soft: Option<RrfVector>,
}

/// Opaque answer function. Implementations must be deterministic for a fixed
/// underlying model and expose nothing but answers.
pub trait Teacher: Send + Sync {
    fn id(&self) -> &str;
    fn answer(&self, query: &Query) -> Result<Answer>;
}

/// Teacher pipeline: dense input, softmax, rank, k-hot RRF, then Top-1.
pub fn blackbox_answer(model: &MlpModel, query: &Query, k: usize) -> Result<(OneHotLabel, RrfVector)> {
    if query.dim() != model.in_dim() {
        return Err(DfrdError::invalid(format!(
            "query dim {} does not match teacher input dim {}",
            query.dim(),
            model.in_dim()
        )));
    }
    let probs = model.forward_slice(query.to_input().as_slice())?;
    let soft = top_k(probs.as_slice(), k);
    Ok((onehot_from_rrf(&soft)?, soft))
}

/// In-process teacher wrapping an MLP.
pub struct LocalTeacher {
    id: String,
    model: Arc<MlpModel>,
    k: usize,
    calls: AtomicU64,
}

impl LocalTeacher {
    pub fn new(id: impl Into<String>, model: Arc<MlpModel>, k: usize) -> Self {
        LocalTeacher {
            id: id.into(),
            model,
            k,
            calls: AtomicU64::new(0),
        }
    }

    /// Number of answer calls served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Teacher for LocalTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn answer(&self, query: &Query) -> Result<Answer> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (label, soft) = blackbox_answer(&self.model, query, self.k)?;
        Ok(Answer {
            label,
            soft: Some(soft),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub x: Query,
    pub y: OneHotLabel,
    pub soft_y: Option<RrfVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDataset {
    pub samples: Vec<PseudoSample>,
    pub source_teacher: String,
    pub sampler_spec: SamplerSpec,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The query inputs, e.g. to serve as a later oracle pool.
    pub fn inputs(&self) -> impl Iterator<Item = &Query> {
        self.samples.iter().map(|s| &s.x)
    }

    /// Newline-delimited JSON, one record per sample:
    /// `{"x":[indices best-first],"y":label}` with `"soft"` appended when
    /// present. Dense-noise queries are written as `{"dense":[...],"y":label}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.samples {
            let rec = match &s.x {
                Query::Rrf(v) => PseudoRecord {
                    x: Some(v.entries().to_vec()),
                    dense: None,
                    y: s.y.0,
                    soft: s.soft_y.as_ref().map(|v| v.entries().to_vec()),
                },
                Query::Dense(v) => PseudoRecord {
                    x: None,
                    dense: Some(v.as_slice().to_vec()),
                    y: s.y.0,
                    soft: s.soft_y.as_ref().map(|v| v.entries().to_vec()),
                },
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PseudoRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    x: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dense: Option<Vec<f64>>,
    y: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    soft: Option<Vec<u32>>,
}

/// Asks `teacher` every query once, in order.
pub fn reconstruct_dataset(
    teacher: &dyn Teacher,
    queries: &QuerySet,
    sampler_spec: &SamplerSpec,
) -> Result<PseudoDataset> {
    if queries.is_empty() {
        return Err(DfrdError::invalid("empty query set"));
    }
    let samples = queries
        .queries
        .iter()
        .enumerate()
        .map(|(seq, q)| {
            let a = teacher.answer(q).map_err(|e| match e {
                DfrdError::Transfer { reason, .. } => DfrdError::Transfer {
                    seq: seq as u64,
                    reason,
                },
                other => DfrdError::Transfer {
                    seq: seq as u64,
                    reason: other.to_string(),
                },
            })?;
            Ok(PseudoSample {
                x: q.clone(),
                y: a.label,
                soft_y: a.soft,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoDataset {
        samples,
        source_teacher: teacher.id().to_string(),
        sampler_spec: sampler_spec.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Cross-entropy on the 1-hot answers.
    #[default]
    Hard,
    /// Cross-entropy on normalized reciprocal-rank targets.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One training pass over the union of all encounters.
    #[default]
    Pooled,
    /// One training pass per encounter, in encounter order.
    Sequential,
}

/// Soft target over `n_classes`: RRF values `1/p` scaled to sum to one.
pub fn soft_target(v: &RrfVector, n_classes: usize) -> Result<Vec<f64>> {
    if v.dim() != n_classes {
        return Err(DfrdError::invalid(format!(
            "soft answer dim {} does not match {} classes",
            v.dim(),
            n_classes
        )));
    }
    let total: f64 = v.weighted().map(|(_, w)| w).sum();
    let mut q = vec![0.0; n_classes];
    for (i, w) in v.weighted() {
        q[i] = w / total;
    }
    Ok(q)
}

/// Trains `student` on the concatenation of `data`.
pub fn distill(
    student: &MlpModel,
    data: &[PseudoDataset],
    tc: &TrainConfig,
    mode: DistillMode,
) -> Result<(MlpModel, Vec<f64>)> {
    let pooled = data.iter().flat_map(|d| d.samples.iter());
    match mode {
        DistillMode::Hard => {
            let samples: Vec<LabeledSample> = pooled
                .map(|s| LabeledSample {
                    input: s.x.to_input(),
                    label: s.y,
                })
                .collect();
            if samples.is_empty() {
                return Err(DfrdError::invalid("no pseudo-samples to distill"));
            }
            train(student, &samples, tc)
        }
        DistillMode::Soft => {
            let samples = pooled
                .map(|s| {
                    let soft = s.soft_y.as_ref().ok_or_else(|| {
                        DfrdError::invalid("soft distillation needs soft answers")
                    })?;
                    Ok(SoftSample {
                        input: s.x.to_input(),
                        target: soft_target(soft, student.out_dim())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if samples.is_empty() {
                return Err(DfrdError::invalid("no pseudo-samples to distill"));
            }
            train(student, &samples, tc)
        }
    }
}

/// One teacher met during a session, with the pool its oracle queries are
/// drawn from.
pub struct Encounter<'a> {
    pub teacher: &'a dyn Teacher,
    pub oracle_pool: &'a [Query],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    /// `100·m` oracle queries per teacher.
    pub base_count: usize,
    pub k: usize,
    pub mode: DistillMode,
    pub schedule: Schedule,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            base_count: 1000,
            k: crate::rrf::DEFAULT_K,
            mode: DistillMode::Hard,
            schedule: Schedule::Pooled,
        }
    }
}

pub struct KtOutcome {
    pub student: MlpModel,
    /// Reconstructed datasets in training order.
    pub datasets: Vec<PseudoDataset>,
    pub loss_trace: Vec<f64>,
}

impl KtOutcome {
    /// Every query the student trained on, in training order.
    pub fn training_inputs(&self) -> Vec<Query> {
        self.datasets
            .iter()
            .flat_map(|d| d.inputs().cloned())
            .collect()
    }
}

/// Queries every teacher, then distills the student. Each teacher's query
/// stream is seeded from `spec.seed` and the teacher id, and pooled training
/// concatenates datasets sorted by teacher id, so the result does not depend
/// on encounter order.
pub fn kt_session(
    student: &MlpModel,
    encounters: &[Encounter<'_>],
    spec: &SamplerSpec,
    tc: &TrainConfig,
    opts: &SessionOptions,
) -> Result<KtOutcome> {
    if encounters.is_empty() {
        return Err(DfrdError::invalid("a session needs at least one teacher"));
    }
    let mut datasets = encounters
        .iter()
        .map(|e| {
            let teacher_spec = spec.with_seed(seed::derive(spec.seed, &[seed::str_tag(e.teacher.id())]));
            let queries = build_query_set(
                e.oracle_pool,
                &teacher_spec,
                opts.base_count,
                student.in_dim(),
                opts.k,
            )?;
            reconstruct_dataset(e.teacher, &queries, &teacher_spec)
        })
        .collect::<Result<Vec<_>>>()?;

    match opts.schedule {
        Schedule::Pooled => {
            datasets.sort_by(|a, b| a.source_teacher.cmp(&b.source_teacher));
            let (student, loss_trace) = distill(student, &datasets, tc, opts.mode)?;
            Ok(KtOutcome {
                student,
                datasets,
                loss_trace,
            })
        }
        Schedule::Sequential => {
            let mut current = student.clone();
            let mut loss_trace = Vec::new();
            for d in &datasets {
                let (next, trace) = distill(&current, std::slice::from_ref(d), tc, opts.mode)?;
                current = next;
                loss_trace.extend(trace);
            }
            Ok(KtOutcome {
                student: current,
                datasets,
                loss_trace,
            })
        }
    }
}
