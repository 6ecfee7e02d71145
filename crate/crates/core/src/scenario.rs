//! Synthetic cross-season workload and the recursive generation loop.
//!
//! Place observations are generated in score space and then RRF-encoded:
//! class `c` in season `s` has mean scores `prototype[c] + drift[c][s]`, and
//! each observation adds isotropic Gaussian noise before ranking. Each
//! generation trains a supervised teacher on a random subset of the place
//! classes, distills a fresh student from the available teachers, and hands
//! the student on as the next generation's second teacher.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DfrdError, Result};
use crate::kt::{kt_session, DistillMode, Encounter, LocalTeacher, Schedule, SessionOptions, Teacher};
use crate::mlp::{init_mlp, train, LabeledDataset, LabeledSample, MlpConfig, MlpModel, TrainConfig};
use crate::rrf::{rrf_to_dense, top_k, OneHotLabel, RrfVector, DEFAULT_K};
use crate::samplers::{Query, SamplerSpec};
use crate::seed;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub n_seasons: usize,
    pub signal_strength: f64,
    pub drift_scale: f64,
    pub noise_scale: f64,
    pub samples_per_class_per_season: usize,
    pub experience_prob: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_classes: 100,
            n_seasons: 10,
            signal_strength: 3.0,
            drift_scale: 0.5,
            noise_scale: 1.0,
            samples_per_class_per_season: 20,
            experience_prob: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DfrdError::InvalidConfig(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.n_seasons < 1 {
            return bad("n_seasons must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.experience_prob) {
            return bad("experience_prob must lie in [0, 1]");
        }
        if self.signal_strength < 0.0 || self.drift_scale < 0.0 || self.noise_scale < 0.0 {
            return bad("signal, drift and noise scales must be >= 0");
        }
        if self.samples_per_class_per_season < 2 {
            return bad("samples_per_class_per_season must be >= 2");
        }
        Ok(())
    }

    /// Per-class `(train, test)` draw counts: the first 75% of draws train.
    pub fn split_counts(&self) -> (usize, usize) {
        let n = self.samples_per_class_per_season;
        let train = n * 3 / 4;
        (train, n - train)
    }
}

/// Full experiment configuration, stored as a versioned JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub config_version: u32,
    pub world: WorldConfig,
    pub sampler: SamplerSpec,
    /// Student distillation.
    pub train: TrainConfig,
    /// Supervised training of each generation's fresh teacher.
    pub teacher_train: TrainConfig,
    pub hidden_dims: Vec<usize>,
    pub k: usize,
    /// Oracle queries per teacher per encounter (`100·m`).
    pub base_count: usize,
    pub distill_mode: DistillMode,
    pub schedule: Schedule,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            config_version: CONFIG_VERSION,
            world: WorldConfig::default(),
            sampler: SamplerSpec::default(),
            train: TrainConfig {
                step_size: 0.1,
                max_updates: Some(2000),
                ..TrainConfig::default()
            },
            teacher_train: TrainConfig {
                epochs: 200,
                step_size: 0.1,
                ..TrainConfig::default()
            },
            hidden_dims: vec![256],
            k: DEFAULT_K,
            base_count: 1000,
            distill_mode: DistillMode::Hard,
            schedule: Schedule::Pooled,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(DfrdError::InvalidConfig(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.world.validate()?;
        self.train.validate()?;
        self.teacher_train.validate()?;
        if self.k == 0 {
            return Err(DfrdError::InvalidConfig("k must be >= 1".into()));
        }
        if self.base_count == 0 || !self.base_count.is_multiple_of(100) {
            return Err(DfrdError::InvalidConfig(
                "base_count must be a positive multiple of 100".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn mlp_config(&self, seed: u64) -> MlpConfig {
        MlpConfig::new(
            self.world.n_classes,
            self.hidden_dims.clone(),
            self.world.n_classes,
            seed,
        )
    }

    pub fn session_options(&self) -> SessionOptions {
        SessionOptions {
            base_count: self.base_count,
            k: self.k,
            mode: self.distill_mode,
            schedule: self.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// `C x C`.
    pub prototypes: Vec<Vec<f64>>,
    /// `C x S x C`.
    pub drift: Vec<Vec<Vec<f64>>>,
}

mod tag {
    pub const WORLD: u64 = 1;
    pub const SEASON: u64 = 2;
    pub const EXPERIENCE: u64 = 3;
    pub const TEACHER_INIT: u64 = 4;
    pub const TEACHER_SHUFFLE: u64 = 5;
    pub const STUDENT_INIT: u64 = 6;
    pub const STUDENT_SHUFFLE: u64 = 7;
    pub const SAMPLER: u64 = 8;
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Prototype of class `c` is `α·e_c` plus N(0, 0.1²) jitter; drifts are
/// N(0, σ_d²) per (class, season, coordinate).
pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let c_n = cfg.n_classes;
    let mut rng = seed::rng_for(cfg.seed, &[tag::WORLD]);
    let prototypes = (0..c_n)
        .map(|c| {
            (0..c_n)
                .map(|j| {
                    let base = if j == c { cfg.signal_strength } else { 0.0 };
                    base + 0.1 * normal(&mut rng)
                })
                .collect()
        })
        .collect();
    let drift = (0..c_n)
        .map(|_| {
            (0..cfg.n_seasons)
                .map(|_| (0..c_n).map(|_| cfg.drift_scale * normal(&mut rng)).collect())
                .collect()
        })
        .collect();
    Ok(World {
        config: cfg.clone(),
        prototypes,
        drift,
    })
}

/// One observation of class `c` in season `s` (both 0-based), RRF-encoded.
pub fn synth_observation<R: Rng + ?Sized>(
    world: &World,
    c: usize,
    s: usize,
    k: usize,
    rng: &mut R,
) -> Result<RrfVector> {
    let cfg = &world.config;
    if c >= cfg.n_classes || s >= cfg.n_seasons {
        return Err(DfrdError::invalid(format!(
            "class {c} / season {s} out of range"
        )));
    }
    if k == 0 {
        return Err(DfrdError::invalid("k must be at least 1"));
    }
    let scores: Vec<f64> = world.prototypes[c]
        .iter()
        .zip(&world.drift[c][s])
        .map(|(p, d)| p + d + cfg.noise_scale * normal(rng))
        .collect();
    Ok(top_k(&scores, k))
}

/// A labeled RRF observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: RrfVector,
    pub label: OneHotLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeasonDataset {
    pub season: usize,
    pub train: Vec<Observation>,
    pub test: Vec<Observation>,
}

/// Dense-input labeled dataset for training or evaluation.
pub fn to_labeled<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> LabeledDataset {
    LabeledDataset::new(
        obs.into_iter()
            .map(|o| LabeledSample {
                input: rrf_to_dense(&o.x),
                label: o.label,
            })
            .collect(),
    )
}

/// Draws the season's observations; per class the first 75% of draws go to
/// train and the rest to test.
pub fn make_season_dataset(world: &World, s: usize, k: usize) -> Result<SeasonDataset> {
    let cfg = &world.config;
    if s >= cfg.n_seasons {
        return Err(DfrdError::invalid(format!("season {s} out of range")));
    }
    let (n_train, _) = cfg.split_counts();
    let mut rng = seed::rng_for(cfg.seed, &[tag::SEASON, s as u64]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..cfg.n_classes {
        for draw in 0..cfg.samples_per_class_per_season {
            let obs = Observation {
                x: synth_observation(world, c, s, k, &mut rng)?,
                label: OneHotLabel(c),
            };
            if draw < n_train {
                train.push(obs);
            } else {
                test.push(obs);
            }
        }
    }
    Ok(SeasonDataset {
        season: s,
        train,
        test,
    })
}

/// Independent Bernoulli(p) membership per class, redrawn until nonempty.
pub fn assign_experienced_classes<R: Rng + ?Sized>(
    n_classes: usize,
    p: f64,
    rng: &mut R,
) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DfrdError::InvalidConfig(format!("experience_prob {p} outside [0, 1]")));
    }
    if p == 0.0 || n_classes == 0 {
        return Err(DfrdError::InvalidConfig(
            "experience_prob 0 can never produce a nonempty class set".into(),
        ));
    }
    loop {
        let set: BTreeSet<usize> = (0..n_classes).filter(|_| rng.random_bool(p)).collect();
        if !set.is_empty() {
            return Ok(set);
        }
    }
}

/// Seeds used by one generation, for reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSeeds {
    pub world: u64,
    pub sampler: u64,
    pub teacher_init: u64,
    pub student_init: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: usize,
    /// Student Top-1 on the season's full test split.
    pub top1: f64,
    pub experienced_classes_this_gen: Vec<usize>,
    pub cumulative_experienced: usize,
    /// Student Top-1 on test samples of classes no teacher has experienced.
    /// `None` when every class has been experienced.
    pub top1_unexperienced: Option<f64>,
    /// Supervised teacher's Top-1 on test samples of its own classes.
    pub teacher_top1_experienced: f64,
    pub teacher_checksum: u64,
    pub teachers_consulted: usize,
    pub pseudo_samples: usize,
    pub sampler_spec: SamplerSpec,
    pub seeds: GenerationSeeds,
}

/// A trained student together with the inputs it was trained on, which act as
/// its oracle pool when it teaches the next generation.
#[derive(Debug, Clone)]
pub struct TrainedStudent {
    pub model: Arc<MlpModel>,
    pub pool: Vec<Query>,
}

pub struct GenerationOutcome {
    pub student: TrainedStudent,
    pub report: GenerationReport,
}

fn accuracy_where(model: &MlpModel, test: &[Observation], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let mut n = 0usize;
    let mut hits = 0usize;
    for o in test.iter().filter(|o| keep(o.label.0)) {
        n += 1;
        let pred = model
            .forward_slice(rrf_to_dense(&o.x).as_slice())
            .expect("test input matches model dims")
            .argmax();
        if pred == o.label.0 {
            hits += 1;
        }
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Supervised teacher for generation `i` (1-based), trained on the season's
/// train split restricted to `classes`.
pub fn train_supervised_teacher(
    season: &SeasonDataset,
    classes: &BTreeSet<usize>,
    i: usize,
    cfg: &ScenarioConfig,
) -> Result<MlpModel> {
    let w = cfg.world.seed;
    let init_seed = seed::derive(w, &[tag::TEACHER_INIT, i as u64]);
    let init = init_mlp(&cfg.mlp_config(init_seed), &mut seed::rng(init_seed))?;
    let data = to_labeled(season.train.iter().filter(|o| classes.contains(&o.label.0)));
    let tc = TrainConfig {
        shuffle_seed: seed::derive(w, &[tag::TEACHER_SHUFFLE, i as u64, cfg.teacher_train.shuffle_seed]),
        ..cfg.teacher_train.clone()
    };
    Ok(train(&init, &data.samples, &tc)?.0)
}

/// Runs generation `i` (1-based). `prev` is the previous generation's
/// student; `known_before` is the union of classes experienced by earlier
/// supervised teachers. Only teacher-answered pseudo-data reaches the
/// student.
pub fn run_generation(
    world: &World,
    i: usize,
    prev: Option<&TrainedStudent>,
    known_before: &BTreeSet<usize>,
    cfg: &ScenarioConfig,
) -> Result<GenerationOutcome> {
    let wc = &world.config;
    if i == 0 || i > wc.n_seasons {
        return Err(DfrdError::invalid(format!(
            "generation {i} outside 1..={}",
            wc.n_seasons
        )));
    }
    let w = wc.seed;
    let season = make_season_dataset(world, i - 1, cfg.k)?;
    let classes = assign_experienced_classes(
        wc.n_classes,
        wc.experience_prob,
        &mut seed::rng_for(w, &[tag::EXPERIENCE, i as u64]),
    )?;

    let teacher_model = Arc::new(train_supervised_teacher(&season, &classes, i, cfg)?);
    let teacher_pool: Vec<Query> = season
        .train
        .iter()
        .filter(|o| classes.contains(&o.label.0))
        .map(|o| Query::Rrf(o.x.clone()))
        .collect();

    let teacher_a = LocalTeacher::new(format!("supervised-{i:02}"), teacher_model.clone(), cfg.k);
    let teacher_b = prev.map(|p| LocalTeacher::new(format!("student-{:02}", i - 1), p.model.clone(), cfg.k));

    let mut encounters = vec![Encounter {
        teacher: &teacher_a as &dyn Teacher,
        oracle_pool: &teacher_pool,
    }];
    if let (Some(tb), Some(p)) = (teacher_b.as_ref(), prev) {
        encounters.push(Encounter {
            teacher: tb,
            oracle_pool: &p.pool,
        });
    }

    let student_seed = seed::derive(w, &[tag::STUDENT_INIT, i as u64]);
    let student_init = init_mlp(&cfg.mlp_config(student_seed), &mut seed::rng(student_seed))?;
    let spec = cfg.sampler.with_seed(seed::derive(cfg.sampler.seed, &[tag::SAMPLER, i as u64]));
    let tc = TrainConfig {
        shuffle_seed: seed::derive(cfg.train.shuffle_seed, &[tag::STUDENT_SHUFFLE, w, i as u64]),
        ..cfg.train.clone()
    };
    let outcome = kt_session(&student_init, &encounters, &spec, &tc, &cfg.session_options())?;

    let mut known = known_before.clone();
    known.extend(classes.iter().copied());
    let student = Arc::new(outcome.student.clone());
    let top1 = accuracy_where(&student, &season.test, |_| true).unwrap_or(0.0);
    let report = GenerationReport {
        generation: i,
        top1,
        experienced_classes_this_gen: classes.iter().copied().collect(),
        cumulative_experienced: known.len(),
        top1_unexperienced: accuracy_where(&student, &season.test, |c| !known.contains(&c)),
        teacher_top1_experienced: accuracy_where(&teacher_model, &season.test, |c| classes.contains(&c))
            .unwrap_or(0.0),
        teacher_checksum: teacher_model.checksum(),
        teachers_consulted: encounters.len(),
        pseudo_samples: outcome.datasets.iter().map(|d| d.len()).sum(),
        sampler_spec: spec.clone(),
        seeds: GenerationSeeds {
            world: w,
            sampler: spec.seed,
            teacher_init: seed::derive(w, &[tag::TEACHER_INIT, i as u64]),
            student_init: student_seed,
        },
    };
    Ok(GenerationOutcome {
        student: TrainedStudent {
            model: student,
            pool: outcome.training_inputs(),
        },
        report,
    })
}

/// Full run: generations `1..=S`, each student becoming the next teacher.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<Vec<GenerationReport>> {
    Ok(run_experiment_with_student(cfg)?.0)
}

/// As [`run_experiment`], also returning the final student.
pub fn run_experiment_with_student(cfg: &ScenarioConfig) -> Result<(Vec<GenerationReport>, TrainedStudent)> {
    cfg.validate()?;
    let world = gen_world(&cfg.world)?;
    let mut prev: Option<TrainedStudent> = None;
    let mut known = BTreeSet::new();
    let mut reports = Vec::with_capacity(cfg.world.n_seasons);
    for i in 1..=cfg.world.n_seasons {
        let out = run_generation(&world, i, prev.as_ref(), &known, cfg)?;
        known.extend(out.report.experienced_classes_this_gen.iter().copied());
        reports.push(out.report);
        prev = Some(out.student);
    }
    Ok((reports, prev.expect("n_seasons >= 1")))
}
