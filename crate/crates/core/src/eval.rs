//! Accuracy, report files and the mixing-ratio sweep.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::error::{DfrdError, Result};
use crate::mlp::{LabeledSample, MlpModel};
use crate::samplers::{RandomKind, SamplerSpec};
use crate::scenario::{run_experiment, GenerationReport, ScenarioConfig};

/// Fraction of samples whose argmax prediction equals the label.
pub fn top1_accuracy(model: &MlpModel, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(DfrdError::invalid("top-1 accuracy of an empty set is undefined"));
    }
    let mut hits = 0usize;
    for s in samples {
        if model.forward_slice(s.input.as_slice())?.argmax() == s.label.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub generation: usize,
    pub top1: f64,
    pub cumulative_classes: usize,
    pub r: u32,
    pub seed: u64,
}

pub fn report_rows(reports: &[GenerationReport], seed: u64) -> Vec<ReportRow> {
    reports
        .iter()
        .map(|g| ReportRow {
            generation: g.generation,
            top1: g.top1,
            cumulative_classes: g.cumulative_experienced,
            r: g.sampler_spec.effective_r(),
            seed,
        })
        .collect()
}

pub const CSV_HEADER: &str = "generation,top1,cumulative_classes,r,seed";

pub fn write_report_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{},{},{}",
            r.generation, r.top1, r.cumulative_classes, r.r, r.seed
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub r: u32,
    pub reports: Vec<GenerationReport>,
}

impl SweepResult {
    pub fn final_top1(&self) -> f64 {
        self.reports.last().map_or(0.0, |g| g.top1)
    }
}

/// Runs `f` over `items` on up to `available_parallelism` scoped threads,
/// keeping results in input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().expect("slot lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}

/// Repeats the experiment once per mixing ratio, using regularized random
/// queries. Everything except `r` (seeds included) is shared across rows.
pub fn sweep_r(cfg: &ScenarioConfig, r_list: &[u32]) -> Result<Vec<SweepResult>> {
    sweep_r_with(cfg, r_list, RandomKind::Regularized)
}

pub fn sweep_r_with(cfg: &ScenarioConfig, r_list: &[u32], kind: RandomKind) -> Result<Vec<SweepResult>> {
    if r_list.is_empty() {
        return Err(DfrdError::invalid("sweep needs at least one r"));
    }
    cfg.validate()?;
    par_map(r_list, |&r| {
        let row_cfg = ScenarioConfig {
            sampler: SamplerSpec {
                naive_dense: cfg.sampler.naive_dense,
                ..SamplerSpec::mixed(r, kind, cfg.sampler.seed)
            },
            ..cfg.clone()
        };
        run_experiment(&row_cfg).map(|reports| SweepResult { r, reports })
    })
    .into_iter()
    .collect()
}

/// Independent replicas with world seeds `seed, seed+1, ...`.
pub fn run_replicas(cfg: &ScenarioConfig, replicas: usize) -> Result<Vec<(u64, Vec<GenerationReport>)>> {
    if replicas == 0 {
        return Err(DfrdError::invalid("replicas must be >= 1"));
    }
    let seeds: Vec<u64> = (0..replicas as u64).map(|j| cfg.world.seed.wrapping_add(j)).collect();
    par_map(&seeds, |&s| {
        let mut c = cfg.clone();
        c.world.seed = s;
        run_experiment(&c).map(|r| (s, r))
    })
    .into_iter()
    .collect()
}

/// Minimal line chart of Top-1 against generation, one polyline per series.
pub fn render_svg(series: &[(String, Vec<(usize, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let max_g = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&(g, _)| g))
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let max_y = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&(_, y)| y))
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let sx = |g: usize| PAD + (g as f64 - 1.0) / (max_g - 1.0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / max_y * (H - 2.0 * PAD);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    svg += &format!(
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = H - PAD,
        r = W - PAD
    );
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">generation</text>\n<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">top-1 (max {max_y:.3})</text>\n",
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    );
    for (n, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(g, y)| format!("{:.1},{:.1}", sx(g), sy(y)))
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        );
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - PAD - 90.0,
            PAD + 16.0 * n as f64,
            label.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    svg += "</svg>\n";
    svg
}
