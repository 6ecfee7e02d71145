use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;

use crate::error::{DfrdError, Result};
use crate::eval::{self, report_rows, ReportRow};
use crate::kt::{distill, reconstruct_dataset, Teacher};
use crate::mlp::{gradient_check, init_mlp, LabeledSample, MlpConfig, MlpModel, TrainConfig};
use crate::rrf::{OneHotLabel, ScoreVector};
use crate::samplers::{build_query_set, default_r_list, Query, RandomKind, SamplerKind};
use crate::scenario::{gen_world, make_season_dataset, run_experiment_with_student, ScenarioConfig, WorldConfig};
use crate::seed;
use crate::transport::{serve_listener, RemoteTeacher, ServeOptions};

#[derive(Parser, Debug)]
#[command(name = "dfrd", version, about = "Data-free recursive distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the multi-generation experiment and write a CSV report.
    Run(RunArgs),
    /// Repeat the experiment for several mixing ratios r.
    Sweep(SweepArgs),
    /// Expose a saved model as a black-box teacher over TCP.
    Serve(ServeArgs),
    /// Query a remote teacher and write the reconstructed pseudo-dataset.
    Connect(ConnectArgs),
    /// Compare backprop gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Ten-generation run on a ten-class world.
    Demo,
    /// Print the default configuration as JSON.
    DefaultConfig,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SamplerArg {
    Oracle,
    Naive,
    Regularized,
    Mixed,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum RandomArg {
    Naive,
    Regularized,
}

impl From<RandomArg> for RandomKind {
    fn from(a: RandomArg) -> Self {
        match a {
            RandomArg::Naive => RandomKind::Naive,
            RandomArg::Regularized => RandomKind::Regularized,
        }
    }
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// JSON configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the world seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Random queries per 100 oracle queries. Implies the mixed sampler.
    #[arg(long)]
    r: Option<u32>,
    /// Random query family used by the mixed sampler.
    #[arg(long, value_enum)]
    random: Option<RandomArg>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Independent replicas with consecutive world seeds.
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    /// Write an SVG chart of Top-1 per generation.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Save the final student (single replica only).
    #[arg(long)]
    save_student: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated mixing ratios.
    #[arg(long, value_delimiter = ',')]
    r_list: Option<Vec<u32>>,
    #[arg(long, value_enum, default_value = "regularized")]
    random: RandomArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Attach the k-hot ranking to every answer.
    #[arg(long)]
    soft: bool,
    /// Exit after this many connections.
    #[arg(long)]
    max_sessions: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct ConnectArgs {
    #[arg(long)]
    addr: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Season (0-based) whose train split forms the oracle pool.
    #[arg(long, default_value_t = 0)]
    season: usize,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long)]
    r: Option<u32>,
    /// Pseudo-dataset destination (JSON lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Distill a fresh student from the answers and save it.
    #[arg(long)]
    save_student: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    models: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Connect(a) => connect(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Demo => demo(),
        Command::DefaultConfig => {
            println!("{}", ScenarioConfig::default().to_json());
            Ok(())
        }
    }
}

fn load_config(a: &ConfigArgs) -> Result<ScenarioConfig> {
    let mut cfg = match &a.config {
        Some(p) => ScenarioConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.world.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_sampler(cfg: &mut ScenarioConfig, sampler: Option<SamplerArg>, r: Option<u32>, random: Option<RandomArg>) {
    let kind = match (sampler, r) {
        (Some(SamplerArg::Oracle), _) => Some(SamplerKind::Oracle),
        (Some(SamplerArg::Naive), _) => Some(SamplerKind::NaiveRandom),
        (Some(SamplerArg::Regularized), _) => Some(SamplerKind::RegularizedRandom),
        (Some(SamplerArg::Mixed), _) | (None, Some(_)) => Some(SamplerKind::Mixed),
        (None, None) => None,
    };
    if let Some(k) = kind {
        cfg.sampler.kind = k;
    }
    if let Some(r) = r {
        cfg.sampler.r = r;
    }
    if let Some(rk) = random {
        cfg.sampler.random_kind = rk.into();
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) if p.as_os_str() != "-" => Box::new(BufWriter::new(File::create(p)?)),
        _ => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_plot(path: &Path, series: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    std::fs::write(path, eval::render_svg(series))?;
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    apply_sampler(&mut cfg, a.sampler, a.r, a.random);
    cfg.validate()?;
    if a.save_student.is_some() && a.replicas != 1 {
        return Err(DfrdError::InvalidConfig("--save-student needs a single replica".into()));
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut series = Vec::new();
    if a.replicas == 1 {
        let (reports, student) = run_experiment_with_student(&cfg)?;
        if let Some(p) = &a.save_student {
            student.model.save(p)?;
        }
        series.push((format!("seed {}", cfg.world.seed), reports.iter().map(|g| (g.generation, g.top1)).collect()));
        rows.extend(report_rows(&reports, cfg.world.seed));
    } else {
        for (s, reports) in eval::run_replicas(&cfg, a.replicas)? {
            series.push((format!("seed {s}"), reports.iter().map(|g| (g.generation, g.top1)).collect()));
            rows.extend(report_rows(&reports, s));
        }
    }
    eval::write_report_csv(output(&a.out)?, &rows)?;
    if let Some(p) = &a.plot {
        write_plot(p, &series)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let r_list = a.r_list.unwrap_or_else(default_r_list);
    let results = eval::sweep_r_with(&cfg, &r_list, a.random.into())?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for res in &results {
        rows.extend(report_rows(&res.reports, cfg.world.seed));
        series.push((format!("r={}", res.r), res.reports.iter().map(|g| (g.generation, g.top1)).collect()));
        eprintln!("r={:>6}  final top1={:.4}", res.r, res.final_top1());
    }
    eval::write_report_csv(output(&a.out)?, &rows)?;
    if let Some(p) = &a.plot {
        write_plot(p, &series)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = Arc::new(MlpModel::load(&a.model)?);
    let listener = TcpListener::bind(&a.listen)?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "listening on {}", listener.local_addr()?)?;
    stdout.flush()?;
    drop(stdout);
    serve_listener(model, listener, ServeOptions { soft: a.soft }, a.max_sessions)
}

fn connect(a: ConnectArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    apply_sampler(&mut cfg, a.sampler, a.r, None);
    cfg.validate()?;
    if a.season >= cfg.world.n_seasons {
        return Err(DfrdError::InvalidConfig(format!(
            "season {} outside 0..{}",
            a.season, cfg.world.n_seasons
        )));
    }
    let world = gen_world(&cfg.world)?;
    let season = make_season_dataset(&world, a.season, cfg.k)?;
    let pool: Vec<Query> = season.train.iter().map(|o| Query::Rrf(o.x.clone())).collect();
    let c = cfg.world.n_classes;
    let queries = build_query_set(&pool, &cfg.sampler, cfg.base_count, c, cfg.k)?;
    let teacher = RemoteTeacher::connect_tcp(&a.addr, c, cfg.k, c)?;
    let data = reconstruct_dataset(&teacher, &queries, &cfg.sampler)?;
    teacher.close()?;
    data.write_jsonl(output(&a.out)?)?;
    eprintln!("{} pseudo-samples from {}", data.len(), teacher.id());
    if let Some(p) = &a.save_student {
        let init_seed = seed::derive(cfg.world.seed, &[a.season as u64]);
        let init = init_mlp(&cfg.mlp_config(init_seed), &mut seed::rng(init_seed))?;
        let (student, _) = distill(&init, &[data], &cfg.train, cfg.distill_mode)?;
        student.save(p)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut rng = seed::rng(a.seed);
    let mut worst = 0.0f64;
    for j in 0..a.models {
        let in_dim = rng.random_range(2..=8);
        let out_dim = rng.random_range(2..=5);
        let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=6)).collect();
        let mut model = MlpModel::zeros(&MlpConfig::new(in_dim, hidden, out_dim, 0))?;
        for i in 0..model.param_count() {
            *model.param_mut(i) = rng.random_range(-1.0..1.0);
        }
        let batch: Vec<LabeledSample> = (0..4)
            .map(|_| {
                Ok(LabeledSample {
                    input: ScoreVector::new((0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect())?,
                    label: OneHotLabel(rng.random_range(0..out_dim)),
                })
            })
            .collect::<Result<_>>()?;
        let err = gradient_check(&model, &batch, 1e-4)?;
        println!("model {j:>3}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("worst: {worst:.3e}");
    if worst >= 1e-4 {
        return Err(DfrdError::invalid(format!("gradient check failed: {worst:.3e} >= 1e-4")));
    }
    Ok(())
}

fn demo() -> Result<()> {
    let cfg = ScenarioConfig {
        world: WorldConfig {
            n_classes: 10,
            n_seasons: 10,
            samples_per_class_per_season: 20,
            experience_prob: 0.3,
            ..WorldConfig::default()
        },
        hidden_dims: vec![32],
        base_count: 200,
        k: 5,
        train: TrainConfig {
            max_updates: Some(500),
            ..ScenarioConfig::default().train
        },
        ..ScenarioConfig::default()
    };
    let (reports, _) = run_experiment_with_student(&cfg)?;
    for g in &reports {
        println!(
            "generation {:>2}: top1={:.3} experienced={:?} cumulative={}",
            g.generation, g.top1, g.experienced_classes_this_gen, g.cumulative_experienced
        );
    }
    Ok(())
}
