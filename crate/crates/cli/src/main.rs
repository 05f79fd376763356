mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mpvbgs::mpsearch::{agreement, PrecisionMap};
use mpvbgs::scene::{evaluate, evaluator, frame_stream, EvalSet, FrameStream};
use mpvbgs::vbgs::{
    hot_graph, metrics_csv, search_hot_function, Checkpoint, FrameMetrics, HotSearch, MixtureModel, SufficientStats,
    TrainPrecision, Trainer, ELBO_FUNCTION, STATS_FUNCTION,
};
use mpvbgs::{Error, PrecisionFormat, Result, Tensor};
use serde::Serialize;
use serde_json::json;

use config::{Mode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mpvbgs", version, about = "Mixed-precision variational Bayes Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One reassign+fit iteration in both execution modes: time split and memory trace.
    Profile {
        #[command(flatten)]
        common: Common,
    },
    /// Search a hot function and write its precision map.
    Search {
        #[command(flatten)]
        common: Common,
        /// Hot function name (`compute_elbo_delta`, `sum_stats_over_samples`, or `elbo` / `stats`).
        #[arg(long)]
        function: String,
        /// Repeat the search with this probe seed and report node agreement.
        #[arg(long)]
        compare_seed: Option<u64>,
    },
    /// Train over the frame stream, optionally under precision maps.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "stats_map")]
        elbo_map: Option<PathBuf>,
        #[arg(long, requires = "elbo_map")]
        stats_map: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and append its row to the metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Search both hot functions and train for each tolerance.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1e-7,1e-6,1e-5,1e-4")]
        epsilons: Vec<f64>,
        /// Largest tolerated PSNR drop (dB) against the fp64 run when picking the knee.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
    },
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scene spec TOML.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    points_per_frame: Option<usize>,
    #[arg(long)]
    eval_points: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n_reassign: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    probe_seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    precision: Option<PrecisionFormat>,
    #[arg(long)]
    epsilon: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.scene {
            c.scene = Some(path.clone());
            c.scene_spec = Some(mpvbgs::scene::SceneSpec::load(path)?);
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set!(
            out => out_dir,
            frames => frames,
            points_per_frame => points_per_frame,
            eval_points => eval_points,
            components => model.components,
            batch => model.batch,
            n_reassign => model.n_reassign,
            seed => model.seed,
            probe_seed => probe_seed,
            mode => mode,
            precision => precision,
            epsilon => epsilon,
        );
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::FingerprintMismatch { .. } => 4,
        Error::NonFinite(_) | Error::NotPositiveDefinite { .. } | Error::Infeasible { .. } | Error::EmptyFrame => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Profile { common } => profile(&start("profile", common)?),
        Command::Search {
            common,
            function,
            compare_seed,
        } => search(&start("search", common)?, function, *compare_seed),
        Command::Train {
            common,
            elbo_map,
            stats_map,
        } => {
            let cfg = start("train", common)?;
            let maps = elbo_map.as_deref().zip(stats_map.as_deref());
            train(&cfg, maps)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = start("eval", common)?;
            let path = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"));
            eval(&cfg, &path)
        }
        Command::Sweep {
            common,
            epsilons,
            threshold,
        } => sweep(&start("sweep", common)?, epsilons, *threshold),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, text)
}

/// Resolve the config and record the run manifest.
fn start(command: &str, common: &Common) -> Result<RunConfig> {
    let cfg = common.resolve()?;
    let manifest = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "scene": cfg.scene(),
        "seeds": {
            "model": cfg.model.seed,
            "scene": cfg.scene().seed,
            "probe": cfg.probe_seed,
        },
    });
    write_json(&cfg.out_dir.join("manifest.json"), &manifest)?;
    write(&cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(cfg)
}

fn stream(cfg: &RunConfig) -> Result<FrameStream> {
    frame_stream(&cfg.scene(), cfg.frames, cfg.points_per_frame, cfg.overlap)
}

fn first_frame(cfg: &RunConfig) -> Result<Tensor> {
    stream(cfg)?.next().ok_or(Error::EmptyFrame)
}

/// The full-precision model after the first frame; probe frames are scored against it.
fn probe_model(cfg: &RunConfig) -> Result<MixtureModel> {
    let mut trainer = Trainer::new(cfg.train_config(), &cfg.scene().bounds(), TrainPrecision::uniform(PrecisionFormat::Fp64))?;
    trainer.step(&first_frame(cfg)?, None)?;
    Ok(trainer.model)
}

#[derive(Serialize)]
struct ModeProfile {
    mode: Mode,
    total_seconds: f64,
    elbo_seconds: f64,
    stats_seconds: f64,
    other_seconds: f64,
    elbo_percent: f64,
    stats_percent: f64,
    other_percent: f64,
    elbo_peak_bytes: u64,
    stats_peak_bytes: u64,
    peak_bytes: u64,
}

fn profile(cfg: &RunConfig) -> Result<()> {
    let frame = first_frame(cfg)?;
    let bounds = cfg.scene().bounds();
    let mut rows = Vec::new();
    let mut results: Vec<SufficientStats> = Vec::new();
    for mode in [Mode::Fused, Mode::Baseline] {
        let mut tc = cfg.train_config();
        tc.mode = mode.into();
        let mut trainer = Trainer::new(tc, &bounds, TrainPrecision::homogeneous(cfg.precision))?;
        let t = Instant::now();
        trainer.step(&frame, None)?;
        let total = t.elapsed().as_secs_f64();
        let timing = &trainer.hot.timing;
        let other = (total - timing.elbo_seconds - timing.stats_seconds).max(0.0);
        let sum = timing.elbo_seconds + timing.stats_seconds + other;
        let pct = |v: f64| 100.0 * v / sum;
        let name = match mode {
            Mode::Fused => "fused",
            Mode::Baseline => "baseline",
        };
        let elbo_trace = trainer.hot.last_elbo_trace.as_ref().expect("elbo ran");
        let stats_trace = trainer.hot.last_stats_trace.as_ref().expect("stats ran");
        write(&cfg.out_dir.join(format!("traces/{name}_elbo.csv")), elbo_trace.trace_csv())?;
        write(&cfg.out_dir.join(format!("traces/{name}_stats.csv")), stats_trace.trace_csv())?;
        write(&cfg.out_dir.join(format!("reports/{name}_stats_nodes.txt")), stats_trace.report())?;
        rows.push(ModeProfile {
            mode,
            total_seconds: sum,
            elbo_seconds: timing.elbo_seconds,
            stats_seconds: timing.stats_seconds,
            other_seconds: other,
            elbo_percent: pct(timing.elbo_seconds),
            stats_percent: pct(timing.stats_seconds),
            other_percent: pct(other),
            elbo_peak_bytes: elbo_trace.peak_live_bytes,
            stats_peak_bytes: stats_trace.peak_live_bytes,
            peak_bytes: timing.peak_bytes,
        });
        results.push(trainer.stats);
    }
    let scale = results[0].max_abs_diff(&SufficientStats::zeros(cfg.model.components)).max(1.0);
    let rel_diff = results[0].max_abs_diff(&results[1]) / scale;
    let equal = rel_diff <= 1e-9;
    let mut text = String::from("mode,total_s,compute_elbo_delta%,sum_stats_over_samples%,other%,peak_bytes\n");
    for r in &rows {
        text.push_str(&format!(
            "{:?},{:.6},{:.2},{:.2},{:.2},{}\n",
            r.mode, r.total_seconds, r.elbo_percent, r.stats_percent, r.other_percent, r.peak_bytes
        ));
    }
    write(&cfg.out_dir.join("breakdown.csv"), &text)?;
    write_json(
        &cfg.out_dir.join("profile.json"),
        &json!({ "modes": rows, "stats_relative_diff": rel_diff, "outputs_equal": equal }),
    )?;
    print!("{text}");
    println!("fused vs baseline statistics: max relative difference {rel_diff:.3e}");
    if !equal {
        return Err(Error::NonFinite(format!("fused and baseline statistics differ by {rel_diff:e}")));
    }
    Ok(())
}

fn function_name(name: &str) -> Result<&'static str> {
    match name {
        "elbo" | ELBO_FUNCTION => Ok(ELBO_FUNCTION),
        "stats" | STATS_FUNCTION => Ok(STATS_FUNCTION),
        other => Err(Error::InvalidArgument(format!("unknown hot function `{other}`"))),
    }
}

fn run_search(cfg: &RunConfig, model: &MixtureModel, function: &str, seed: u64, epsilon: f64) -> Result<HotSearch> {
    search_hot_function(
        function,
        model,
        &cfg.scene().bounds(),
        cfg.model.batch,
        &[seed],
        epsilon,
        cfg.search_options(),
    )
}

fn search(cfg: &RunConfig, function: &str, compare_seed: Option<u64>) -> Result<()> {
    let function = function_name(function)?;
    let model = probe_model(cfg)?;
    let found = run_search(cfg, &model, function, cfg.probe_seed, cfg.epsilon)?;
    write(&cfg.out_dir.join(format!("maps/{function}.json")), found.map.to_json())?;
    write_json(&cfg.out_dir.join(format!("reports/{function}.json")), &found.report)?;
    write(&cfg.out_dir.join(format!("reports/{function}.txt")), found.report.summary())?;
    print!("{}", found.report.summary());
    if let Some(seed) = compare_seed {
        let other = run_search(cfg, &model, function, seed, cfg.epsilon)?;
        let (fraction, differing) = agreement(&found.config, &other.config);
        write_json(
            &cfg.out_dir.join(format!("reports/{function}.agreement.json")),
            &json!({
                "seeds": [cfg.probe_seed, seed],
                "agreement": fraction,
                "differing_nodes": differing,
            }),
        )?;
        println!("probe seeds {} and {seed}: {:.1}% node agreement", cfg.probe_seed, 100.0 * fraction);
    }
    Ok(())
}

fn map_precision(cfg: &RunConfig, elbo: &Path, stats: &Path) -> Result<TrainPrecision> {
    let (n, b) = (cfg.model.components, cfg.model.batch);
    let elbo_map = PrecisionMap::read(elbo)?;
    let stats_map = PrecisionMap::read(stats)?;
    // Reject stale maps before any training time is spent.
    elbo_map.config_for(&hot_graph(ELBO_FUNCTION, b, n)?)?;
    stats_map.config_for(&hot_graph(STATS_FUNCTION, b, n)?)?;
    TrainPrecision::from_maps(&elbo_map, &stats_map, n, b)
}

struct TrainRun {
    metrics: Vec<FrameMetrics>,
    checkpoint: Checkpoint,
}

fn train_stream(cfg: &RunConfig, precision: TrainPrecision, eval: &EvalSet) -> Result<TrainRun> {
    let f = evaluator(eval);
    let mut trainer = Trainer::new(cfg.train_config(), &cfg.scene().bounds(), precision)?;
    for frame in stream(cfg)? {
        trainer.step(&frame, Some(&f))?;
    }
    Ok(TrainRun {
        metrics: trainer.metrics.clone(),
        checkpoint: trainer.checkpoint(),
    })
}

fn train(cfg: &RunConfig, maps: Option<(&Path, &Path)>) -> Result<()> {
    let precision = match maps {
        Some((elbo, stats)) => map_precision(cfg, elbo, stats)?,
        None => TrainPrecision::homogeneous(cfg.precision),
    };
    let eval = EvalSet::new(&cfg.scene(), cfg.eval_points)?;
    let run = train_stream(cfg, precision, &eval)?;
    write(&cfg.out_dir.join("metrics.csv"), metrics_csv(&run.metrics))?;
    write_json(&cfg.out_dir.join("metrics.json"), &run.metrics)?;
    run.checkpoint.save(&cfg.out_dir.join("checkpoint.json"))?;
    if let Some(last) = run.metrics.last() {
        println!(
            "{} frames, final PSNR {:.3} ± {:.3} dB",
            last.frame,
            last.psnr_mean.unwrap_or(f64::NAN),
            last.psnr_ci95.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let eval = EvalSet::new(&cfg.scene(), cfg.eval_points)?;
    let e = evaluate(&ck.model, &eval)?;
    write_json(&cfg.out_dir.join("eval.json"), &e)?;
    let path = cfg.out_dir.join("metrics.csv");
    let mut text = fs::read_to_string(&path).unwrap_or_default();
    if text.is_empty() {
        text = metrics_csv(&[]);
    }
    let row = FrameMetrics {
        frame: ck.frame,
        psnr_mean: Some(e.psnr_mean),
        psnr_ci95: Some(e.psnr_ci95),
        seconds: 0.0,
        peak_bytes: 0,
        reassign_seconds: 0.0,
        elbo_seconds: 0.0,
        stats_seconds: 0.0,
    };
    let csv = metrics_csv(&[row]);
    text.push_str(csv.lines().nth(1).expect("one row"));
    text.push('\n');
    write(&path, text)?;
    println!("frame {}: PSNR {:.3} ± {:.3} dB", ck.frame, e.psnr_mean, e.psnr_ci95);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    epsilon: f64,
    cost_ratio: f64,
    psnr: Option<f64>,
    psnr_drop: Option<f64>,
    counts: std::collections::BTreeMap<PrecisionFormat, usize>,
    err_elbo: f64,
    err_stats: f64,
    failure: Option<String>,
}

/// Index of the row with the largest cost reduction whose PSNR drop stays under `threshold`.
fn knee(rows: &[SweepRow], threshold: f64) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| r.psnr_drop.is_some_and(|d| d < threshold))
        .min_by(|(_, a), (_, b)| a.cost_ratio.total_cmp(&b.cost_ratio).then(a.epsilon.total_cmp(&b.epsilon)))
        .map(|(i, _)| i)
}

fn sweep(cfg: &RunConfig, epsilons: &[f64], threshold: f64) -> Result<()> {
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("epsilons must be a non-empty list of positive values".into()));
    }
    let model = probe_model(cfg)?;
    let eval = EvalSet::new(&cfg.scene(), cfg.eval_points)?;
    let reference = train_stream(cfg, TrainPrecision::uniform(PrecisionFormat::Fp64), &eval)?;
    let psnr_ref = reference.metrics.last().and_then(|m| m.psnr_mean).unwrap_or(f64::NAN);
    let (n, b) = (cfg.model.components, cfg.model.batch);
    let mut rows = Vec::new();
    for &eps in epsilons {
        let e = run_search(cfg, &model, ELBO_FUNCTION, cfg.probe_seed, eps)?;
        let s = run_search(cfg, &model, STATS_FUNCTION, cfg.probe_seed, eps)?;
        let tag = format!("{eps:e}");
        write(&cfg.out_dir.join(format!("maps/{tag}/{ELBO_FUNCTION}.json")), e.map.to_json())?;
        write(&cfg.out_dir.join(format!("maps/{tag}/{STATS_FUNCTION}.json")), s.map.to_json())?;
        let cost_ratio = (e.report.modeled_cost_final + s.report.modeled_cost_final)
            / (e.report.modeled_cost_high + s.report.modeled_cost_high);
        let mut counts = e.report.counts_final.clone();
        for (f, c) in &s.report.counts_final {
            *counts.entry(*f).or_default() += c;
        }
        let precision = TrainPrecision::from_maps(&e.map, &s.map, n, b)?;
        let (psnr, failure) = match train_stream(cfg, precision, &eval) {
            Ok(run) => (run.metrics.last().and_then(|m| m.psnr_mean), None),
            Err(err) => (None, Some(err.to_string())),
        };
        rows.push(SweepRow {
            epsilon: eps,
            cost_ratio,
            psnr,
            psnr_drop: psnr.map(|p| psnr_ref - p),
            counts,
            err_elbo: e.report.err_final,
            err_stats: s.report.err_final,
            failure,
        });
    }
    let knee = knee(&rows, threshold);
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut text = String::from("epsilon,cost_ratio,psnr,psnr_drop,fp16,tf32,fp32,fp64,err_elbo,err_stats,knee\n");
    for (i, r) in rows.iter().enumerate() {
        let c = |f| r.counts.get(&f).copied().unwrap_or(0);
        text.push_str(&format!(
            "{:e},{:.4},{},{},{},{},{},{},{:.3e},{:.3e},{}\n",
            r.epsilon,
            r.cost_ratio,
            opt(r.psnr),
            opt(r.psnr_drop),
            c(PrecisionFormat::Fp16),
            c(PrecisionFormat::Tf32),
            c(PrecisionFormat::Fp32),
            c(PrecisionFormat::Fp64),
            r.err_elbo,
            r.err_stats,
            if knee == Some(i) { "*" } else { "" }
        ));
    }
    write(&cfg.out_dir.join("sweep.csv"), &text)?;
    write_json(
        &cfg.out_dir.join("sweep.json"),
        &json!({
            "psnr_fp64": psnr_ref,
            "threshold_db": threshold,
            "knee_epsilon": knee.map(|i| rows[i].epsilon),
            "rows": rows,
        }),
    )?;
    print!("{text}");
    Ok(())
}
