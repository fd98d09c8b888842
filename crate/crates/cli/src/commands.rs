//! Command implementations. Each returns a summary so callers other than
//! the binary (tests, scripts) can inspect results directly.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use unload_core::container::{build_substack_catalog, generate_container, ContainerSpec};
use unload_core::env::{
    evaluate, run_training, CurveRow, EnvConfig, EnvKind, EvalConfig, EvalReport, Policy, RunConfig,
};
use unload_core::fmt_f64;
use unload_core::gradcheck::{
    compare_gradient, grad_check, kink_margin, random_case, GradCheckReport, TOLERANCE,
};
use unload_core::observation::{make_observation, write_observation_csv};
use unload_core::physics::{pickable_set, PhysicsConfig};
use unload_core::qnet::{backward, forward, NetworkConfig, QNetworkParams};

use crate::config::{materialize, resolve, Overrides};
use crate::manifest::RunManifest;
use crate::plot::{plot_csv, PlotKind};
use crate::{create_dir, write_file, CliError};

pub const CURVES_HEADER: &str = "step,epsilon,batch_loss,mean_reward_window,msr_window";
pub const EVAL_HEADER: &str = "episode,successes,failures,msr";

pub fn write_curves(out: &mut dyn Write, curves: &[CurveRow]) -> io::Result<()> {
    writeln!(out, "{CURVES_HEADER}")?;
    for c in curves {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.step,
            fmt_f64(c.epsilon),
            fmt_f64(c.batch_loss),
            fmt_f64(c.mean_reward_window),
            fmt_f64(c.msr_window)
        )?;
    }
    Ok(())
}

fn write_checkpoint(
    path: &Path,
    params: &QNetworkParams,
    item_count: usize,
) -> Result<(), CliError> {
    write_file(path, |w| params.write_checkpoint(item_count, w))
}

pub fn load_checkpoint(path: &Path) -> Result<(QNetworkParams, usize), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    QNetworkParams::read_checkpoint(io::BufReader::new(file))
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn settings(pairs: Vec<(&'static str, String)>) -> Vec<(String, String)> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub dir: PathBuf,
    pub items: usize,
    pub pickable: usize,
    pub pickable_fraction: f64,
}

/// Generates one container and writes its item table and first observation.
pub fn cmd_gen(seed: u64, out: &Path) -> Result<GenSummary, CliError> {
    create_dir(out)?;
    let spec = ContainerSpec::default();
    let physics = PhysicsConfig::default();
    let catalog = build_substack_catalog().map_err(|e| CliError::Generation(e.to_string()))?;
    let state = generate_container(&spec, &catalog, seed)
        .map_err(|e| CliError::Generation(e.to_string()))?;
    let env = EnvConfig::default();
    let obs = make_observation(&state, &env.viewer, 0)
        .map_err(|e| CliError::Generation(e.to_string()))?;
    let mut manifest =
        RunManifest::start("gen", seed, out, vec![("seed".into(), seed.to_string())]);
    manifest.save()?;
    write_file(&out.join("container.csv"), |w| state.write_csv(w))?;
    write_file(&out.join("observation.csv"), |w| {
        write_observation_csv(&state, &obs, w)
    })?;
    let items = state.live_count();
    let pickable = pickable_set(&state, &physics).len();
    let summary = GenSummary {
        dir: out.to_path_buf(),
        items,
        pickable,
        pickable_fraction: pickable as f64 / items as f64,
    };
    write_file(&out.join("summary.txt"), |w| {
        writeln!(w, "items {items}")?;
        writeln!(w, "pickable {pickable}")?;
        writeln!(
            w,
            "pickable_fraction {}",
            fmt_f64(summary.pickable_fraction)
        )
    })?;
    manifest.finish()?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneArgs {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub steps: u64,
    pub repeats: usize,
    pub seed: u64,
    pub equalize: bool,
    pub workers: usize,
}

impl Default for TuneArgs {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-1, 1e-2, 1e-3],
            batch_sizes: vec![64, 256, 1024, 2048],
            steps: 3000,
            repeats: 1,
            seed: 0,
            equalize: true,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub repeat: usize,
    pub seed: u64,
    pub final_msr: f64,
    pub curves: PathBuf,
}

/// Curve file name for one grid cell.
pub fn tune_curve_name(lr: f64, batch: usize, repeat: usize) -> String {
    format!("curves_lr{lr:e}_b{batch}_r{repeat}.csv")
}

/// Trains on the tuning environment over the learning-rate × batch grid.
pub fn cmd_tune(args: &TuneArgs, out: &Path) -> Result<Vec<TuneResult>, CliError> {
    if args.learning_rates.is_empty() || args.batch_sizes.is_empty() || args.repeats == 0 {
        return Err(CliError::Validation("tune grid is empty".into()));
    }
    create_dir(out)?;
    let list = |v: Vec<String>| v.join(" ");
    let mut manifest = RunManifest::start(
        "tune",
        args.seed,
        out,
        vec![
            (
                "learning_rates".into(),
                list(args.learning_rates.iter().map(|v| v.to_string()).collect()),
            ),
            (
                "batch_sizes".into(),
                list(args.batch_sizes.iter().map(|v| v.to_string()).collect()),
            ),
            ("total_steps".into(), args.steps.to_string()),
            ("repeats".into(), args.repeats.to_string()),
            ("equalize".into(), args.equalize.to_string()),
            ("workers".into(), args.workers.to_string()),
        ],
    );
    manifest.save()?;
    let mut results = Vec::new();
    for &lr in &args.learning_rates {
        for &b in &args.batch_sizes {
            for r in 0..args.repeats {
                let seed = args.seed + r as u64;
                let mut o = Overrides::new();
                o.set("total_steps", &args.steps.to_string())?;
                o.set("learning_rate", &lr.to_string())?;
                o.set("batch_size", &b.to_string())?;
                o.set("seed", &seed.to_string())?;
                o.set("equalize", &args.equalize.to_string())?;
                o.set("workers", &args.workers.to_string())?;
                let run = resolve(EnvKind::Tuning, &o)?;
                let outcome = run_training(&run, |_, _| Ok(()))?;
                let path = out.join(tune_curve_name(lr, b, r));
                write_file(&path, |w| write_curves(w, &outcome.curves))?;
                results.push(TuneResult {
                    learning_rate: lr,
                    batch_size: b,
                    repeat: r,
                    seed,
                    final_msr: outcome.final_msr,
                    curves: path,
                });
            }
        }
    }
    write_file(&out.join("summary.csv"), |w| {
        writeln!(w, "learning_rate,batch_size,repeat,seed,final_msr")?;
        for r in &results {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(r.learning_rate),
                r.batch_size,
                r.repeat,
                r.seed,
                fmt_f64(r.final_msr)
            )?;
        }
        Ok(())
    })?;
    manifest.finish()?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub final_msr: f64,
    pub curves: PathBuf,
    pub checkpoint: PathBuf,
}

/// Resolves defaults < config file < overrides into a run configuration.
pub fn resolve_layers(
    config_file: Option<&Path>,
    overrides: &Overrides,
) -> Result<RunConfig, CliError> {
    let mut layers = match config_file {
        Some(p) => Overrides::from_file(p)?,
        None => Overrides::new(),
    };
    layers.merge(overrides);
    resolve(EnvKind::Unload, &layers)
}

/// Full training run with curves, episode totals and checkpoints.
pub fn cmd_train(run: &RunConfig, out: &Path) -> Result<TrainSummary, CliError> {
    create_dir(out)?;
    let mut manifest = RunManifest::start("train", run.train.seed, out, settings(materialize(run)));
    manifest.save()?;
    let item_count = run.net.item_count;
    let ckpt_dir = out.join("checkpoints");
    if run.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let outcome = run_training(run, |k, params| {
        let path = ckpt_dir.join(format!("step_{k:08}.txt"));
        let file = std::fs::File::create(&path)?;
        let mut w = io::BufWriter::new(file);
        params.write_checkpoint(item_count, &mut w)?;
        w.flush()
    })?;
    let curves = out.join("curves.csv");
    write_file(&curves, |w| write_curves(w, &outcome.curves))?;
    write_file(&out.join("episodes.csv"), |w| {
        writeln!(w, "episode,round,env,total_reward")?;
        for (i, (round, env, total)) in outcome.episode_totals.iter().enumerate() {
            writeln!(w, "{i},{round},{env},{}", fmt_f64(*total))?;
        }
        Ok(())
    })?;
    let checkpoint = out.join("checkpoint.txt");
    write_checkpoint(&checkpoint, &outcome.params, item_count)?;
    manifest.finish()?;
    Ok(TrainSummary {
        dir: out.to_path_buf(),
        final_msr: outcome.final_msr,
        curves,
        checkpoint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Random,
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub baseline: Option<Baseline>,
    pub episodes: usize,
    pub seed: u64,
    pub masked: bool,
    pub steps: Option<usize>,
}

/// Evaluates a checkpoint or a baseline policy on fresh containers.
pub fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<EvalReport, CliError> {
    let policy = match (args.baseline, &args.checkpoint) {
        (Some(Baseline::Random), _) => Policy::Random,
        (Some(Baseline::Oracle), _) => Policy::Oracle,
        (None, Some(path)) => {
            let (params, item_count) = load_checkpoint(path)?;
            if item_count != NetworkConfig::default().item_count {
                return Err(CliError::Validation(format!(
                    "checkpoint expects {item_count} rows"
                )));
            }
            Policy::Greedy {
                params,
                masked: args.masked,
            }
        }
        (None, None) => {
            return Err(CliError::Validation(
                "eval needs a checkpoint or a baseline".into(),
            ))
        }
    };
    if args.episodes == 0 {
        return Err(CliError::Validation("episodes must be at least 1".into()));
    }
    create_dir(out)?;
    let policy_name = match &policy {
        Policy::Random => "random".to_string(),
        Policy::Oracle => "oracle".to_string(),
        Policy::Greedy { masked, .. } => format!("greedy masked={masked}"),
    };
    let mut entries = vec![
        ("policy".to_string(), policy_name),
        ("episodes".to_string(), args.episodes.to_string()),
        (
            "steps".to_string(),
            args.steps.map_or("full".to_string(), |s| s.to_string()),
        ),
    ];
    if let Some(p) = &args.checkpoint {
        entries.push(("checkpoint".to_string(), p.display().to_string()));
    }
    let mut manifest = RunManifest::start("eval", args.seed, out, entries);
    manifest.save()?;
    let eval = EvalConfig {
        episodes: args.episodes,
        seed: args.seed,
        steps: args.steps,
    };
    let report = evaluate(&EnvConfig::default(), &policy, &eval)?;
    write_file(&out.join("eval_report.csv"), |w| {
        writeln!(w, "{EVAL_HEADER}")?;
        for e in &report.episodes {
            writeln!(
                w,
                "{},{},{},{}",
                e.episode,
                e.successes,
                e.failures,
                fmt_f64(e.msr)
            )?;
        }
        Ok(())
    })?;
    write_file(&out.join("attempts.csv"), |w| {
        writeln!(w, "attempts,count")?;
        for (a, c) in &report.attempts_per_success {
            writeln!(w, "{a},{c}")?;
        }
        Ok(())
    })?;
    manifest.finish()?;
    Ok(report)
}

/// Renders `input` as an SVG file at `out`.
pub fn cmd_plot(input: &Path, kind: PlotKind, out: &Path) -> Result<(), CliError> {
    let svg = plot_csv(input, kind, EnvConfig::default().episode_limit)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, |w| w.write_all(svg.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSummary {
    pub cases: Vec<GradCheckReport>,
    pub skipped: usize,
    pub control: GradCheckReport,
}

/// Finite-difference check on random cases away from kinks, plus a
/// corrupted-gradient control that must be detected.
pub fn cmd_gradcheck(cases: usize, seed: u64) -> Result<GradCheckSummary, CliError> {
    let config = NetworkConfig::default();
    let mut reports = Vec::new();
    let mut skipped = 0;
    let mut s = seed;
    while reports.len() < cases {
        let (p, x, w) = random_case(&config, s);
        s += 1;
        if kink_margin(&p, &x).map_err(|e| CliError::Check(e.to_string()))? < 1e-4 {
            skipped += 1;
            continue;
        }
        reports.push(grad_check(&p, &x, &w).map_err(|e| CliError::Check(e.to_string()))?);
    }
    let (p, x, w) = random_case(&config, seed);
    let (_, trace) = forward(&x, &p).map_err(|e| CliError::Check(e.to_string()))?;
    let mut g = backward(&p, &trace, &w).map_err(|e| CliError::Check(e.to_string()))?;
    let k = g.values().len() - 1;
    g.values_mut()[k] += 0.05 + 0.5 * g.values()[k].abs();
    let control = compare_gradient(&p, &x, &w, &g).map_err(|e| CliError::Check(e.to_string()))?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    if worst >= TOLERANCE {
        return Err(CliError::Check(format!(
            "max relative error {worst:e} exceeds {TOLERANCE:e}"
        )));
    }
    if control.max_rel_error < TOLERANCE {
        return Err(CliError::Check(
            "corrupted gradient was not detected".into(),
        ));
    }
    Ok(GradCheckSummary {
        cases: reports,
        skipped,
        control,
    })
}
