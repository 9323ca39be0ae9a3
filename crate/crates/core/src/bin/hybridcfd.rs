use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hybridcfd::config::{load_config, CaseConfig};
use hybridcfd::hybrid::{hybrid_run, initial_fit, HybridLedger, ModelStart, Observer, RolloutEnd, StepSource};
use hybridcfd::mesh::{centerline_probes, probe_sample, FieldState};
use hybridcfd::metrics::{benchmark_sweep, write_sweep_csv, ErrorSeries, GroundTruth, SweepSetup};
use hybridcfd::snapshot::{load_snapshot, save_snapshot};
use hybridcfd::solver::CfdSolver;
use hybridcfd::surrogate::checkpoint::{load_model, save_model};
use hybridcfd::surrogate::{SurrogateModel, TrainReport};

/// Hybrid finite-volume / neural-surrogate simulation of a heated cavity.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Worker threads. Everything runs on one thread; only 1 is accepted.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solver-only trajectory with snapshots at the configured cadence.
    CfdRun {
        #[arg(long)]
        config: PathBuf,
        /// Steps to run; defaults to the case's total_steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Initial solver phase and first fit; writes the model checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full alternating run; writes the ledger, snapshots and checkpoints.
    HybridRun {
        #[arg(long)]
        config: PathBuf,
        /// Start from this checkpoint and adapt only by transfer learning.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step error series between two snapshot directories.
    Eval {
        truth_dir: PathBuf,
        pred_dir: PathBuf,
        #[arg(long, default_value = "errors.csv")]
        out: PathBuf,
    },
    /// Hybrid runs over tl_epochs × threshold with time-averaged errors.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 10])]
        epochs: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5.0f64, 10.0, 100.0])]
        thresholds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe time series from a snapshot directory.
    Probe {
        dir: PathBuf,
        /// Probe points as `x,y[,z]`, repeatable; defaults to centreline probes.
        #[arg(long = "point")]
        points: Vec<String>,
        #[arg(long, default_value = "probes.csv")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads != 1 {
        bail!(
            "--threads {} requested, but only single-threaded execution is available",
            cli.threads
        );
    }
    match cli.command {
        Command::CfdRun { config, steps, out } => cfd_run(&config, steps, out),
        Command::Train { config, out } => train_cmd(&config, out),
        Command::HybridRun {
            config,
            pretrained,
            out,
        } => hybrid_cmd(&config, pretrained, out),
        Command::Eval {
            truth_dir,
            pred_dir,
            out,
        } => eval_cmd(&truth_dir, &pred_dir, &out),
        Command::Sweep {
            config,
            epochs,
            thresholds,
            out,
        } => sweep_cmd(&config, &epochs, &thresholds, out),
        Command::Probe { dir, points, out } => probe_cmd(&dir, &points, &out),
    }
}

/// Output directory: `--out`, else the case's directory under the output root.
fn output_dir(case: &CaseConfig, out: Option<PathBuf>, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os("HYBRIDCFD_OUTPUT_ROOT").map_or_else(|| PathBuf::from("."), PathBuf::from);
        root.join(&case.output_dir).join(sub)
    })
}

/// A run directory written under a `.partial` name and renamed on success.
struct Staged {
    final_path: PathBuf,
    partial: PathBuf,
}

impl Staged {
    fn create(path: PathBuf) -> Result<Self> {
        if path.exists() {
            bail!("{} already exists", path.display());
        }
        let partial = with_suffix(&path, ".partial");
        if partial.exists() {
            fs::remove_dir_all(&partial).with_context(|| format!("clearing {}", partial.display()))?;
        }
        fs::create_dir_all(&partial).with_context(|| format!("creating {}", partial.display()))?;
        Ok(Self {
            final_path: path,
            partial,
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.partial.join(name)
    }

    fn commit(self) -> Result<PathBuf> {
        fs::rename(&self.partial, &self.final_path)?;
        Ok(self.final_path)
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes a single file through a `.partial` sibling.
fn write_file(path: &Path, f: impl FnOnce(&Path) -> hybridcfd::Result<()>) -> Result<()> {
    let partial = with_suffix(path, ".partial");
    f(&partial).with_context(|| format!("writing {}", partial.display()))?;
    fs::rename(&partial, path)?;
    Ok(())
}

fn snapshot_name(step: u64) -> String {
    format!("step_{step:08}.snap")
}

fn cfd_run(config: &Path, steps: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let case = load_config(config)?;
    let stage = Staged::create(output_dir(&case, out, "cfd"))?;
    let mut solver = CfdSolver::new(&case.grid, &case.physics)?;
    let dt = case.physics.dt;
    let mut state = solver.initial_state();
    save_snapshot(&state, dt, &stage.file(&snapshot_name(0)))?;
    let steps = steps.unwrap_or(case.hybrid.total_steps);
    for _ in 0..steps {
        state = solver.step(&state)?;
        if state.step % case.snapshot_cadence as u64 == 0 {
            save_snapshot(&state, dt, &stage.file(&snapshot_name(state.step)))?;
        }
    }
    let dir = stage.commit()?;
    println!("{steps} solver steps written to {}", dir.display());
    Ok(())
}

fn train_cmd(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let case = load_config(config)?;
    let stage = Staged::create(output_dir(&case, out, "train"))?;
    let mut solver = CfdSolver::new(&case.grid, &case.physics)?;
    let mut model = SurrogateModel::new(case.model, case.grid.ndim(), case.seed)?;
    let fit = initial_fit(&mut solver, &mut model, &case.hybrid)?;
    save_model(&model, &stage.file("model.ckpt"))?;
    save_snapshot(
        &fit.final_state,
        case.physics.dt,
        &stage.file(&snapshot_name(fit.final_state.step)),
    )?;
    let report = &fit.ledger.train_reports[0];
    let mut f = fs::File::create(stage.file("train.csv"))?;
    writeln!(f, "epoch,train_loss,val_loss")?;
    for (e, v) in report.val_loss.iter().enumerate() {
        let t = if e == 0 { f64::NAN } else { report.train_loss[e - 1] };
        writeln!(f, "{e},{t},{v}")?;
    }
    let dir = stage.commit()?;
    println!(
        "fitted {} ({} parameters) on {} pairs in {:.1} s, best validation {:.4e} at epoch {}; {}",
        case.model.kind.name(),
        model.param_count(),
        report.pairs,
        fit.ledger.initial_training_time.as_secs_f64(),
        report.best_val,
        report.best_epoch,
        dir.display()
    );
    Ok(())
}

/// Persists snapshots at the cadence and the model after improving updates.
struct RunWriter {
    dir: PathBuf,
    cadence: u64,
    dt: f64,
}

impl Observer for RunWriter {
    fn on_step(&mut self, state: &FieldState, _source: StepSource) -> hybridcfd::Result<()> {
        if state.step.is_multiple_of(self.cadence) {
            save_snapshot(state, self.dt, &self.dir.join(snapshot_name(state.step)))?;
        }
        Ok(())
    }

    fn on_model_update(&mut self, model: &SurrogateModel, report: &TrainReport) -> hybridcfd::Result<()> {
        if report.best_epoch > 0 {
            save_model(model, &self.dir.join("model.ckpt"))?;
        }
        Ok(())
    }
}

fn ledger_report(ledger: &HybridLedger, total_steps: usize, aborted: Option<&str>) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("completed_steps", ledger.completed_steps().to_string());
    kv("total_steps", total_steps.to_string());
    kv("n_cfd", ledger.n_cfd.to_string());
    kv("n_ml", ledger.n_ml.to_string());
    kv("n_switch", ledger.n_switch.to_string());
    kv("n_tl", ledger.n_tl.to_string());
    kv("t_cfd", format!("{:.6}", ledger.t_cfd()));
    kv("t_ml", format!("{:.6}", ledger.t_ml()));
    kv("t_up", format!("{:.6}", ledger.t_up()));
    kv("wall_s", format!("{:.3}", ledger.wall_time.as_secs_f64()));
    kv("bucket_s", format!("{:.3}", ledger.bucket_seconds()));
    kv(
        "initial_training_s",
        format!("{:.3}", ledger.initial_training_time.as_secs_f64()),
    );
    kv("psi", format!("{:.4}", ledger.speedup(total_steps)));
    kv(
        "mean_steps_per_switch",
        format!("{:.3}", ledger.mean_steps_per_switch()),
    );
    kv(
        "max_accepted_r_rel",
        format!("{:.4}", ledger.max_accepted_ml_residual()),
    );
    let forced = ledger
        .rollouts
        .iter()
        .filter(|r| r.end == RolloutEnd::NonFinite)
        .count();
    kv("forced_switches", forced.to_string());
    let fallbacks = ledger.flux_corrections.iter().filter(|f| f.fallback).count();
    kv("flux_fallbacks", fallbacks.to_string());
    if let Some(r) = ledger.reference {
        kv("reference_residual", format!("{:.6e}", r.value));
    }
    if let Some(reason) = aborted {
        kv("aborted", format!("{reason:?}"));
    }
    s
}

fn write_ledger_files(dir: &Path, ledger: &HybridLedger) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("rollouts.csv"))?;
    w.write_record(["start_step", "length", "end", "degenerate_reference"])?;
    for r in &ledger.rollouts {
        let end = match r.end {
            RolloutEnd::Threshold => "threshold",
            RolloutEnd::NonFinite => "non_finite",
            RolloutEnd::Budget => "budget",
        };
        w.write_record([
            r.start_step.to_string(),
            r.length.to_string(),
            end.to_string(),
            r.degenerate_reference.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("residuals.csv"))?;
    w.write_record(["step", "source", "r_rel"])?;
    for e in &ledger.residual_trace {
        let src = match e.source {
            StepSource::Cfd => "cfd",
            StepSource::Ml => "ml",
        };
        w.write_record([e.step.to_string(), src.to_string(), e.r_rel.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn hybrid_cmd(config: &Path, pretrained: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let case = load_config(config)?;
    let stage = Staged::create(output_dir(&case, out, "hybrid"))?;
    let mut solver = CfdSolver::new(&case.grid, &case.physics)?;
    let (mut model, start) = match &pretrained {
        Some(path) => {
            let mut m = load_model(path).with_context(|| format!("loading {}", path.display()))?;
            if m.ndim != case.grid.ndim() {
                bail!("checkpoint is {}D, case is {}D", m.ndim, case.grid.ndim());
            }
            m.reseed(case.seed);
            (m, ModelStart::Pretrained)
        }
        None => (
            SurrogateModel::new(case.model, case.grid.ndim(), case.seed)?,
            ModelStart::Fresh,
        ),
    };
    let mut writer = RunWriter {
        dir: stage.partial.clone(),
        cadence: case.snapshot_cadence as u64,
        dt: case.physics.dt,
    };
    let outcome = hybrid_run(&mut solver, &mut model, start, &case.hybrid, &mut writer)?;
    let report = ledger_report(&outcome.ledger, case.hybrid.total_steps, outcome.aborted.as_deref());
    fs::write(stage.file("ledger.txt"), &report)?;
    write_ledger_files(&stage.partial, &outcome.ledger)?;
    if let Some(reason) = outcome.aborted {
        print!("{report}");
        bail!(
            "run aborted: {reason}; partial output left in {}",
            stage.partial.display()
        );
    }
    let dir = stage.commit()?;
    print!("{report}");
    println!("output: {}", dir.display());
    Ok(())
}

fn snapshot_steps(dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".snap"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            out.insert(step, path);
        }
    }
    Ok(out)
}

fn eval_cmd(truth_dir: &Path, pred_dir: &Path, out: &Path) -> Result<()> {
    let truth = snapshot_steps(truth_dir)?;
    let pred = snapshot_steps(pred_dir)?;
    let mut series: Option<ErrorSeries> = None;
    for (step, p) in &pred {
        let Some(t) = truth.get(step) else { continue };
        let (ts, _) = load_snapshot(t)?;
        let (ps, _) = load_snapshot(p)?;
        series
            .get_or_insert_with(|| ErrorSeries::new(ts.grid.ndim()))
            .push(&ts, &ps)
            .with_context(|| format!("step {step}"))?;
    }
    let Some(series) = series else {
        bail!(
            "no common snapshot steps between {} and {}",
            truth_dir.display(),
            pred_dir.display()
        );
    };
    write_file(out, |p| series.write_csv(fs::File::create(p)?))?;
    println!("{} compared steps written to {}", series.records.len(), out.display());
    Ok(())
}

fn sweep_cmd(config: &Path, epochs: &[usize], thresholds: &[f64], out: Option<PathBuf>) -> Result<()> {
    let case = load_config(config)?;
    let stage = Staged::create(output_dir(&case, out, "sweep"))?;
    let mut solver = CfdSolver::new(&case.grid, &case.physics)?;
    let truth = GroundTruth::record(&mut solver, case.hybrid.total_steps, case.snapshot_cadence)?;
    let mut model = SurrogateModel::new(case.model, case.grid.ndim(), case.seed)?;
    initial_fit(
        &mut CfdSolver::new(&case.grid, &case.physics)?,
        &mut model,
        &case.hybrid,
    )?;
    let combos: Vec<(usize, f64)> = epochs
        .iter()
        .flat_map(|&e| thresholds.iter().map(move |&t| (e, t)))
        .collect();
    let setup = SweepSetup {
        grid: &case.grid,
        params: &case.physics,
        base: &case.hybrid,
        model: &model,
        truth: &truth,
    };
    let rows = benchmark_sweep(&setup, &combos)?;
    write_sweep_csv(&rows, fs::File::create(stage.file("sweep.csv"))?)?;
    let dir = stage.commit()?;
    for r in &rows {
        println!(
            "epochs {:>3} res {:>6}: n_switch {:>5} psi {:.3} MAE(T) {:.4e}",
            r.epochs, r.res, r.n_switch, r.psi, r.mae_t
        );
    }
    println!("output: {}", dir.display());
    Ok(())
}

fn parse_point(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad probe coordinate `{v}`"))
        })
        .collect()
}

fn probe_cmd(dir: &Path, points: &[String], out: &Path) -> Result<()> {
    let steps = snapshot_steps(dir)?;
    let Some(first) = steps.values().next() else {
        bail!("no snapshots in {}", dir.display());
    };
    let (s0, _) = load_snapshot(first)?;
    let probes = if points.is_empty() {
        centerline_probes(&s0.grid)
    } else {
        points.iter().map(|p| parse_point(p)).collect::<Result<Vec<_>>>()?
    };
    let ndim = s0.grid.ndim();
    write_file(out, |path| {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string(), "time".to_string(), "probe".to_string()];
        header.extend((0..ndim).map(|a| format!("x{a}")));
        header.push("T".into());
        header.extend((0..ndim).map(|a| format!("u{a}")));
        w.write_record(&header)?;
        for p in steps.values() {
            let (state, _) = load_snapshot(p)?;
            for (i, r) in probe_sample(&state, &probes)?.iter().enumerate() {
                let mut row = vec![state.step.to_string(), state.time.to_string(), i.to_string()];
                row.extend(probes[i].iter().map(f64::to_string));
                row.push(r.t.to_string());
                row.extend(r.u.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    println!(
        "{} probes over {} snapshots written to {}",
        probes.len(),
        steps.len(),
        out.display()
    );
    Ok(())
}
