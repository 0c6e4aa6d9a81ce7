//! Command-line entry point.
//!
//! Every command resolves a [`RunConfig`], writes its outputs under `--out`
//! with the config's short hash in each file name, and finishes with a
//! `run.json` manifest that can be passed back as `--config` to rerun it.
//!
//! Exit codes: 0 on success, 1 on a usage or config error, 2 on a runtime
//! failure (including a failed gradient check).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{
    convergence_trace, gradient_suite, gradients_to_csv, init_sensitivity, lambda_sweep, loss_distribution_by_iou,
    svg, sweep_to_csv, ConvergenceTrace, LossKind,
};
use crate::config::{Manifest, RunConfig};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::nn::Checkpoint;
use crate::toydet::{comparison_to_csv, run_strategy_comparison, train, TrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "uniweight", version, about = "Sample weighting for region-based detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config, or a `run.json` manifest to rerun.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-key override, e.g. `train.schedule.epochs=3` (repeatable).
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train one detector with the configured strategy.
    Train,
    /// Train each configured strategy on identical data streams.
    Compare,
    /// Check every analytic gradient against central differences.
    Gradcheck,
    /// Train once and report loss share by IoU and convergence traces.
    Analyze,
    /// Train the weighting network once per lambda.
    Sweep,
    /// Train the weighting network once per initial head bias.
    Sensitivity,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Compare => "compare",
            Command::Gradcheck => "gradcheck",
            Command::Analyze => "analyze",
            Command::Sweep => "sweep",
            Command::Sensitivity => "sensitivity",
        }
    }
}

/// Collects output files and writes them under one directory.
struct Outputs {
    dir: PathBuf,
    hash: String,
    files: Vec<String>,
}

impl Outputs {
    fn write(&mut self, stem: &str, ext: &str, body: &str) -> Result<()> {
        let name = format!("{stem}_{}.{ext}", self.hash);
        std::fs::write(self.dir.join(&name), body)?;
        self.files.push(name);
        Ok(())
    }
}

fn trace_chart(title: &str, tr: &ConvergenceTrace) -> String {
    let pts = |ys: &[f64]| tr.iter.iter().zip(ys).map(|(&x, &y)| (x as f64, y)).collect::<Vec<_>>();
    svg::line_chart(title, &[("w_cls", pts(&tr.w_cls)), ("w_reg", pts(&tr.w_reg)), ("l_cls", pts(&tr.l_cls)), ("l_reg", pts(&tr.l_reg))])
}

fn write_training(out: &mut Outputs, cfg: &RunConfig, run: &TrainOutcome) -> Result<()> {
    out.write("history", "csv", &run.history.to_csv())?;
    out.write("epochs", "csv", &run.history.epochs_to_csv())?;
    if !run.history.iters.is_empty() {
        let tr = convergence_trace(&run.history, cfg.experiments.smoothing_width)?;
        out.write("trace", "csv", &tr.to_csv())?;
        out.write("trace", "svg", &trace_chart("weights and losses", &tr))?;
    }
    let mut ck = Checkpoint::default();
    run.detector.write_checkpoint(&mut ck, "det");
    run.swn.write_checkpoint(&mut ck, "swn");
    out.write("checkpoint", "txt", &ck.to_text())
}

fn histograms_csv(run: &TrainOutcome) -> String {
    let mut s = String::from("loss,epoch,lo,hi,count,percent\n");
    let h = &run.history;
    for (kind, name) in [(LossKind::Cls, "cls"), (LossKind::Reg, "reg")] {
        for (records, epoch) in [(&h.first_epoch_positives, "first"), (&h.last_epoch_positives, "last")] {
            let hist = loss_distribution_by_iou(records, kind, true);
            for k in 0..hist.percent.len() {
                s.push_str(&format!(
                    "{name},{epoch},{},{},{},{}\n",
                    sig9(hist.edges[k]),
                    sig9(hist.edges[k + 1]),
                    hist.counts[k],
                    sig9(hist.percent[k])
                ));
            }
        }
    }
    s
}

fn execute(cmd: Command, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let x = &cfg.experiments;
    match cmd {
        Command::Train => {
            let run = train(&cfg.train)?;
            if let Some(e) = run.history.final_eval() {
                println!("final AP {:.4} (AP50 {:.4}, AP75 {:.4})", e.ap, e.ap50, e.ap75);
            }
            write_training(out, cfg, &run)?;
        }
        Command::Analyze => {
            let run = train(&cfg.train)?;
            write_training(out, cfg, &run)?;
            out.write("loss_by_iou", "csv", &histograms_csv(&run))?;
            let last = loss_distribution_by_iou(&run.history.last_epoch_positives, LossKind::Cls, true);
            let labels: Vec<String> = last.edges.windows(2).map(|w| format!("{:.1}-{:.1}", w[0], w[1])).collect();
            out.write("loss_by_iou", "svg", &svg::bar_chart("weighted cls loss share by IoU, last epoch", &labels, &last.percent))?;
        }
        Command::Compare => {
            let rows = run_strategy_comparison(&cfg.train, &x.strategies)?;
            for r in &rows {
                println!("{:>6}  AP {:.4}  AP50 {:.4}  AP75 {:.4}", r.strategy.to_string(), r.ap, r.ap50, r.ap75);
            }
            out.write("compare", "csv", &comparison_to_csv(&rows))?;
            let labels: Vec<String> = rows.iter().map(|r| r.strategy.to_string()).collect();
            let aps: Vec<f64> = rows.iter().map(|r| r.ap).collect();
            out.write("compare", "svg", &svg::bar_chart("held-out AP", &labels, &aps))?;
        }
        Command::Sweep => {
            let rows = lambda_sweep(&cfg.train, &x.lambdas)?;
            out.write("sweep", "csv", &sweep_to_csv(&rows))?;
            let pts = rows.iter().map(|r| (r.lambda, r.ap)).collect();
            out.write("sweep", "svg", &svg::line_chart("AP by lambda", &[("AP", pts)]))?;
        }
        Command::Sensitivity => {
            let rep = init_sensitivity(&cfg.train, &x.biases, x.sensitivity_iters, x.smoothing_width)?;
            println!("relative gap at iteration {}: {:.4}", rep.at_iter, rep.relative_gap());
            out.write("sensitivity", "csv", &rep.to_csv())?;
            let mut traces = String::from("bias,iter,w_cls,w_reg\n");
            let mut series = Vec::new();
            let names: Vec<String> = rep.biases.iter().map(|b| format!("bias {b}")).collect();
            for ((b, tr), name) in rep.biases.iter().zip(&rep.traces).zip(&names) {
                for i in 0..tr.iter.len() {
                    traces.push_str(&format!("{},{},{},{}\n", sig9(*b), tr.iter[i], sig9(tr.w_cls[i]), sig9(tr.w_reg[i])));
                }
                series.push((name.as_str(), tr.iter.iter().zip(&tr.w_cls).map(|(&i, &w)| (i as f64, w)).collect()));
            }
            out.write("sensitivity_traces", "csv", &traces)?;
            out.write("sensitivity", "svg", &svg::line_chart("averaged cls weight by initial bias", &series))?;
        }
        Command::Gradcheck => {
            let rows = gradient_suite(&cfg.train, x.gradcheck_probes)?;
            for r in &rows {
                println!(
                    "{:<16} checked {:>4}  max rel err {:.3e}  {}",
                    r.name,
                    r.report.checked,
                    r.report.max_rel_err,
                    if r.report.passed() { "ok" } else { "FAILED" }
                );
            }
            out.write("gradcheck", "csv", &gradients_to_csv(&rows))?;
            if let Some(bad) = rows.iter().find(|r| !r.report.passed()) {
                return Err(Error::InvalidArgument(format!("gradient check failed for {}", bad.name)));
            }
        }
    }
    Ok(())
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    match &cli.config {
        Some(p) => RunConfig::load(p, &overrides),
        None => RunConfig::from_toml_str("", &overrides),
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli).and_then(|c| prepare_dir(&cli.out).map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut out = Outputs {
        dir: cli.out.clone(),
        hash: cfg.short_hash(),
        files: Vec::new(),
    };
    let result = execute(cli.command, &cfg, &mut out).and_then(|_| {
        let manifest = Manifest::new(cli.command.name(), &cfg, out.files.clone());
        std::fs::write(out.dir.join("run.json"), manifest.to_json())?;
        Ok(())
    });
    match result {
        Ok(()) => {
            println!("wrote {} files to {}", out.files.len() + 1, out.dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
