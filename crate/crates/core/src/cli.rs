//! The `dtl-count` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, configuration
//! or input error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use crate::checkpoint::{read_density, Checkpoint};
use crate::config::ExperimentConfig;
use crate::datasets::{
    dataset_stems, generate_domain, image_seed, load_dataset, read_manifest, save_dataset, AnnotatedImage,
};
use crate::density::{render_density_map, DensityMap, DotAnnotations};
use crate::model::{full_model_grad_check, ModelConfig};
use crate::rng;
use crate::synthesis::Synthesis;
use crate::tensor::gradcheck::{check_op, REGISTERED_OPS};
use crate::transfer::{
    evaluate, pretrain_source, run_progressive_transfer, synthesize_target, train_direct, Ablation, StageRow,
    TransferOutcome,
};

/// Largest relative finite-difference error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_SEED: u64 = 17;

#[derive(Debug, Parser)]
#[command(
    name = "dtl-count",
    version,
    about = "Cross-domain cell counting with a disentangling dual-decoder network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML); without it the toy benchmark defaults apply.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// none, no_disentangle, no_synth, joint_finetune or direct.
    #[arg(long, global = true, value_name = "NAME")]
    pub ablation: Option<Method>,
    /// Threads for compositing and evaluation inference.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the source, few-shot target and target test datasets.
    Generate,
    /// Train on the source domain and write `source.ckpt`.
    Pretrain,
    /// Synthesize target images from a few annotated ones.
    Synthesize {
        /// Annotated target images; defaults to the configured few-shot set.
        few_dir: Option<PathBuf>,
    },
    /// Run progressive transfer or one of its variants; writes `final.ckpt` and `report.tsv`.
    Transfer,
    /// Count MAE of a checkpoint on an annotated dataset.
    Evaluate { checkpoint: PathBuf, dataset: PathBuf },
    /// Finite-difference check of every differentiable op and the full loss.
    Gradcheck,
    /// Combine the `report.tsv` of several run directories into one table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// generate, pretrain, synthesize, transfer and evaluate for every method and repeat.
    Bench,
}

/// A transfer variant or the direct baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Transfer(Ablation),
    Direct,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Transfer(a) => a.name(),
            Method::Direct => "direct",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        if s == "direct" {
            Ok(Method::Direct)
        } else {
            s.parse().map(Method::Transfer)
        }
    }
}

/// A check that ran and failed (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("verification failed: {0}")]
pub struct VerificationFailed(pub String);

/// Parse `args` (including the program name) and run the command. Normal
/// output goes to `out`, diagnostics to `err`; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            let _ = writeln!(err, "error: {msg}");
            exit_code(&e)
        }
    }
}

/// 1 for a failed verification, 2 for anything else.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        1
    } else {
        2
    }
}

/// The configuration a command runs with: file (or defaults) plus flags.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(w) = cli.workers {
        cfg.output.workers = w;
    }
    if let Some(Method::Transfer(a)) = cli.ablation {
        cfg.transfer.ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Command::Report { dirs } = &cli.command {
        let rows = collect_reports(dirs)?;
        write!(out, "{}", combined_tsv(&rows))?;
        if let Some(dir) = &cli.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("combined.tsv"), combined_tsv(&rows))?;
        }
        return Ok(());
    }
    if let Command::Gradcheck = &cli.command {
        return gradcheck(cli.seed.unwrap_or(GRADCHECK_SEED), GRADCHECK_TOLERANCE, out);
    }
    let cfg = resolve_config(cli)?;
    let method = cli.ablation.unwrap_or(Method::Transfer(cfg.transfer.ablation));
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, out),
        Command::Pretrain => cmd_pretrain(&cfg, out),
        Command::Synthesize { few_dir } => cmd_synthesize(&cfg, few_dir.as_deref(), out),
        Command::Transfer => cmd_transfer(&cfg, method, out),
        Command::Evaluate { checkpoint, dataset } => cmd_evaluate(&cfg, checkpoint, dataset, out),
        Command::Bench => cmd_bench(&cfg, out),
        Command::Report { .. } | Command::Gradcheck => unreachable!("handled above"),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn densities(items: &[AnnotatedImage], sigma: f64) -> crate::Result<Vec<DensityMap>> {
    items.iter().map(|a| render_density_map(&a.annotations, sigma)).collect()
}

const SPLITS: [&str; 3] = ["source", "target_few", "target_test"];

/// Generate the three splits under `dir` and point `cfg` at them.
fn generate_into(cfg: &mut ExperimentConfig, dir: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    writeln!(out, "{:<12} {:>7} {:>11} {:>10}", "split", "images", "count mean", "count std")?;
    for split in SPLITS {
        let (spec, n) = match split {
            "source" => (&cfg.source.domain, cfg.source.images),
            "target_few" => (&cfg.target.domain, cfg.target.few_images),
            _ => (&cfg.target.domain, cfg.target.test_images),
        };
        let seed = cfg.data_seed(split);
        let items = generate_domain(spec, n, seed)?;
        let seeds: Vec<u64> = (0..n).map(|i| image_seed(seed, i)).collect();
        let maps = densities(&items, cfg.training.sigma)?;
        save_dataset(&dir.join(split), &items, &seeds, Some(&maps))?;
        let counts: Vec<f64> = items.iter().map(|a| a.annotations.len() as f64).collect();
        let (mean, std) = mean_std(&counts);
        writeln!(out, "{split:<12} {n:>7} {mean:>11.2} {std:>10.2}")?;
    }
    cfg.target.name.get_or_insert_with(|| cfg.target.domain.name.clone());
    cfg.source.dir = Some(dir.join("source"));
    cfg.target.few_dir = Some(dir.join("target_few"));
    cfg.target.test_dir = Some(dir.join("target_test"));
    Ok(())
}

fn cmd_generate(cfg: &ExperimentConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let dir = cfg.output.dir.clone();
    generate_into(&mut cfg.clone(), &dir, out)?;
    cfg.write_resolved(&dir)?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn history_line(ckpt: &Checkpoint) -> String {
    match ckpt.meta.history.last() {
        Some(h) => format!(
            "epoch {} of {}: loss {:.5} (mse {:.5}, perceptual {:.5}), train MAE {:.3}",
            h.epoch + 1,
            h.stage,
            h.total,
            h.mse,
            h.perceptual,
            h.mae
        ),
        None => format!("no training epochs ({})", ckpt.meta.stage),
    }
}

fn cmd_pretrain(cfg: &ExperimentConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let source = cfg.source_data()?;
    let plan = cfg.plan(source, Vec::new(), Vec::new());
    let ckpt = pretrain_source(&plan)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("source.ckpt");
    ckpt.save(&path)?;
    cfg.write_resolved(dir)?;
    writeln!(out, "{}", history_line(&ckpt))?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

/// Write a synthesized set as a dataset directory, then re-read it and
/// check every stored density integral against its annotation count.
fn write_synthesis(synth: &Synthesis, dir: &Path) -> anyhow::Result<f64> {
    let items: Vec<AnnotatedImage> = synth
        .samples
        .iter()
        .map(|s| AnnotatedImage {
            image: s.image.clone(),
            annotations: s.annotations.clone(),
            style: Some(s.style.clone()),
        })
        .collect();
    let seeds: Vec<u64> = synth.samples.iter().map(|s| s.seed).collect();
    let maps: Vec<DensityMap> = synth.samples.iter().map(|s| s.density.clone()).collect();
    save_dataset(dir, &items, &seeds, Some(&maps))?;

    let mut worst = 0.0f64;
    for row in read_manifest(dir)? {
        let density = read_density(&dir.join("densities").join(format!("{}.dtlc", row.id)))?;
        let ann = DotAnnotations::read_csv(
            &dir.join("annotations").join(format!("{}.csv", row.id)),
            density.width,
            density.height,
        )?;
        let integral = density.count();
        let dev = (integral - ann.len() as f64).abs().max((row.count - ann.len() as f64).abs());
        worst = worst.max(dev);
        if dev > 1e-6 {
            return Err(VerificationFailed(format!(
                "sample {}: density integral {integral} vs {} annotations (manifest {})",
                row.id,
                ann.len(),
                row.count
            ))
            .into());
        }
    }
    Ok(worst)
}

fn cmd_synthesize(cfg: &ExperimentConfig, few_dir: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let few = match few_dir {
        Some(d) => load_dataset(d)?,
        None => cfg.target_few()?,
    };
    let plan = cfg.plan(Vec::new(), few, Vec::new());
    let synth = synthesize_target(&plan)?;
    let dir = cfg.output.dir.join("synthesized");
    let worst = write_synthesis(&synth, &dir)?;
    cfg.write_resolved(&cfg.output.dir)?;
    let counts: Vec<f64> = synth.samples.iter().map(|s| s.annotations.len() as f64).collect();
    let (mean, std) = mean_std(&counts);
    writeln!(
        out,
        "{} samples from {} annotated images ({} cell patches), count {mean:.2} +- {std:.2}",
        synth.samples.len(),
        plan.target_few.len(),
        synth.real_patches.len()
    )?;
    writeln!(out, "density integrals match annotation counts (max deviation {worst:.2e})")?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

pub const REPORT_HEADER: &str = "dataset\tn\tmethod\tstage\tepochs\tlr\ttrain_images\tmse\tperceptual\tmae";

pub fn report_tsv(dataset: &str, n: usize, method: Method, rows: &[StageRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{dataset}\t{n}\t{method}\t{}\t{}\t{:e}\t{}\t{:.6}\t{:.6}\t{:.4}\n",
            r.stage, r.epochs, r.learning_rate, r.train_images, r.mse, r.perceptual, r.mae
        ));
    }
    s
}

fn print_rows(rows: &[StageRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<10} {:>6} {:>8} {:>6} {:>10} {:>10} {:>8}",
        "stage", "epochs", "lr", "images", "mse", "perc", "MAE"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<10} {:>6} {:>8.0e} {:>6} {:>10.5} {:>10.5} {:>8.3}",
            r.stage.name(),
            r.epochs,
            r.learning_rate,
            r.train_images,
            r.mse,
            r.perceptual,
            r.mae
        )?;
    }
    Ok(())
}

fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    plan_data: (Vec<AnnotatedImage>, Vec<AnnotatedImage>, Vec<AnnotatedImage>),
    source: Option<&Checkpoint>,
    synthesized: Option<&Synthesis>,
) -> anyhow::Result<TransferOutcome> {
    let (src, few, test) = plan_data;
    let mut plan = cfg.plan(src, few, test);
    Ok(match method {
        Method::Direct => train_direct(&plan, cfg.training.direct_epochs)?,
        Method::Transfer(a) => {
            plan.ablation = a;
            run_progressive_transfer(&plan, source, synthesized)?
        }
    })
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, method: Method, n: usize, outcome: &TransferOutcome) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    outcome.checkpoint.save(&dir.join("final.ckpt"))?;
    fs::write(dir.join("report.tsv"), report_tsv(&cfg.target_name(), n, method, &outcome.rows))?;
    cfg.write_resolved(dir)?;
    Ok(())
}

fn cmd_transfer(cfg: &ExperimentConfig, method: Method, out: &mut dyn Write) -> anyhow::Result<()> {
    let source_ckpt = match (&cfg.transfer.source_checkpoint, method) {
        (Some(path), Method::Transfer(_)) => Some(Checkpoint::load(path)?),
        _ => None,
    };
    let source = match method {
        Method::Direct => Vec::new(),
        Method::Transfer(_) => cfg.source_data()?,
    };
    let few = cfg.target_few()?;
    let n = few.len();
    let outcome = run_method(cfg, method, (source, few, cfg.target_test()?), source_ckpt.as_ref(), None)?;
    let mut resolved = cfg.clone();
    if let Method::Transfer(a) = method {
        resolved.transfer.ablation = a;
    }
    write_run(&cfg.output.dir, &resolved, method, n, &outcome)?;
    writeln!(out, "method {method}, {n} annotated target images")?;
    print_rows(&outcome.rows, out)?;
    writeln!(out, "wrote {}", cfg.output.dir.display())?;
    Ok(())
}

fn evaluation_tsv(stems: &[String], per_image: &[(f64, f64)]) -> String {
    let mut s = String::from("id\ttruth\tpredicted\tabs_error\n");
    for (id, (t, p)) in stems.iter().zip(per_image) {
        s.push_str(&format!("{id}\t{t}\t{p:.4}\t{:.4}\n", (p - t).abs()));
    }
    s
}

fn cmd_evaluate(cfg: &ExperimentConfig, ckpt: &Path, dataset: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let test = load_dataset(dataset)?;
    let stems = dataset_stems(dataset)?;
    let eval = evaluate(&ckpt, &test, cfg.training.batch_size, cfg.output.workers)?;
    writeln!(out, "{:<8} {:>8} {:>10}", "id", "truth", "predicted")?;
    for (id, (t, p)) in stems.iter().zip(&eval.per_image) {
        writeln!(out, "{id:<8} {t:>8} {p:>10.3}")?;
    }
    writeln!(out, "MAE {:.4} over {} images", eval.mae, test.len())?;
    Ok(())
}

/// Print the per-op and full-model table; fails with [`VerificationFailed`]
/// when any error reaches `tolerance`.
pub fn gradcheck(seed: u64, tolerance: f64, out: &mut dyn Write) -> anyhow::Result<()> {
    writeln!(out, "{:<18} {:>7} {:>14}  status", "op", "checked", "max rel error")?;
    let mut failed = Vec::new();
    let mut line = |name: &str, checked: usize, err: f64, out: &mut dyn Write| -> std::io::Result<()> {
        let ok = err < tolerance;
        if !ok {
            failed.push(name.to_string());
        }
        writeln!(out, "{name:<18} {checked:>7} {err:>14.3e}  {}", if ok { "ok" } else { "FAIL" })
    };
    for name in REGISTERED_OPS {
        let r = check_op(name, seed, 1e-5)?;
        line(name, r.checked, r.max_rel_error, out)?;
    }
    let full = full_model_grad_check(&ModelConfig::tiny(), seed, 6)?;
    line("full_model_loss", full.checked, full.max_rel_error, out)?;
    if failed.is_empty() {
        writeln!(out, "all gradients within {tolerance:e}")?;
        Ok(())
    } else {
        Err(VerificationFailed(format!("relative error above {tolerance:e} for {}", failed.join(", "))).into())
    }
}

/// Final row of one run directory's `report.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dataset: String,
    pub n: usize,
    pub method: String,
    pub mae: f64,
    pub run: String,
}

fn read_run(dir: &Path) -> anyhow::Result<RunSummary> {
    let path = dir.join("report.tsv");
    if !path.is_file() {
        bail!("no report.tsv in {}", dir.display());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        bail!("{}: unexpected header", path.display());
    }
    let last = lines.last().with_context(|| format!("{}: no rows", path.display()))?;
    let cols: Vec<&str> = last.split('\t').collect();
    if cols.len() != REPORT_HEADER.split('\t').count() {
        bail!("{}: malformed row `{last}`", path.display());
    }
    Ok(RunSummary {
        dataset: cols[0].to_string(),
        n: cols[1].parse().with_context(|| format!("{}: bad n", path.display()))?,
        method: cols[2].to_string(),
        mae: cols[9].parse().with_context(|| format!("{}: bad mae", path.display()))?,
        run: dir.display().to_string(),
    })
}

/// One summary per directory, sorted by dataset, N, method, then run.
pub fn collect_reports(dirs: &[PathBuf]) -> anyhow::Result<Vec<RunSummary>> {
    let mut rows = dirs.iter().map(|d| read_run(d)).collect::<anyhow::Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        (&a.dataset, a.n, &a.method, &a.run).cmp(&(&b.dataset, b.n, &b.method, &b.run))
    });
    Ok(rows)
}

pub fn combined_tsv(rows: &[RunSummary]) -> String {
    let mut s = String::from("dataset\tn\tmethod\tmae\trun\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\t{:.4}\t{}\n", r.dataset, r.n, r.method, r.mae, r.run));
    }
    s
}

/// Methods `bench` runs, in order.
pub fn bench_methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let mut m = vec![Method::Transfer(Ablation::None)];
    if cfg.transfer.bench_ablations {
        m.extend([Ablation::NoDisentangle, Ablation::NoSynth, Ablation::JointFinetune].map(Method::Transfer));
    }
    m.push(Method::Direct);
    m
}

/// Mean final MAE per method over all repeats, in `bench_methods` order.
pub fn summarize(rows: &[RunSummary], methods: &[Method]) -> Vec<(Method, f64, Vec<f64>)> {
    methods
        .iter()
        .map(|&m| {
            let maes: Vec<f64> = rows.iter().filter(|r| r.method == m.name()).map(|r| r.mae).collect();
            (m, mean_std(&maes).0, maes)
        })
        .collect()
}

fn cmd_bench(cfg: &ExperimentConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let root = cfg.output.dir.clone();
    cfg.write_resolved(&root)?;
    let methods = bench_methods(cfg);
    let started = Instant::now();
    let mut run_dirs = Vec::new();
    for r in 0..cfg.transfer.bench_repeats {
        let mut rcfg = cfg.clone();
        rcfg.seed = rng::derive_named(cfg.seed, &format!("bench.{r}"));
        let rep = root.join(format!("rep{r}"));
        rcfg.output.dir = rep.clone();
        writeln!(out, "== repeat {r} (seed {}) ==", rcfg.seed)?;

        generate_into(&mut rcfg, &rep.join("data"), out)?;
        let (source_data, few, test) = (rcfg.source_data()?, rcfg.target_few()?, rcfg.target_test()?);
        let n = few.len();
        let base = rcfg.plan(source_data.clone(), few.clone(), test.clone());

        let mut sources = Vec::new();
        let needs_plain = methods.contains(&Method::Transfer(Ablation::NoDisentangle));
        for ablation in [Ablation::None, Ablation::NoDisentangle] {
            if ablation == Ablation::NoDisentangle && !needs_plain {
                continue;
            }
            let plan = crate::transfer::TransferPlan { ablation, ..base.clone() };
            let ckpt = pretrain_source(&plan)?;
            let path = rep.join(format!("source_{}.ckpt", ablation.name()));
            ckpt.save(&path)?;
            writeln!(out, "pretrain ({ablation}): {}", history_line(&ckpt))?;
            sources.push((ablation.disentangle(), ckpt, path));
        }

        let synth = synthesize_target(&base)?;
        let worst = write_synthesis(&synth, &rep.join("synthesized"))?;
        writeln!(out, "synthesized {} images (max density deviation {worst:.1e})", synth.samples.len())?;

        for &method in &methods {
            let dir = rep.join(method.name());
            let mut mcfg = rcfg.clone();
            mcfg.output.dir = dir.clone();
            let source = match method {
                Method::Transfer(a) => {
                    mcfg.transfer.ablation = a;
                    let (_, ckpt, path) = sources
                        .iter()
                        .find(|(d, _, _)| *d == a.disentangle())
                        .context("missing pretrained source")?;
                    mcfg.transfer.source_checkpoint = Some(path.clone());
                    Some(ckpt)
                }
                Method::Direct => None,
            };
            let outcome = run_method(&mcfg, method, (source_data.clone(), few.clone(), test.clone()), source, Some(&synth))?;
            write_run(&dir, &mcfg, method, n, &outcome)?;
            let eval = evaluate(&outcome.checkpoint, &test, rcfg.training.batch_size, rcfg.output.workers)?;
            let stems = dataset_stems(&rep.join("data").join("target_test"))?;
            fs::write(dir.join("evaluation.tsv"), evaluation_tsv(&stems, &eval.per_image))?;
            writeln!(out, "{:<15} test MAE {:>8.3}", method.name(), eval.mae)?;
            run_dirs.push(dir);
        }
    }
    let mut rows = collect_reports(&run_dirs)?;
    for row in &mut rows {
        if let Ok(rel) = Path::new(&row.run).strip_prefix(&root) {
            row.run = rel.display().to_string();
        }
    }
    fs::write(root.join("report.tsv"), combined_tsv(&rows))?;
    let summary = summarize(&rows, &methods);
    let mut tsv = String::from("method\trepeats\tmean_mae\tmaes\n");
    writeln!(out, "== summary over {} repeats ==", cfg.transfer.bench_repeats)?;
    writeln!(out, "{:<15} {:>9}", "method", "mean MAE")?;
    for (m, mean, maes) in &summary {
        let list: Vec<String> = maes.iter().map(|v| format!("{v:.4}")).collect();
        tsv.push_str(&format!("{m}\t{}\t{mean:.4}\t{}\n", maes.len(), list.join(",")));
        writeln!(out, "{:<15} {mean:>9.3}", m.name())?;
    }
    fs::write(root.join("summary.tsv"), tsv)?;
    writeln!(out, "elapsed {:.1} s", started.elapsed().as_secs_f64())?;
    writeln!(out, "wrote {}", root.display())?;
    Ok(())
}
