use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tdaf_core::gradsuite::{composed_check, op_suite};
use tdaf_core::BackboneKind;
use tdaf_harness::attention::{attention_localization_score, export_attention};
use tdaf_harness::audit::audit;
use tdaf_harness::data::{synthetic_split, write_synthetic};
use tdaf_harness::train::{build_model, evaluate, load_datasets, normalization, train};
use tdaf_harness::{Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "tdaf", version, about = "Recursive top-down attention networks on a CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `section.key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics plus best/final checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every op and the composed model.
    Gradcheck,
    /// Parameter audit with attention overhead against the single-flow baseline.
    Params(Common),
    /// Write attention maps of one test image as PGM files.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-set sample to export.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Generate the synthetic saliency set in record format.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let (train_set, test_set) = load_datasets(&cfg)?;
            let outcome = train(&cfg, &train_set, &test_set, Some(&cfg.out_dir))?;
            let s = &outcome.summary;
            println!(
                "train ok seed={} epochs={} steps={} first_loss={} last_loss={} best_test_acc={} best_epoch={} final_test_acc={} out={}",
                cfg.seed,
                s.epochs,
                s.steps,
                s.first_loss,
                s.last_loss,
                s.best_test_acc,
                s.best_epoch,
                s.final_test_acc,
                cfg.out_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let (_, test_set) = load_datasets(&cfg)?;
            let mut model = build_model(&cfg)?;
            Checkpoint::load(&checkpoint)?.restore(&mut model.store)?;
            let r = evaluate(&mut model, &test_set, &normalization(&cfg), cfg.eval_batch_size)?;
            println!(
                "eval ok samples={} correct={} accuracy={} mean_loss={}",
                r.samples, r.correct, r.accuracy, r.mean_loss
            );
        }
        Command::Gradcheck => {
            let mut reports = op_suite()?;
            for kind in [BackboneKind::TinyResnet, BackboneKind::TinyVgg] {
                reports.push((format!("composed {kind}"), composed_check(kind, 3)?));
            }
            let mut failing = 0;
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            for (name, r) in &reports {
                eprintln!("{name}: {r}");
                failing += usize::from(!r.passed());
                worst = worst.max(r.max_rel_err());
                checked += r.checked();
            }
            println!(
                "gradcheck {} suites={} entries={checked} max_rel_err={worst:e} failing={failing}",
                if failing == 0 { "ok" } else { "failed" },
                reports.len()
            );
            return Ok(failing == 0);
        }
        Command::Params(common) => {
            let cfg = common.resolve()?;
            let a = audit(&cfg)?;
            if !a.consistent() {
                bail!("constructed counts disagree with closed forms: {a:?}");
            }
            println!(
                "params ok total={} stages={} attention={} attention_analytic={} attention_modules={} head={} baseline_total={} overhead_pct={:.3}",
                a.total, a.stages, a.attention, a.attention_analytic, a.attention_modules, a.head, a.baseline_total, a.overhead_pct
            );
        }
        Command::ExportAttn {
            common,
            checkpoint,
            index,
        } => {
            let cfg = common.resolve()?;
            let (_, test_set) = load_datasets(&cfg)?;
            let mut model = build_model(&cfg)?;
            Checkpoint::load(&checkpoint)?.restore(&mut model.store)?;
            let norm = normalization(&cfg);
            let files = export_attention(&mut model, &test_set, index, &norm, &cfg.out_dir)?;
            let score = if test_set.patches.is_some() {
                attention_localization_score(&mut model, &test_set, &norm, cfg.eval_batch_size)?.to_string()
            } else {
                "na".into()
            };
            println!(
                "export-attn ok files={} sample={index} localization={score} out={}",
                files.len(),
                cfg.out_dir.display()
            );
        }
        Command::GenData { seed, out, train, test } => {
            let (a, b) = synthetic_split(seed, train, test)?;
            write_synthetic(&out, &a, &b)?;
            println!("gen-data ok seed={seed} train={} test={} out={}", a.len(), b.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
