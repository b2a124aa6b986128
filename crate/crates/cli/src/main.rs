use clap::{Args, Parser, Subcommand};
use ebft::data::{split_eval, synthetic_text, Corpus};
use ebft::model::{load_checkpoint, save_checkpoint, Checkpoint, LanguageModel};
use ebft::pipeline::{self, RunConfig};
use ebft::pruning::{MaskTable, PruneOutcome};
use ebft::{Error, Result};
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ebft", version, about = "Prune small language models and repair them block by block")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic byte corpus generated from a small grammar.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the dense toy model; writes model.ckpt and pretrain.json.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Prune a dense checkpoint; writes pruned.ckpt with its masks.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Dense checkpoint (default: <out-dir>/model.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Unstructured sparsity.
        #[arg(long, group = "pattern_flag")]
        sparsity: Option<f64>,
        /// Semi-structured N:M pattern, e.g. 2:4.
        #[arg(long, group = "pattern_flag")]
        nm: Option<String>,
        /// Fraction of input channels to remove.
        #[arg(long, group = "pattern_flag")]
        channel: Option<f64>,
        /// magnitude or activation.
        #[arg(long)]
        criterion: Option<String>,
    },
    /// Fine-tune a pruned checkpoint; writes finetuned.ckpt and report.json.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: Pair,
        /// ebft, lsq or mask.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Held-out perplexity and, given a reference, per-block errors.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out-dir>/finetuned.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dense reference for block reconstruction errors.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run every fine-tuning strategy on the same pruned model; writes compare.json.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: Pair,
    },
    /// Calibration-size sweep; writes sweep.csv and sweep.json.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dense checkpoint (default: <out-dir>/model.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated calibration sizes, e.g. 8,16,32.
        #[arg(long)]
        sizes: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Pair {
    /// Dense checkpoint (default: <out-dir>/model.ckpt).
    #[arg(long)]
    dense: Option<PathBuf>,
    /// Pruned checkpoint with masks (default: <out-dir>/pruned.ckpt).
    #[arg(long)]
    pruned: Option<PathBuf>,
}

struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self> {
        let mut o = Overrides(Vec::new());
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            o.0.push((k.trim().to_string(), pipeline::flat_value(v.trim())));
        }
        o.path("out_dir", &common.out_dir);
        o.path("corpus", &common.corpus);
        o.put("seed", common.seed);
        Ok(o)
    }

    fn put<T: Into<Value>>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
    }

    fn path(&mut self, key: &str, p: &Option<PathBuf>) {
        self.put(key, p.as_ref().map(|p| p.display().to_string()));
    }

    fn resolve(&self, common: &Common) -> Result<RunConfig> {
        let env_seed = std::env::var("EBFT_SEED").ok();
        RunConfig::resolve(common.config.as_deref(), env_seed.as_deref(), &self.0)
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(LanguageModel, MaskTable)> {
    let ckpt = load_checkpoint(path)?;
    Ok((ckpt.to_model()?, ckpt.masks))
}

fn default_or(p: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.out_dir.join(name))
}

fn check_vocab(cfg: &RunConfig, corpus: &Corpus, model: &LanguageModel) -> Result<()> {
    if corpus.vocab_size > model.config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds the checkpoint's {} (config {})",
            corpus.vocab_size, model.config.vocab_size, cfg.vocab_size
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { out, bytes, seed } => {
            if bytes == 0 {
                return Err(Error::Config("--bytes must be positive".into()));
            }
            std::fs::write(&out, synthetic_text(seed, bytes))?;
            println!("wrote {} bytes to {}", bytes, out.display());
        }
        Command::Pretrain { common, steps } => {
            let mut o = Overrides::new(&common)?;
            o.put("pretrain_steps", steps);
            let cfg = o.resolve(&common)?;
            let (train, eval) = cfg.corpora()?;
            let (model, report) = pipeline::pretrain(cfg.model_config(), &train, &cfg.pretrain_config())?;
            let ppl = ebft::model::perplexity(&model, &eval.tokens, cfg.eval_seq_len)?;
            let path = out_path(&cfg, "model.ckpt")?;
            save_checkpoint(&model, None, &path)?;
            let metrics = serde_json::json!({
                "final_loss": report.final_loss,
                "eval_perplexity": ppl,
                "steps": report.steps,
                "seconds": report.seconds,
                "corpus_hash": train.hash(),
                "losses": report.losses,
            });
            write_json(&out_path(&cfg, "pretrain.json")?, &metrics)?;
            println!(
                "trained {} steps: loss {:.4}, eval perplexity {ppl:.4} -> {}",
                report.steps,
                report.final_loss,
                path.display()
            );
        }
        Command::Prune {
            common,
            model,
            sparsity,
            nm,
            channel,
            criterion,
        } => {
            let mut o = Overrides::new(&common)?;
            if let Some(s) = sparsity {
                o.put("pattern", Some("unstructured"));
                o.put("sparsity", Some(s));
            }
            if let Some(nm) = nm {
                o.put("pattern", Some(nm));
            }
            if let Some(s) = channel {
                o.put("pattern", Some("channel"));
                o.put("sparsity", Some(s));
            }
            o.put("criterion", criterion.map(|c| pipeline::flat_value(&c)));
            let cfg = o.resolve(&common)?;
            let (dense, _) = load_model(&default_or(&model, &cfg, "model.ckpt"))?;
            let (train, _) = cfg.corpora()?;
            check_vocab(&cfg, &train, &dense)?;
            let calib = cfg.calibration(&train)?;
            let PruneOutcome { model, masks, layers } = pipeline::prune_stage(&cfg, &dense, &calib)?;
            let path = out_path(&cfg, "pruned.ckpt")?;
            save_checkpoint(&model, Some(&masks), &path)?;
            print!("{}", pipeline::sparsity_table(&layers));
            println!("pattern {} -> {}", cfg.mask_pattern()?, path.display());
        }
        Command::Finetune {
            common,
            pair,
            strategy,
            lr,
            epochs,
        } => {
            let mut o = Overrides::new(&common)?;
            o.put("strategy", strategy);
            o.put("lr", lr);
            o.put("epochs", epochs);
            let cfg = o.resolve(&common)?;
            let (dense, sparse, masks) = load_pair(&pair, &cfg)?;
            let (train, eval) = cfg.corpora()?;
            check_vocab(&cfg, &train, &dense)?;
            let calib = cfg.calibration(&train)?;
            let before = ebft::model::perplexity(&sparse, &eval.tokens, cfg.eval_seq_len)?;
            let outcome = pipeline::finetune_stage(&cfg, &dense, &sparse, &masks, &calib)?;
            let after = ebft::model::perplexity(&outcome.model, &eval.tokens, cfg.eval_seq_len)?;
            let path = out_path(&cfg, "finetuned.ckpt")?;
            save_checkpoint(&outcome.model, Some(&outcome.masks), &path)?;
            write_json(&out_path(&cfg, "report.json")?, &outcome.summary)?;
            println!("perplexity {before:.4} (pruned) -> {after:.4} ({:?}) -> {}", cfg.strategy, path.display());
        }
        Command::Eval {
            common,
            model,
            reference,
        } => {
            let o = Overrides::new(&common)?;
            let cfg = o.resolve(&common)?;
            let (m, _) = load_model(&default_or(&model, &cfg, "finetuned.ckpt"))?;
            let reference = reference.as_deref().map(load_model).transpose()?.map(|(r, _)| r);
            let (train, eval) = cfg.corpora()?;
            check_vocab(&cfg, &train, &m)?;
            let calib = cfg.calibration(&train)?;
            let report = pipeline::evaluate(&m, reference.as_ref(), &eval, &calib, cfg.eval_seq_len)?;
            eprint!("{}", report.to_table());
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Compare { common, pair } => {
            let o = Overrides::new(&common)?;
            let cfg = o.resolve(&common)?;
            let (dense, sparse, masks) = load_pair(&pair, &cfg)?;
            let (train, eval) = cfg.corpora()?;
            check_vocab(&cfg, &train, &dense)?;
            let calib = cfg.calibration(&train)?;
            let pruned = PruneOutcome {
                model: sparse,
                masks,
                layers: Vec::new(),
            };
            let report = pipeline::compare_stage(&cfg, &dense, &pruned, &calib, &eval)?;
            write_json(&out_path(&cfg, "compare.json")?, &report)?;
            println!("{:<8} {:>12} {:>10}", "strategy", "perplexity", "seconds");
            for row in &report.rows {
                println!("{:<8} {:>12.4} {:>10.1}", row.name, row.perplexity, row.seconds);
            }
            for w in &report.warnings {
                println!("warning: {w}");
            }
        }
        Command::Sweep { common, model, sizes } => {
            let mut o = Overrides::new(&common)?;
            o.put("sweep_sizes", sizes.map(|s| pipeline::flat_value(&s)));
            let cfg = o.resolve(&common)?;
            let (dense, _) = load_model(&default_or(&model, &cfg, "model.ckpt"))?;
            let corpus = cfg.load_corpus()?;
            check_vocab(&cfg, &corpus, &dense)?;
            let (train, eval) = split_eval(&corpus, cfg.eval_fraction)?;
            let report = pipeline::sweep_stage(&cfg, &dense, &train, &eval)?;
            std::fs::write(out_path(&cfg, "sweep.csv")?, report.to_csv())?;
            write_json(&out_path(&cfg, "sweep.json")?, &report)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn load_pair(pair: &Pair, cfg: &RunConfig) -> Result<(LanguageModel, LanguageModel, MaskTable)> {
    let (dense, _) = load_model(&default_or(&pair.dense, cfg, "model.ckpt"))?;
    let pruned_path = default_or(&pair.pruned, cfg, "pruned.ckpt");
    let ckpt = load_checkpoint(&pruned_path)?;
    if ckpt.config != dense.config {
        return Err(Error::Config(format!(
            "{} and the dense checkpoint differ in hyperparameters",
            pruned_path.display()
        )));
    }
    let Checkpoint { masks, .. } = &ckpt;
    if masks.is_empty() {
        return Err(Error::Config(format!("{} carries no masks", pruned_path.display())));
    }
    let masks = masks.clone();
    Ok((dense, ckpt.to_model()?, masks))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Vocabulary { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
