//! Run configuration and the end-to-end stages: pretrain, prune, fine-tune,
//! evaluate, compare and sweep.

use crate::baselines::{compare_strategies, lsq_finetune_model, mask_tune_model, stream_block_losses, CompareConfig, ComparisonReport, LsqSolveStats, MaskTuneReport};
use crate::data::{calibration_sweep, sample_calibration, split_eval, CalibrationSet, Corpus, SweepReport};
use crate::ebft::{finetune_model, FineTuneConfig, FineTuneReport, TeacherPropagation};
use crate::error::{Error, Result};
use crate::model::{perplexity, LanguageModel, MlpKind, ModelConfig};
use crate::pruning::{prune_model, Criterion, LayerSparsity, MaskPattern, MaskTable, PruneOutcome};
use crate::tensor::{Optimizer, OptimizerKind, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ebft,
    Lsq,
    Mask,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ebft" => Ok(Strategy::Ebft),
            "lsq" => Ok(Strategy::Lsq),
            "mask" => Ok(Strategy::Mask),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected ebft, lsq or mask)"
            ))),
        }
    }
}

/// Every knob of a run. Missing keys take the defaults below; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mlp: MlpKind,
    pub ln_eps: f64,

    pub corpus: Option<PathBuf>,
    pub eval_fraction: f64,
    pub calib_samples: usize,
    pub calib_seq_len: usize,
    pub eval_seq_len: usize,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_seq_len: usize,
    pub pretrain_warmup: usize,

    pub criterion: Criterion,
    /// `unstructured`, `channel` or `N:M`.
    pub pattern: String,
    pub sparsity: f64,

    pub strategy: Strategy,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rel_tol: f64,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub teacher_propagation: TeacherPropagation,
    pub train_norms: bool,
    pub lsq_lambda: f64,

    pub sweep_sizes: Vec<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let ft = FineTuneConfig::default();
        RunConfig {
            vocab_size: model.vocab_size,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            max_seq_len: model.max_seq_len,
            mlp: model.mlp,
            ln_eps: model.ln_eps,
            corpus: None,
            eval_fraction: 0.1,
            calib_samples: 64,
            calib_seq_len: 128,
            eval_seq_len: 128,
            pretrain_steps: 600,
            pretrain_lr: 3e-3,
            pretrain_batch: 8,
            pretrain_seq_len: 128,
            pretrain_warmup: 30,
            criterion: Criterion::ActivationAware,
            pattern: "unstructured".into(),
            sparsity: 0.5,
            strategy: Strategy::Ebft,
            lr: ft.lr,
            epochs: ft.max_epochs,
            batch_size: ft.batch_size,
            rel_tol: ft.convergence_rel_tol,
            patience: ft.convergence_patience,
            optimizer: ft.optimizer,
            teacher_propagation: ft.teacher_propagation,
            train_norms: ft.train_norms,
            lsq_lambda: 0.0,
            sweep_sizes: vec![8, 16, 32, 64],
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Turns a flat `key = value` text into JSON: values that parse as JSON keep
/// their type, comma lists become arrays, anything else is a string.
pub fn parse_flat(text: &str) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(key.to_string(), flat_value(value.trim())).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(map)
}

/// Interprets one scalar override the same way the flat file format does.
pub fn flat_value(s: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(s) {
        return v;
    }
    if s.contains(',') {
        return Value::Array(s.split(',').map(|p| flat_value(p.trim())).collect());
    }
    Value::String(s.to_string())
}

impl RunConfig {
    /// Builds a config from an optional file (flat or JSON), then the
    /// `EBFT_SEED` value, then explicit overrides, and validates it.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut map = match file {
            None => Map::new(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                if text.trim_start().starts_with('{') {
                    match serde_json::from_str::<Value>(&text) {
                        Ok(Value::Object(m)) => m,
                        Ok(_) => return Err(Error::Config("JSON config must be an object".into())),
                        Err(e) => return Err(Error::Config(format!("invalid JSON config: {e}"))),
                    }
                } else {
                    parse_flat(&text)?
                }
            }
        };
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("EBFT_SEED must be an unsigned integer, got {seed:?}")))?;
            map.insert("seed".into(), Value::from(seed));
        }
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            mlp: self.mlp,
            ln_eps: self.ln_eps,
        }
    }

    pub fn mask_pattern(&self) -> Result<MaskPattern> {
        let p = match self.pattern.as_str() {
            "unstructured" => MaskPattern::Unstructured {
                sparsity: self.sparsity,
            },
            "channel" => MaskPattern::Channel {
                sparsity: self.sparsity,
            },
            nm => {
                let parsed = nm
                    .split_once(':')
                    .and_then(|(n, m)| Some((n.trim().parse().ok()?, m.trim().parse().ok()?)));
                let Some((n, m)) = parsed else {
                    return Err(Error::Config(format!(
                        "pattern must be unstructured, channel or N:M, got {nm:?}"
                    )));
                };
                MaskPattern::NM { n, m }
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            lr: self.lr,
            max_epochs: self.epochs,
            batch_size: self.batch_size,
            convergence_rel_tol: self.rel_tol,
            convergence_patience: self.patience,
            optimizer: self.optimizer,
            seed: self.seed,
            teacher_propagation: self.teacher_propagation,
            train_norms: self.train_norms,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            batch: self.pretrain_batch,
            seq_len: self.pretrain_seq_len,
            warmup: self.pretrain_warmup,
            seed: self.seed,
        }
    }

    pub fn compare_config(&self) -> CompareConfig {
        CompareConfig {
            finetune: self.finetune_config(),
            eval_seq_len: self.eval_seq_len,
            lsq_lambda: self.lsq_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.mask_pattern()?;
        self.finetune_config().validate()?;
        let fits = |what: &str, len: usize| {
            if len == 0 || len > self.max_seq_len {
                Err(Error::Config(format!(
                    "{what} must lie in 1..={}, got {len}",
                    self.max_seq_len
                )))
            } else {
                Ok(())
            }
        };
        fits("calib_seq_len", self.calib_seq_len)?;
        fits("pretrain_seq_len", self.pretrain_seq_len)?;
        fits("eval_seq_len", self.eval_seq_len)?;
        if self.eval_seq_len < 2 {
            return Err(Error::Config("eval_seq_len must be >= 2".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval_fraction must lie in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if self.calib_samples == 0 {
            return Err(Error::Config("calib_samples must be >= 1".into()));
        }
        if self.pretrain_batch == 0 {
            return Err(Error::Config("pretrain_batch must be >= 1".into()));
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return Err(Error::Config(format!("pretrain_lr must be > 0, got {}", self.pretrain_lr)));
        }
        if !(self.lsq_lambda >= 0.0) {
            return Err(Error::Config(format!("lsq_lambda must be >= 0, got {}", self.lsq_lambda)));
        }
        if self.sweep_sizes.is_empty() || self.sweep_sizes.contains(&0) {
            return Err(Error::Config("sweep_sizes must be non-empty and positive".into()));
        }
        if self.sweep_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "sweep_sizes must be strictly increasing, got {:?}",
                self.sweep_sizes
            )));
        }
        Ok(())
    }

    /// Reads the configured corpus file (raw bytes).
    pub fn load_corpus(&self) -> Result<Corpus> {
        let path = self
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("no corpus path configured".into()))?;
        let corpus = Corpus::from_file(path)?;
        if corpus.vocab_size > self.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary {} exceeds model vocab_size {}",
                corpus.vocab_size, self.vocab_size
            )));
        }
        Ok(corpus)
    }

    /// Train and eval splits of the configured corpus.
    pub fn corpora(&self) -> Result<(Corpus, Corpus)> {
        split_eval(&self.load_corpus()?, self.eval_fraction)
    }

    pub fn calibration(&self, train: &Corpus) -> Result<CalibrationSet> {
        sample_calibration(train, self.calib_samples, self.calib_seq_len, self.seed.wrapping_add(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Training cross-entropy of every step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Linear warmup followed by cosine decay to a tenth of the peak.
fn scheduled_lr(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = (step - cfg.warmup) as f64 / span;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Trains a fresh model by next-token cross-entropy on random windows.
pub fn pretrain(model_cfg: ModelConfig, corpus: &Corpus, cfg: &PretrainConfig) -> Result<(LanguageModel, PretrainReport)> {
    let started = Instant::now();
    let mut model = LanguageModel::new_random(model_cfg, cfg.seed)?;
    if cfg.seq_len == 0 || cfg.seq_len > model_cfg.max_seq_len {
        return Err(Error::Config(format!(
            "pretrain seq_len {} must lie in 1..={}",
            cfg.seq_len, model_cfg.max_seq_len
        )));
    }
    if corpus.len() < cfg.seq_len + 1 {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than one training window of {}",
            corpus.len(),
            cfg.seq_len + 1
        )));
    }
    if let Some(&id) = corpus.tokens.iter().find(|&&t| t >= model_cfg.vocab_size) {
        return Err(Error::Vocabulary {
            id,
            vocab: model_cfg.vocab_size,
        });
    }
    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, cfg.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7EA1);
    let offsets = corpus.len() - cfg.seq_len;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch * cfg.seq_len);
        let mut targets = Vec::with_capacity(cfg.batch * cfg.seq_len);
        for _ in 0..cfg.batch {
            let s = rng.random_range(0..offsets);
            inputs.extend_from_slice(&corpus.tokens[s..s + cfg.seq_len]);
            targets.extend_from_slice(&corpus.tokens[s + 1..s + cfg.seq_len + 1]);
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let diverged = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("pretraining diverged at step {step}: {msg}")),
            other => other,
        };
        let logits = model.forward_on_tape(&mut tape, &vars, &inputs, cfg.batch).map_err(diverged)?;
        let flat = tape.reshape(logits, &[cfg.batch * cfg.seq_len, model_cfg.vocab_size])?;
        let loss = tape.cross_entropy(flat, &targets).map_err(diverged)?;
        tape.backward(loss).map_err(diverged)?;
        let value = tape.value(loss).item();
        if let Some(&first) = losses.first() {
            if value > 2.0 * first {
                return Err(Error::Numeric(format!(
                    "pretraining diverged at step {step}: loss {value} vs initial {first}"
                )));
            }
        }
        losses.push(value);
        let grads: Vec<Vec<f64>> = vars
            .all()
            .into_iter()
            .map(|v| tape.grad(v).expect("parameter leaf").to_vec())
            .collect();
        drop(tape);
        optimizer.set_lr(scheduled_lr(cfg, step));
        let mut named = model.named_tensors_mut();
        let mut params: Vec<&mut crate::Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        optimizer.step(&mut params, &grad_refs)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("pretrain step {step}: loss {value:.4}");
        }
    }
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok((
        model,
        PretrainReport {
            steps: cfg.steps,
            losses,
            final_loss,
            seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Prunes with the configured criterion and pattern using a calibration
/// set drawn from `train`.
pub fn prune_stage(cfg: &RunConfig, model: &LanguageModel, calib: &CalibrationSet) -> Result<PruneOutcome> {
    prune_model(model, cfg.criterion, cfg.mask_pattern()?, Some(calib))
}

/// What a fine-tuning strategy reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum FinetuneSummary {
    Ebft(FineTuneReport),
    Lsq { layers: Vec<LsqSolveStats> },
    Mask { blocks: Vec<MaskTuneReport> },
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: LanguageModel,
    pub masks: MaskTable,
    pub summary: FinetuneSummary,
}

pub fn finetune_stage(
    cfg: &RunConfig,
    dense: &LanguageModel,
    sparse: &LanguageModel,
    masks: &MaskTable,
    calib: &CalibrationSet,
) -> Result<FinetuneOutcome> {
    if dense.config != sparse.config {
        return Err(Error::Config(format!(
            "dense and pruned checkpoints differ in hyperparameters: {:?} vs {:?}",
            dense.config, sparse.config
        )));
    }
    match cfg.strategy {
        Strategy::Ebft => {
            let (model, report) = finetune_model(dense, sparse, masks, calib, &cfg.finetune_config())?;
            Ok(FinetuneOutcome {
                model,
                masks: masks.clone(),
                summary: FinetuneSummary::Ebft(report),
            })
        }
        Strategy::Lsq => {
            let (model, layers) = lsq_finetune_model(dense, sparse, masks, calib, cfg.lsq_lambda)?;
            Ok(FinetuneOutcome {
                model,
                masks: masks.clone(),
                summary: FinetuneSummary::Lsq { layers },
            })
        }
        Strategy::Mask => {
            let (model, table, blocks) = mask_tune_model(dense, masks, calib, &cfg.finetune_config())?;
            Ok(FinetuneOutcome {
                model,
                masks: table,
                summary: FinetuneSummary::Mask { blocks },
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_log_loss: f64,
    pub eval_tokens: usize,
    /// Per-block reconstruction error against the reference model; empty
    /// without a reference.
    pub block_errors: Vec<f64>,
}

impl EvalReport {
    /// Aligned two-column text for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>14.6}\n", "perplexity", self.perplexity);
        out.push_str(&format!("{:<16} {:>14.6}\n", "mean_log_loss", self.mean_log_loss));
        out.push_str(&format!("{:<16} {:>14}\n", "eval_tokens", self.eval_tokens));
        for (l, e) in self.block_errors.iter().enumerate() {
            out.push_str(&format!("{:<16} {:>14.6e}\n", format!("block_{l}_error"), e));
        }
        out
    }
}

pub fn evaluate(
    model: &LanguageModel,
    reference: Option<&LanguageModel>,
    eval: &Corpus,
    calib: &CalibrationSet,
    seq_len: usize,
) -> Result<EvalReport> {
    let ppl = perplexity(model, &eval.tokens, seq_len)?;
    let block_errors = match reference {
        Some(r) => stream_block_losses(r, model, calib)?,
        None => Vec::new(),
    };
    Ok(EvalReport {
        perplexity: ppl,
        mean_log_loss: ppl.ln(),
        eval_tokens: eval.len(),
        block_errors,
    })
}

pub fn compare_stage(
    cfg: &RunConfig,
    dense: &LanguageModel,
    pruned: &PruneOutcome,
    calib: &CalibrationSet,
    eval: &Corpus,
) -> Result<ComparisonReport> {
    compare_strategies(dense, &pruned.model, &pruned.masks, calib, eval, &cfg.compare_config())
}

/// For every calibration size: prune with that set, fine-tune with EBFT and
/// measure held-out perplexity.
pub fn sweep_stage(cfg: &RunConfig, dense: &LanguageModel, train: &Corpus, eval: &Corpus) -> Result<SweepReport> {
    let pattern = cfg.mask_pattern()?;
    let ft = cfg.finetune_config();
    calibration_sweep(train, &cfg.sweep_sizes, cfg.calib_seq_len, cfg.seed.wrapping_add(1), |calib| {
        let pruned = prune_model(dense, cfg.criterion, pattern, Some(calib))?;
        let (model, _) = finetune_model(dense, &pruned.model, &pruned.masks, calib, &ft)?;
        let ppl = perplexity(&model, &eval.tokens, cfg.eval_seq_len)?;
        log::info!("sweep size {}: perplexity {ppl:.4}", calib.n_samples());
        Ok(ppl)
    })
}

/// Per-layer sparsity lines for terminals.
pub fn sparsity_table(layers: &[LayerSparsity]) -> String {
    let width = layers.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
    let mut out = format!("{:<width$} {:>10} {:>10} {:>9}\n", "layer", "total", "zeros", "sparsity");
    for l in layers {
        out.push_str(&format!(
            "{:<width$} {:>10} {:>10} {:>9.4}\n",
            l.name, l.total, l.zeros, l.achieved
        ));
    }
    out
}
