//! GPT-style decoder-only transformer.
//!
//! Blocks are pre-norm residual units:
//!
//! ```text
//! z_attn = x + MHA(LN1(x))
//! z_ffn  = z_attn + MLP(LN2(z_attn))
//! ```
//!
//! Every linear layer stores its weight as `[out, in]`, so masks and N:M
//! groups run along the last (input) axis.

mod block;
mod checkpoint;
mod eval;

pub use block::{BlockTrace, BlockVars, LayerNormParams, Linear, LinearVars, NormVars, TransformerBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{mean_log_loss, perplexity, EVAL_BATCH};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Feed-forward flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    /// `down(silu(up(x)))`
    Standard,
    /// `down(silu(gate(x)) * up(x))`, the llama-style three-matrix MLP.
    #[serde(alias = "llama")]
    Gated,
}

impl std::str::FromStr for MlpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(MlpKind::Standard),
            "gated" | "llama" => Ok(MlpKind::Gated),
            other => Err(Error::Config(format!("unknown mlp kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mlp: MlpKind,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            mlp: MlpKind::Standard,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNormParams,
    pub head: Linear,
}

/// Tape handles for every model parameter.
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_f: NormVars,
    pub head: LinearVars,
}

impl ModelVars {
    /// Handles in [`LanguageModel::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.extend([self.ln_f.gamma, self.ln_f.beta, self.head.weight, self.head.bias]);
        out
    }
}

pub(crate) fn block_prefix(index: usize) -> String {
    format!("blocks.{index}.")
}

impl LanguageModel {
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = Tensor::randn(&[config.vocab_size, d], 0.02, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], 0.02, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| TransformerBlock::new_random(&config, &mut rng))
            .collect();
        let head = Linear {
            weight: Tensor::randn(&[config.vocab_size, d], 0.02, &mut rng),
            bias: Tensor::zeros(&[config.vocab_size]),
        };
        Ok(LanguageModel {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNormParams::identity(d),
            head,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = block_prefix(i);
            out.extend(b.named().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        out.push(("ln_f.gamma".into(), &self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &self.ln_f.beta));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = block_prefix(i);
            out.extend(
                b.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}{n}"), t)),
            );
        }
        out.push(("ln_f.gamma".into(), &mut self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &mut self.ln_f.beta));
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Names of the weight matrices that pruning may mask (biases, norms,
    /// embeddings and the output head are never masked).
    pub fn maskable_weight_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                let prefix = block_prefix(i);
                b.linear_names()
                    .into_iter()
                    .map(move |n| format!("{prefix}{n}.weight"))
            })
            .collect()
    }

    /// Bitwise equality of every parameter.
    pub fn bit_eq(&self, other: &LanguageModel) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        self.config == other.config
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable));
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        drop(leaf);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.bind(tape, |_| trainable))
            .collect();
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable));
        let ln_f = NormVars {
            gamma: leaf(&self.ln_f.gamma),
            beta: leaf(&self.ln_f.beta),
        };
        let head = LinearVars {
            weight: leaf(&self.head.weight),
            bias: leaf(&self.head.bias),
        };
        ModelVars {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        }
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Contract(format!(
                "{} tokens cannot form {batch} equal rows",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(seq)
    }

    /// Token plus position embeddings, `[batch, seq, d]`.
    pub fn embed_on_tape(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[usize], batch: usize) -> Result<Var> {
        let seq = self.check_tokens(tokens, batch)?;
        let tok = tape.embedding(vars.tok_emb, tokens)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.embedding(vars.pos_emb, &positions)?;
        let x = tape.add(tok, pos)?;
        tape.reshape(x, &[batch, seq, self.config.d_model])
    }

    /// Final norm and output head, `[.., d] -> [.., V]`.
    pub fn head_on_tape(&self, tape: &mut Tape, vars: &ModelVars, hidden: Var) -> Result<Var> {
        let h = tape.layer_norm(hidden, vars.ln_f.gamma, vars.ln_f.beta, self.config.ln_eps)?;
        block::linear_on_tape(tape, &vars.head, h)
    }

    /// Logits `[batch, seq, V]` recorded on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[usize], batch: usize) -> Result<Var> {
        let mut x = self.embed_on_tape(tape, vars, tokens, batch)?;
        for (block, bv) in self.blocks.iter().zip(&vars.blocks) {
            x = block.forward_on_tape(tape, bv, x, self.config.ln_eps, true)?.out;
        }
        self.head_on_tape(tape, vars, x)
    }

    /// Logits `[batch, seq, V]` for row-major `tokens` holding `batch` rows.
    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let mut x = self.embed(tokens, batch)?;
        for block in &self.blocks {
            x = block.forward(&x, self.config.ln_eps, true)?;
        }
        self.head(&x)
    }

    pub fn embed(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_embeddings(&mut tape);
        let x = self.embed_on_tape(&mut tape, &vars, tokens, batch)?;
        Ok(tape.take_value(x))
    }

    pub fn head(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_embeddings(&mut tape);
        let h = tape.constant(hidden.clone());
        let logits = self.head_on_tape(&mut tape, &vars, h)?;
        Ok(tape.take_value(logits))
    }

    /// Binds only the non-block parameters; block handles are left empty.
    fn bind_embeddings(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            tok_emb: tape.constant(self.tok_emb.clone()),
            pos_emb: tape.constant(self.pos_emb.clone()),
            blocks: Vec::new(),
            ln_f: NormVars {
                gamma: tape.constant(self.ln_f.gamma.clone()),
                beta: tape.constant(self.ln_f.beta.clone()),
            },
            head: LinearVars {
                weight: tape.constant(self.head.weight.clone()),
                bias: tape.constant(self.head.bias.clone()),
            },
        }
    }

    /// Hidden states entering each block and leaving the last one:
    /// `out[0]` is the embedding, `out[l + 1]` is the output of block `l`.
    pub fn hidden_states(&self, tokens: &[usize], batch: usize) -> Result<Vec<Tensor>> {
        let mut states = vec![self.embed(tokens, batch)?];
        for block in &self.blocks {
            let next = block.forward(states.last().expect("non-empty"), self.config.ln_eps, true)?;
            states.push(next);
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> LanguageModel {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: layers,
            n_heads: 2,
            max_seq_len: 6,
            mlp: MlpKind::Standard,
            ln_eps: 1e-5,
        };
        LanguageModel::new_random(cfg, 3).unwrap()
    }

    #[test]
    fn zero_depth_model_is_embed_norm_head() {
        let m = tiny(0);
        let tokens = [1, 4, 2];
        let logits = m.forward(&tokens, 1).unwrap();
        let direct = m.head(&m.embed(&tokens, 1).unwrap()).unwrap();
        assert!(logits.bit_eq(&direct));
    }

    #[test]
    fn single_token_shape() {
        let m = tiny(2);
        let logits = m.forward(&[5], 1).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 11]);
    }

    #[test]
    fn equal_batches_give_identical_logits() {
        let m = tiny(2);
        let a = m.forward(&[1, 2, 3, 4], 2).unwrap();
        let b = m.forward(&[1, 2, 3, 4], 2).unwrap();
        assert!(a.bit_eq(&b));
        let rows = a.unstack();
        let single = m.forward(&[1, 2], 1).unwrap();
        assert!(rows[0].max_abs_diff(&single.unstack()[0]) < 1e-12);
    }

    #[test]
    fn out_of_range_token_is_a_vocabulary_error() {
        let m = tiny(1);
        assert!(matches!(
            m.forward(&[1, 11], 1),
            Err(Error::Vocabulary { id: 11, vocab: 11 })
        ));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let m = tiny(1);
        assert!(m.forward(&[1; 7], 1).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn maskable_names_cover_every_block_linear() {
        let m = tiny(2);
        let names = m.maskable_weight_names();
        assert_eq!(names.len(), 12);
        assert_eq!(names[0], "blocks.0.attn.q.weight");
        assert!(names.iter().all(|n| m.tensor(n).is_some()));
    }
}
