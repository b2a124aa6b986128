use super::{MlpKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Fill value for attention scores above the diagonal. Large enough that
/// `exp` underflows to exactly zero, small enough to stay finite.
const CAUSAL_FILL: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    fn random<R: Rng + ?Sized>(out: usize, inp: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[out, inp], std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// One decoder block: attention (q, k, v, o projections) and an MLP, each
/// behind its own layer norm and residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub n_heads: usize,
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub gate: Option<Linear>,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles for one block's parameters.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1: NormVars,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
    pub ln2: NormVars,
    pub gate: Option<LinearVars>,
    pub up: LinearVars,
    pub down: LinearVars,
}

impl BlockVars {
    /// Handles in [`TransformerBlock::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.ln1.gamma, self.ln1.beta];
        for l in [self.q, self.k, self.v, self.o] {
            out.extend([l.weight, l.bias]);
        }
        out.extend([self.ln2.gamma, self.ln2.beta]);
        if let Some(g) = self.gate {
            out.extend([g.weight, g.bias]);
        }
        for l in [self.up, self.down] {
            out.extend([l.weight, l.bias]);
        }
        out
    }

    pub fn linear(&self, name: &str) -> Option<LinearVars> {
        match name {
            "attn.q" => Some(self.q),
            "attn.k" => Some(self.k),
            "attn.v" => Some(self.v),
            "attn.o" => Some(self.o),
            "mlp.gate" => self.gate,
            "mlp.up" => Some(self.up),
            "mlp.down" => Some(self.down),
            _ => None,
        }
    }
}

/// Result of a recorded block forward: the output plus the input of every
/// linear layer, keyed by layer name.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub out: Var,
    pub attn_residual: Var,
    pub linear_inputs: Vec<(&'static str, Var)>,
}

impl BlockTrace {
    pub fn input_of(&self, layer: &str) -> Option<Var> {
        self.linear_inputs
            .iter()
            .find(|(n, _)| *n == layer)
            .map(|(_, v)| *v)
    }
}

pub(crate) fn linear_on_tape(tape: &mut Tape, l: &LinearVars, x: Var) -> Result<Var> {
    let wt = tape.transpose(l.weight, 0, 1)?;
    let y = tape.matmul(x, wt)?;
    tape.add(y, l.bias)
}

fn causal_mask(seq: usize) -> Tensor {
    Tensor::from_fn(&[seq, seq], |i| {
        if i % seq > i / seq {
            CAUSAL_FILL
        } else {
            0.0
        }
    })
}

impl TransformerBlock {
    pub fn new_random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let h = config.hidden_dim();
        let std = 0.02;
        // Residual-branch outputs are scaled down with depth.
        let proj_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        TransformerBlock {
            n_heads: config.n_heads,
            ln1: LayerNormParams::identity(d),
            q: Linear::random(d, d, std, rng),
            k: Linear::random(d, d, std, rng),
            v: Linear::random(d, d, std, rng),
            o: Linear::random(d, d, proj_std, rng),
            ln2: LayerNormParams::identity(d),
            gate: match config.mlp {
                MlpKind::Gated => Some(Linear::random(h, d, std, rng)),
                MlpKind::Standard => None,
            },
            up: Linear::random(h, d, std, rng),
            down: Linear::random(d, h, proj_std, rng),
        }
    }

    /// A block whose linear weights and biases are all zero.
    pub fn zeros(d: usize, hidden: usize, n_heads: usize, mlp: MlpKind) -> Self {
        TransformerBlock {
            n_heads,
            ln1: LayerNormParams::identity(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
            ln2: LayerNormParams::identity(d),
            gate: match mlp {
                MlpKind::Gated => Some(Linear::zeros(hidden, d)),
                MlpKind::Standard => None,
            },
            up: Linear::zeros(hidden, d),
            down: Linear::zeros(d, hidden),
        }
    }

    pub fn d_model(&self) -> usize {
        self.q.in_features()
    }

    /// Linear layer names in forward order.
    pub fn linear_names(&self) -> Vec<&'static str> {
        let mut names = vec!["attn.q", "attn.k", "attn.v", "attn.o"];
        if self.gate.is_some() {
            names.push("mlp.gate");
        }
        names.extend(["mlp.up", "mlp.down"]);
        names
    }

    pub fn linear(&self, name: &str) -> Option<&Linear> {
        match name {
            "attn.q" => Some(&self.q),
            "attn.k" => Some(&self.k),
            "attn.v" => Some(&self.v),
            "attn.o" => Some(&self.o),
            "mlp.gate" => self.gate.as_ref(),
            "mlp.up" => Some(&self.up),
            "mlp.down" => Some(&self.down),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Linear> {
        match name {
            "attn.q" => Some(&mut self.q),
            "attn.k" => Some(&mut self.k),
            "attn.v" => Some(&mut self.v),
            "attn.o" => Some(&mut self.o),
            "mlp.gate" => self.gate.as_mut(),
            "mlp.up" => Some(&mut self.up),
            "mlp.down" => Some(&mut self.down),
            _ => None,
        }
    }

    /// Tensors with block-local names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("ln1.gamma".into(), &self.ln1.gamma),
            ("ln1.beta".into(), &self.ln1.beta),
        ];
        for (n, l) in [("attn.q", &self.q), ("attn.k", &self.k), ("attn.v", &self.v), ("attn.o", &self.o)] {
            out.push((format!("{n}.weight"), &l.weight));
            out.push((format!("{n}.bias"), &l.bias));
        }
        out.push(("ln2.gamma".into(), &self.ln2.gamma));
        out.push(("ln2.beta".into(), &self.ln2.beta));
        if let Some(g) = &self.gate {
            out.push(("mlp.gate.weight".into(), &g.weight));
            out.push(("mlp.gate.bias".into(), &g.bias));
        }
        for (n, l) in [("mlp.up", &self.up), ("mlp.down", &self.down)] {
            out.push((format!("{n}.weight"), &l.weight));
            out.push((format!("{n}.bias"), &l.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("ln1.gamma".into(), &mut self.ln1.gamma),
            ("ln1.beta".into(), &mut self.ln1.beta),
        ];
        for (n, l) in [
            ("attn.q", &mut self.q),
            ("attn.k", &mut self.k),
            ("attn.v", &mut self.v),
            ("attn.o", &mut self.o),
        ] {
            out.push((format!("{n}.weight"), &mut l.weight));
            out.push((format!("{n}.bias"), &mut l.bias));
        }
        out.push(("ln2.gamma".into(), &mut self.ln2.gamma));
        out.push(("ln2.beta".into(), &mut self.ln2.beta));
        if let Some(g) = &mut self.gate {
            out.push(("mlp.gate.weight".into(), &mut g.weight));
            out.push(("mlp.gate.bias".into(), &mut g.bias));
        }
        for (n, l) in [("mlp.up", &mut self.up), ("mlp.down", &mut self.down)] {
            out.push((format!("{n}.weight"), &mut l.weight));
            out.push((format!("{n}.bias"), &mut l.bias));
        }
        out
    }

    pub fn bit_eq(&self, other: &TransformerBlock) -> bool {
        let a = self.named();
        let b = other.named();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    /// Puts every parameter on the tape; `trainable(name)` decides which
    /// ones receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BlockVars {
        let mut leaf = |name: String, t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable(&name)));
        let ln1 = NormVars {
            gamma: leaf("ln1.gamma".into(), &self.ln1.gamma),
            beta: leaf("ln1.beta".into(), &self.ln1.beta),
        };
        let mut lin = |name: &str, l: &Linear| LinearVars {
            weight: leaf(format!("{name}.weight"), &l.weight),
            bias: leaf(format!("{name}.bias"), &l.bias),
        };
        let q = lin("attn.q", &self.q);
        let k = lin("attn.k", &self.k);
        let v = lin("attn.v", &self.v);
        let o = lin("attn.o", &self.o);
        drop(lin);
        let ln2 = NormVars {
            gamma: leaf("ln2.gamma".into(), &self.ln2.gamma),
            beta: leaf("ln2.beta".into(), &self.ln2.beta),
        };
        let mut lin = |name: &str, l: &Linear| LinearVars {
            weight: leaf(format!("{name}.weight"), &l.weight),
            bias: leaf(format!("{name}.bias"), &l.bias),
        };
        let gate = self.gate.as_ref().map(|g| lin("mlp.gate", g));
        let up = lin("mlp.up", &self.up);
        let down = lin("mlp.down", &self.down);
        BlockVars {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            gate,
            up,
            down,
        }
    }

    /// Records the block on `tape`. `x` is `[batch, seq, d]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &BlockVars, x: Var, eps: f64, causal: bool) -> Result<BlockTrace> {
        let shape = tape.shape(x).to_vec();
        let d = self.d_model();
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::dim("block_forward", &shape, &[d]));
        }
        let (b, s) = (shape[0], shape[1]);
        let heads = self.n_heads;
        let hd = d / heads;

        let h1 = tape.layer_norm(x, vars.ln1.gamma, vars.ln1.beta, eps)?;
        let split = |tape: &mut Tape, t: Var| -> Result<Var> {
            let t = tape.reshape(t, &[b, s, heads, hd])?;
            tape.transpose(t, 1, 2)
        };
        let q = linear_on_tape(tape, &vars.q, h1)?;
        let k = linear_on_tape(tape, &vars.k, h1)?;
        let v = linear_on_tape(tape, &vars.v, h1)?;
        let q = split(tape, q)?;
        let k = split(tape, k)?;
        let v = split(tape, v)?;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        if causal {
            let mask = tape.constant(causal_mask(s));
            scores = tape.add(scores, mask)?;
        }
        let probs = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[b, s, d])?;
        let attn = linear_on_tape(tape, &vars.o, ctx)?;
        let z_attn = tape.add(x, attn)?;

        let h2 = tape.layer_norm(z_attn, vars.ln2.gamma, vars.ln2.beta, eps)?;
        let up = linear_on_tape(tape, &vars.up, h2)?;
        let act = match &vars.gate {
            Some(g) => {
                let gate = linear_on_tape(tape, g, h2)?;
                let gate = tape.silu(gate)?;
                tape.mul(gate, up)?
            }
            None => tape.silu(up)?,
        };
        let mlp = linear_on_tape(tape, &vars.down, act)?;
        let out = tape.add(z_attn, mlp)?;

        let mut linear_inputs = vec![("attn.q", h1), ("attn.k", h1), ("attn.v", h1), ("attn.o", ctx)];
        if vars.gate.is_some() {
            linear_inputs.push(("mlp.gate", h2));
        }
        linear_inputs.extend([("mlp.up", h2), ("mlp.down", act)]);
        Ok(BlockTrace {
            out,
            attn_residual: z_attn,
            linear_inputs,
        })
    }

    /// Plain forward without gradients.
    pub fn forward(&self, x: &Tensor, eps: f64, causal: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let trace = self.forward_on_tape(&mut tape, &vars, xv, eps, causal)?;
        Ok(tape.take_value(trace.out))
    }
}
