//! Parameterised building blocks recorded onto a [`Tape`].

use std::rc::Rc;

use super::{ParamId, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Affine map `x·W + b` with `W: input × output`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::Config(format!("linear `{name}` needs positive dims")));
        }
        let weight = store.add_he_uniform(&format!("{name}.w"), &[input, output], input, rng)?;
        let bias = store.add_zeros(&format!("{name}.b"), &[1, output])?;
        Ok(Linear { weight, bias, input, output })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input {
            return Err(Error::Shape(format!(
                "linear expects {} input columns, got {}",
                self.input,
                tape.value(x).cols()
            )));
        }
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Stack of linear layers with ReLU between them. The last layer is linear
/// unless `relu_last`; with `l2_normalize` every output row has unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
    pub l2_normalize: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        dims: &[usize],
        relu_last: bool,
        l2_normalize: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config(format!("mlp `{name}` needs at least one layer")));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = input;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), prev, d, rng)?);
            prev = d;
        }
        Ok(Mlp { layers, relu_last, l2_normalize })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last || self.relu_last {
                h = tape.relu(h)?;
            }
        }
        if self.l2_normalize {
            h = tape.l2_normalize_rows(h)?;
        }
        Ok(h)
    }
}

/// Lookup table of `rows × dim` trainable vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParameterStore, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Config(format!("embedding `{name}` needs positive dims")));
        }
        let bound = (3.0 / dim as f64).sqrt() * 0.5;
        let table = store.add_uniform(name, &[rows, dim], bound, rng)?;
        Ok(Embedding { table, rows, dim })
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        tape.gather(self.table, ids)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `n_q × d_model`
    pub output: Var,
    /// Per-head `n_q × n_k` weight matrices.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with learned query/key/value/output maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("attention `{name}`: d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), query_dim, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.k"), key_dim, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.v"), key_dim, d_model, rng)?,
            out: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    /// Keys mapped into the space where they are scored against queries.
    pub fn project_keys(&self, tape: &mut Tape, k: Var) -> Result<Var> {
        self.key.forward(tape, k)
    }

    pub fn project_queries(&self, tape: &mut Tape, q: Var) -> Result<Var> {
        self.query.forward(tape, q)
    }

    /// `mask[i*n_k + j] == false` hides key `j` from query `i`. Every query row
    /// must keep at least one key.
    pub fn forward(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<AttentionOutput> {
        let n_q = tape.value(q).rows();
        let n_k = tape.value(k).rows();
        if n_k == 0 || tape.value(k).is_empty() {
            return Err(Error::Attention("empty key sequence".into()));
        }
        if tape.value(v).rows() != n_k {
            return Err(Error::Shape(format!("{n_k} keys but {} values", tape.value(v).rows())));
        }
        if let Some(mask) = mask {
            if mask.len() != n_q * n_k {
                return Err(Error::Shape(format!("mask of {} for {n_q}x{n_k}", mask.len())));
            }
            if mask.chunks(n_k).any(|row| !row.iter().any(|&b| b)) {
                return Err(Error::Attention("query row with every key masked".into()));
            }
        }
        let qp = self.query.forward(tape, q)?;
        let kp = self.key.forward(tape, k)?;
        let vp = self.value.forward(tape, v)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    tape.slice_cols(qp, h * dh, dh)?,
                    tape.slice_cols(kp, h * dh, dh)?,
                    tape.slice_cols(vp, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let w = tape.softmax_rows(scores, mask)?;
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let output = self.out.forward(tape, joined)?;
        Ok(AttentionOutput { output, weights })
    }

    /// Attention where query row `i` sees only the key rows in `keys[i]`;
    /// equal to [`Self::forward`] with the corresponding mask.
    pub fn forward_sparse(&self, tape: &mut Tape, q: Var, k: Var, v: Var, keys: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        if tape.value(v).rows() != tape.value(k).rows() {
            return Err(Error::Shape(format!("{} keys but {} values", tape.value(k).rows(), tape.value(v).rows())));
        }
        let qp = self.query.forward(tape, q)?;
        let kp = self.key.forward(tape, k)?;
        let vp = self.value.forward(tape, v)?;
        self.attend_projected(tape, qp, kp, vp, keys)
    }

    /// Segment attention over already projected queries, keys and values.
    pub fn attend_projected(&self, tape: &mut Tape, qp: Var, kp: Var, vp: Var, keys: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    tape.slice_cols(qp, h * dh, dh)?,
                    tape.slice_cols(kp, h * dh, dh)?,
                    tape.slice_cols(vp, h * dh, dh)?,
                )
            };
            heads.push(tape.segment_attention(qh, kh, vh, keys.clone(), scale)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.out.forward(tape, joined)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MmoeConfig {
    pub input: usize,
    pub experts: usize,
    pub expert_dims: Vec<usize>,
    pub tower_dims: Vec<usize>,
    pub tasks: usize,
}

impl MmoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.tasks == 0 || self.input == 0 {
            return Err(Error::Config("mmoe needs at least one expert, one task and a positive input".into()));
        }
        if self.expert_dims.is_empty() || self.expert_dims.contains(&0) || self.tower_dims.contains(&0) {
            return Err(Error::Config("mmoe layer dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MmoeOutput {
    /// `n × tasks` probabilities in (0, 1).
    pub probs: Var,
    /// Per-task `n × experts` gate weights.
    pub gates: Vec<Var>,
}

/// Multi-gate mixture of experts: shared experts, one softmax gate and one
/// sigmoid tower per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Mmoe {
    pub config: MmoeConfig,
    pub experts: Vec<Mlp>,
    pub gates: Vec<Linear>,
    pub towers: Vec<Mlp>,
}

impl Mmoe {
    pub fn new(store: &mut ParameterStore, name: &str, config: &MmoeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let experts = (0..config.experts)
            .map(|e| Mlp::new(store, &format!("{name}.expert{e}"), config.input, &config.expert_dims, true, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let gates = (0..config.tasks)
            .map(|t| Linear::new(store, &format!("{name}.gate{t}"), config.input, config.experts, rng))
            .collect::<Result<Vec<_>>>()?;
        let expert_out = *config.expert_dims.last().expect("validated");
        let mut tower_dims = config.tower_dims.clone();
        tower_dims.push(1);
        let towers = (0..config.tasks)
            .map(|t| Mlp::new(store, &format!("{name}.tower{t}"), expert_out, &tower_dims, false, false, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mmoe { config: config.clone(), experts, gates, towers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<MmoeOutput> {
        if tape.value(x).cols() != self.config.input {
            return Err(Error::Shape(format!(
                "mmoe expects {} input columns, got {}",
                self.config.input,
                tape.value(x).cols()
            )));
        }
        let expert_out = self.experts.iter().map(|e| e.forward(tape, x)).collect::<Result<Vec<_>>>()?;
        let mut gates = Vec::with_capacity(self.config.tasks);
        let mut task_probs = Vec::with_capacity(self.config.tasks);
        for (gate, tower) in self.gates.iter().zip(&self.towers) {
            let logits = gate.forward(tape, x)?;
            let g = tape.softmax_rows(logits, None)?;
            let mut mixed = tape.mul_col(expert_out[0], g, 0)?;
            for (e, &out) in expert_out.iter().enumerate().skip(1) {
                let part = tape.mul_col(out, g, e)?;
                mixed = tape.add(mixed, part)?;
            }
            let logit = tower.forward(tape, mixed)?;
            task_probs.push(tape.sigmoid(logit)?);
            gates.push(g);
        }
        let probs = if task_probs.len() == 1 { task_probs[0] } else { tape.concat_cols(&task_probs)? };
        Ok(MmoeOutput { probs, gates })
    }
}
