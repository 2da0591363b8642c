//! Layer primitives: LSTM, capsules with squash, repeat-vector,
//! time-distributed dense, feature concatenation and dropout.
//!
//! Parameter structs (`*Params`) own plain tensors. `bind` registers them on a
//! [`Graph`] and returns the matching `Var` handles, always in the order given
//! by `tensors()`, so callers can map gradients back onto parameters.
//!
//! Sequence tensors are laid out `[batch, time, features]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ReduceOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeded generator used for initialization and dropout masks.
pub type ModelRng = ChaCha8Rng;

fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Glorot/Xavier uniform limit.
fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Gate weights act on the concatenation `[h_{t-1}, x_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_c: Tensor,
    pub w_o: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

pub const LSTM_PARAM_NAMES: [&str; 8] = ["w_f", "w_i", "w_c", "w_o", "b_f", "b_i", "b_c", "b_o"];

impl LstmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_f: Tensor,
        w_i: Tensor,
        w_c: Tensor,
        w_o: Tensor,
        b_f: Tensor,
        b_i: Tensor,
        b_c: Tensor,
        b_o: Tensor,
    ) -> Result<Self> {
        let p = LstmParams { w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o };
        let [hidden, cols] = *p.w_f.shape() else {
            return Err(Error::shape("LSTM weights must be matrices"));
        };
        if cols <= hidden {
            return Err(Error::shape(format!(
                "LSTM weight {hidden}x{cols} leaves no room for an input"
            )));
        }
        let t = p.tensors();
        if t[..4].iter().any(|w| w.shape() != [hidden, cols]) || t[4..].iter().any(|b| b.shape() != [hidden]) {
            return Err(Error::shape("LSTM gates must share weight and bias shapes"));
        }
        Ok(p)
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, hidden + input]);
        let b = Tensor::zeros(&[hidden]);
        LstmParams {
            w_f: w.clone(),
            w_i: w.clone(),
            w_c: w.clone(),
            w_o: w,
            b_f: b.clone(),
            b_i: b.clone(),
            b_c: b.clone(),
            b_o: b,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let limit = glorot_limit(hidden + input, hidden);
        let shape = [hidden, hidden + input];
        let b = Tensor::zeros(&[hidden]);
        LstmParams {
            w_f: uniform(&shape, limit, rng),
            w_i: uniform(&shape, limit, rng),
            w_c: uniform(&shape, limit, rng),
            w_o: uniform(&shape, limit, rng),
            b_f: b.clone(),
            b_i: b.clone(),
            b_c: b.clone(),
            b_o: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_f.shape()[1] - self.hidden()
    }

    pub fn parameter_count(input: usize, hidden: usize) -> usize {
        4 * (hidden * (hidden + input) + hidden)
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.w_f, &self.w_i, &self.w_c, &self.w_o, &self.b_f, &self.b_i, &self.b_c, &self.b_o]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_f,
            &mut self.w_i,
            &mut self.w_c,
            &mut self.w_o,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> Result<LstmWeights> {
        let params = self.tensors().map(|t| g.param(t.clone()));
        LstmWeights::from_vars(g, params)
    }
}

/// LSTM parameters registered on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// Same order as [`LstmParams::tensors`].
    pub params: [Var; 8],
    // [hidden + input, 4 * hidden], gate blocks in f, i, C, o order.
    stacked_t: Var,
    stacked_b: Var,
    hidden: usize,
    input: usize,
}

impl LstmWeights {
    /// Fuses the four gates so each step costs a single matmul.
    pub fn from_vars(g: &mut Graph, params: [Var; 8]) -> Result<Self> {
        let [hidden, cols] = *g.shape(params[0]) else {
            return Err(Error::shape("LSTM weights must be matrices"));
        };
        let stacked = g.concat(&params[..4], 0)?;
        let stacked_t = g.transpose(stacked)?;
        let stacked_b = g.concat(&params[4..], 0)?;
        Ok(LstmWeights {
            params,
            stacked_t,
            stacked_b,
            hidden,
            input: cols - hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: g.constant(Tensor::zeros(&[batch, hidden])),
            c: g.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// One LSTM step on a batch `x: [batch, input]`:
///
/// ```text
/// f = σ(W_f·[h, x] + b_f)      i = σ(W_i·[h, x] + b_i)
/// C̃ = tanh(W_C·[h, x] + b_C)   C' = f ⊙ C + i ⊙ C̃
/// o = σ(W_o·[h, x] + b_o)      h' = o ⊙ tanh(C')
/// ```
pub fn lstm_step(g: &mut Graph, w: &LstmWeights, state: &LstmState, x: Var) -> Result<LstmState> {
    let xs = g.shape(x).to_vec();
    let hs = g.shape(state.h).to_vec();
    if xs.len() != 2 || xs[1] != w.input {
        return Err(Error::shape(format!("LSTM expects input [batch, {}], got {xs:?}", w.input)));
    }
    if hs != [xs[0], w.hidden] || g.shape(state.c) != hs.as_slice() {
        return Err(Error::shape(format!(
            "LSTM state must be [{}, {}], got h {hs:?} and C {:?}",
            xs[0],
            w.hidden,
            g.shape(state.c)
        )));
    }
    let h = w.hidden;
    let hx = g.concat(&[state.h, x], 1)?;
    let pre = g.matmul(hx, w.stacked_t)?;
    let pre = g.add(pre, w.stacked_b)?;
    let f_pre = g.narrow(pre, 1, 0, h)?;
    let i_pre = g.narrow(pre, 1, h, h)?;
    let c_pre = g.narrow(pre, 1, 2 * h, h)?;
    let o_pre = g.narrow(pre, 1, 3 * h, h)?;
    let f = g.sigmoid(f_pre);
    let i = g.sigmoid(i_pre);
    let c_tilde = g.tanh(c_pre);
    let o = g.sigmoid(o_pre);
    let kept = g.mul(f, state.c)?;
    let added = g.mul(i, c_tilde)?;
    let c = g.add(kept, added)?;
    let c_act = g.tanh(c);
    let h_new = g.mul(o, c_act)?;
    Ok(LstmState { h: h_new, c })
}

/// Runs an LSTM from the zero state over `xs: [batch, T, input]`.
///
/// Returns `[batch, T, hidden]` when `return_sequences`, else the final
/// hidden state `[batch, hidden]`.
pub fn lstm_sequence(g: &mut Graph, w: &LstmWeights, xs: Var, return_sequences: bool) -> Result<Var> {
    let shape = g.shape(xs).to_vec();
    let &[batch, steps, input] = shape.as_slice() else {
        return Err(Error::shape(format!("LSTM sequence must be [batch, T, input], got {shape:?}")));
    };
    if steps == 0 {
        return Err(Error::contract("LSTM sequence is empty"));
    }
    let mut state = LstmState::zeros(g, batch, w.hidden);
    let mut outputs = Vec::with_capacity(if return_sequences { steps } else { 0 });
    for t in 0..steps {
        let x_t = g.narrow(xs, 1, t, 1)?;
        let x_t = g.reshape(x_t, &[batch, input])?;
        state = lstm_step(g, w, &state, x_t)?;
        if return_sequences {
            outputs.push(g.reshape(state.h, &[batch, 1, w.hidden])?);
        }
    }
    if return_sequences {
        g.concat(&outputs, 1)
    } else {
        Ok(state.h)
    }
}

// ---------------------------------------------------------------------------
// Capsules
// ---------------------------------------------------------------------------

/// How coupling coefficients `c_ij` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    /// `c_ij = 1 / num_in` for every pair.
    Uniform,
    /// Routing-by-agreement with this many logit updates.
    Dynamic { iterations: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleParams {
    /// `[num_in, num_out, out_dim, in_dim]`
    pub weights: Tensor,
    pub routing: Routing,
}

impl CapsuleParams {
    pub fn new(weights: Tensor, routing: Routing) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::shape(format!(
                "capsule weights must be [num_in, num_out, out_dim, in_dim], got {:?}",
                weights.shape()
            )));
        }
        Ok(CapsuleParams { weights, routing })
    }

    /// Uniform weights with variance `num_in / in_dim`. Coupling averages
    /// over the `num_in` inputs, so this keeps `s` at the input's scale;
    /// smaller weights leave `s` near the origin where squash is quadratic
    /// and gradients vanish.
    pub fn init(num_in: usize, num_out: usize, in_dim: usize, out_dim: usize, routing: Routing, rng: &mut impl Rng) -> Self {
        let limit = (3.0 * num_in as f64 / in_dim as f64).sqrt();
        CapsuleParams {
            weights: uniform(&[num_in, num_out, out_dim, in_dim], limit, rng),
            routing,
        }
    }

    pub fn parameter_count(num_in: usize, num_out: usize, in_dim: usize, out_dim: usize) -> usize {
        num_in * num_out * out_dim * in_dim
    }

    pub fn num_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_out(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[3]
    }
}

/// Output capsules plus the coupling coefficients used for each pass.
#[derive(Debug, Clone)]
pub struct CapsuleOutput {
    /// `[batch, num_out, out_dim]`
    pub capsules: Var,
    /// `[batch, num_in, num_out]` per routing pass; empty for uniform coupling.
    pub couplings: Vec<Var>,
}

/// The squashing nonlinearity on a single vector. Maps zero to zero.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    crate::autodiff::squash_in_place(&mut v);
    v
}

/// Capsule layer on `u: [batch, num_in, in_dim]`.
///
/// Prediction vectors `û_{j|i} = W_ij u_i` are combined as
/// `s_j = Σ_i c_ij û_{j|i}` and squashed. Dynamic routing starts from zero
/// logits, takes `c_i· = softmax_j(b_i·)`, and after each squash adds the
/// agreement `û_{j|i} · v_j` to `b_ij`, `iterations` times.
pub fn capsule_forward(g: &mut Graph, weights: Var, routing: Routing, u: Var) -> Result<CapsuleOutput> {
    let u_hat = g.capsule_predict(weights, u)?;
    let &[batch, num_in, num_out, out_dim] = g.shape(u_hat) else {
        unreachable!("capsule_predict yields rank 4");
    };
    match routing {
        Routing::Uniform => {
            let s = g.reduce(u_hat, ReduceOp::Mean, Some(1), false)?;
            Ok(CapsuleOutput {
                capsules: g.squash(s),
                couplings: Vec::new(),
            })
        }
        Routing::Dynamic { iterations } => {
            let mut logits = g.constant(Tensor::zeros(&[batch, num_in, num_out]));
            let mut couplings = Vec::with_capacity(iterations + 1);
            let mut v;
            let mut pass = 0;
            loop {
                let c = g.softmax(logits);
                couplings.push(c);
                let c4 = g.reshape(c, &[batch, num_in, num_out, 1])?;
                let weighted = g.mul(u_hat, c4)?;
                let s = g.reduce(weighted, ReduceOp::Sum, Some(1), false)?;
                v = g.squash(s);
                if pass == iterations {
                    break;
                }
                let v4 = g.reshape(v, &[batch, 1, num_out, out_dim])?;
                let prod = g.mul(u_hat, v4)?;
                let agreement = g.reduce(prod, ReduceOp::Sum, Some(3), false)?;
                logits = g.add(logits, agreement)?;
                pass += 1;
            }
            Ok(CapsuleOutput { capsules: v, couplings })
        }
    }
}

// ---------------------------------------------------------------------------
// Sequence plumbing
// ---------------------------------------------------------------------------

/// `[batch, d]` to `[batch, n, d]` with every row equal to the input.
pub fn repeat_vector(g: &mut Graph, v: Var, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::contract("repeat count must be at least 1"));
    }
    let &[batch, d] = g.shape(v) else {
        return Err(Error::shape(format!("repeat_vector expects [batch, d], got {:?}", g.shape(v))));
    };
    let col = g.reshape(v, &[batch, 1, d])?;
    g.broadcast_to(col, &[batch, n, d])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseParams {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        DenseParams {
            weight: uniform(&[output, input], glorot_limit(input, output), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn parameter_count(input: usize, output: usize) -> usize {
        output * (input + 1)
    }
}

/// Linear map applied independently at every timestep: `y_t = W x_t + b`.
pub fn time_distributed_dense(g: &mut Graph, weight: Var, bias: Var, xs: Var) -> Result<Var> {
    let &[batch, steps, input] = g.shape(xs) else {
        return Err(Error::shape(format!("expected [batch, T, in], got {:?}", g.shape(xs))));
    };
    let &[output, w_in] = g.shape(weight) else {
        return Err(Error::shape("dense weight must be a matrix"));
    };
    if w_in != input || g.shape(bias) != [output] {
        return Err(Error::shape(format!(
            "dense weight {:?} / bias {:?} do not fit input width {input}",
            g.shape(weight),
            g.shape(bias)
        )));
    }
    let flat = g.reshape(xs, &[batch * steps, input])?;
    let wt = g.transpose(weight)?;
    let y = g.matmul(flat, wt)?;
    let y = g.add(y, bias)?;
    g.reshape(y, &[batch, steps, output])
}

/// Per-timestep concatenation of `[batch, T, d_k]` parts in order.
pub fn concat_features(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    if parts.iter().any(|&p| g.shape(p).len() != 3) {
        return Err(Error::shape("feature parts must be [batch, T, d]"));
    }
    g.concat(parts, 2)
}

/// Inverted dropout. Identity when not training or when `rate == 0`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n = g.value(x).numel();
    let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}
