//! Heterogeneous graph reasoning between a source node set (visual objects or
//! question words) and the words of one candidate response, followed by the
//! two-step guidance mechanism.
//!
//! The same pipeline serves both directions:
//!
//! ```text
//! A   = softmax(X_src · X_ansᵀ)                      SRC×B
//! Y   = δ(Aᵀ · X_src · W_reason)                     evolved, B×d
//! X'  = F(X_ans);  a = softmax(X' · w_attn)          word attention over B
//! X_m = diag(a) · X'
//! X_mid = f([X_m, Y])
//! out = Ψ(φ(Y · W_src + X_mid · W_mid) · W_senior)  guided, B×d
//! ```

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{HglError, Result};
use crate::nn::Mlp;
use crate::params::{glorot, ParamId, ParameterStore};
use crate::tensor::{Activation, SoftmaxMode, Tensor};

/// Which node set feeds the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Vision,
    Question,
    /// Answer words attending to themselves; the homogeneous baseline.
    Answer,
}

/// Cross-domain edge weights, `SRC×B`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeterogeneousAdjacency {
    pub weights: Tensor,
    pub mode: SoftmaxMode,
}

impl HeterogeneousAdjacency {
    /// Positivity and normalization within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        check_adjacency(&self.weights, self.mode, tol)
    }
}

fn check_adjacency(w: &Tensor, mode: SoftmaxMode, tol: f64) -> Result<()> {
    let violation = |reason: String| HglError::Domain {
        op: "adjacency",
        reason,
    };
    if let Some(v) = w.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(violation(format!("non-positive entry {v}")));
    }
    match mode {
        SoftmaxMode::Global => {
            let s = w.sum();
            if (s - 1.0).abs() > tol {
                return Err(violation(format!("entries sum to {s}")));
            }
        }
        SoftmaxMode::PerRow => {
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().sum();
                if (s - 1.0).abs() > tol {
                    return Err(violation(format!("row {r} sums to {s}")));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphModuleWeights {
    pub reason: ParamId,
    pub encoder: Mlp,
    pub attention: ParamId,
    pub fuse: Mlp,
    pub map_src: ParamId,
    pub map_mid: ParamId,
    pub senior: ParamId,
    pub guide_inner: Mlp,
    pub guide_outer: Mlp,
    /// Nonlinearity applied to the reasoning output.
    pub delta: Activation,
}

impl GraphModuleWeights {
    /// Registers one module under `prefix`. Every MLP has one hidden layer
    /// of width `d` activated by `activation`.
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::register_with_depth(store, prefix, d, Some(d), activation, rng)
    }

    /// `hidden = None` makes every MLP a single affine layer.
    pub fn register_with_depth(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        hidden: Option<usize>,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dims = |input: usize| match hidden {
            Some(h) => vec![input, h, d],
            None => vec![input, d],
        };
        let reason = store.add(format!("{prefix}.reason"), glorot(rng, d, d))?;
        let encoder = Mlp::register(store, &format!("{prefix}.encoder"), &dims(d), activation, rng)?;
        let attention = store.add(format!("{prefix}.attention"), glorot(rng, d, 1))?;
        let fuse = Mlp::register(store, &format!("{prefix}.fuse"), &dims(2 * d), activation, rng)?;
        let map_src = store.add(format!("{prefix}.map_src"), glorot(rng, d, d))?;
        let map_mid = store.add(format!("{prefix}.map_mid"), glorot(rng, d, d))?;
        let senior = store.add(format!("{prefix}.senior"), glorot(rng, d, d))?;
        let guide_inner =
            Mlp::register(store, &format!("{prefix}.guide_inner"), &dims(d), activation, rng)?;
        let guide_outer =
            Mlp::register(store, &format!("{prefix}.guide_outer"), &dims(d), activation, rng)?;
        Ok(GraphModuleWeights {
            reason,
            encoder,
            attention,
            fuse,
            map_src,
            map_mid,
            senior,
            guide_inner,
            guide_outer,
            delta: activation,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.reason, self.attention, self.map_src, self.map_mid, self.senior];
        ids.extend(self.encoder.params());
        ids.extend(self.fuse.params());
        ids.extend(self.guide_inner.params());
        ids.extend(self.guide_outer.params());
        ids
    }
}

/// `softmax(X_src · X_ansᵀ)` under `mode`.
pub fn compute_adjacency(tape: &mut Tape, x_src: Var, x_ans: Var, mode: SoftmaxMode) -> Result<Var> {
    let (s, a) = (tape.shape(x_src).to_vec(), tape.shape(x_ans).to_vec());
    if s.len() != 2 || a.len() != 2 || s[1] != a[1] {
        return Err(HglError::dim("compute_adjacency", &s, &a));
    }
    if s[0] == 0 || a[0] == 0 {
        return Err(HglError::Domain {
            op: "compute_adjacency",
            reason: "empty node set".into(),
        });
    }
    let ans_t = tape.transpose(x_ans)?;
    let raw = tape.matmul(x_src, ans_t)?;
    let adj = tape.softmax(raw, mode)?;
    debug_assert!(check_adjacency(tape.value(adj), mode, 1e-10).is_ok());
    Ok(adj)
}

/// `δ(Aᵀ · X_src · W)`.
pub fn graph_reason(
    tape: &mut Tape,
    store: &ParameterStore,
    adjacency: Var,
    x_src: Var,
    reason: ParamId,
    delta: Activation,
) -> Result<Var> {
    if tape.shape(adjacency)[0] != tape.shape(x_src)[0] {
        return Err(HglError::dim(
            "graph_reason",
            tape.shape(adjacency),
            tape.shape(x_src),
        ));
    }
    let adj_t = tape.transpose(adjacency)?;
    let gathered = tape.matmul(adj_t, x_src)?;
    let w = tape.param(store, reason);
    let mixed = tape.matmul(gathered, w)?;
    tape.activation(mixed, delta)
}

/// Encodes the answer words and scales each by its softmax attention value.
/// Returns `(X_m, a)` with `a: B×1`.
pub fn word_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    x_ans: Var,
    encoder: &Mlp,
    attention: ParamId,
) -> Result<(Var, Var)> {
    let encoded = encoder.apply(tape, store, x_ans)?;
    let w = tape.param(store, attention);
    let scores = tape.matmul(encoded, w)?;
    let weights = tape.softmax(scores, SoftmaxMode::Global)?;
    let scaled = tape.scale_rows(encoded, weights)?;
    Ok((scaled, weights))
}

/// `f([X_m, Y])`.
pub fn middle_fuse(
    tape: &mut Tape,
    store: &ParameterStore,
    x_m: Var,
    evolved: Var,
    fuse: &Mlp,
) -> Result<Var> {
    if tape.shape(x_m) != tape.shape(evolved) {
        return Err(HglError::dim("middle_fuse", tape.shape(x_m), tape.shape(evolved)));
    }
    let joined = tape.concat(x_m, evolved)?;
    fuse.apply(tape, store, joined)
}

/// `Ψ(φ(Y · W_src + X_mid · W_mid) · W_senior)`.
pub fn guide(
    tape: &mut Tape,
    store: &ParameterStore,
    evolved: Var,
    x_mid: Var,
    w: &GraphModuleWeights,
) -> Result<Var> {
    if tape.shape(evolved) != tape.shape(x_mid) {
        return Err(HglError::dim("guide", tape.shape(evolved), tape.shape(x_mid)));
    }
    let w_src = tape.param(store, w.map_src);
    let w_mid = tape.param(store, w.map_mid);
    let w_senior = tape.param(store, w.senior);
    let a = tape.matmul(evolved, w_src)?;
    let b = tape.matmul(x_mid, w_mid)?;
    let common = tape.add(a, b)?;
    let inner = w.guide_inner.apply(tape, store, common)?;
    let lifted = tape.matmul(inner, w_senior)?;
    w.guide_outer.apply(tape, store, lifted)
}

/// Tape handles for every intermediate of one module pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    pub source: Source,
    pub adjacency: Var,
    pub evolved: Var,
    pub word_weights: Var,
    pub middle: Var,
    pub guided: Var,
}

pub fn heterogeneous_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    x_src: Var,
    x_ans: Var,
    w: &GraphModuleWeights,
    mode: SoftmaxMode,
    source: Source,
) -> Result<GraphOutput> {
    let adjacency = compute_adjacency(tape, x_src, x_ans, mode)?;
    let evolved = graph_reason(tape, store, adjacency, x_src, w.reason, w.delta)?;
    let (x_m, word_weights) = word_attention(tape, store, x_ans, &w.encoder, w.attention)?;
    let middle = middle_fuse(tape, store, x_m, evolved, &w.fuse)?;
    let guided = guide(tape, store, evolved, middle, w)?;
    Ok(GraphOutput {
        source,
        adjacency,
        evolved,
        word_weights,
        middle,
        guided,
    })
}

/// Vision-to-answer module: objects `N×d` → answer words `B×d`.
pub fn vahg_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    x_obj: Var,
    x_ans: Var,
    w: &GraphModuleWeights,
    mode: SoftmaxMode,
) -> Result<GraphOutput> {
    heterogeneous_forward(tape, store, x_obj, x_ans, w, mode, Source::Vision)
}

/// Question-to-answer module: question words `M×d` → answer words `B×d`.
pub fn qahg_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    x_query: Var,
    x_ans: Var,
    w: &GraphModuleWeights,
    mode: SoftmaxMode,
) -> Result<GraphOutput> {
    heterogeneous_forward(tape, store, x_query, x_ans, w, mode, Source::Question)
}
