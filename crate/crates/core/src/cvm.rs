//! Contextual voting: a non-local block over the positions of a feature map.
//!
//! For positions `i, j` of an input map `x: P×C`:
//!
//! ```text
//! y_i     = (1/P) Σ_j ⟨θ_f x_i, θ_f x_j⟩ · θ_g x_j
//! a_{j→i} = softmax_j( w_vote · δ(θ_φ [x_i, x_j]) )
//! out_i   = (Σ_j a_{j→i} y_j) · W_a + x_i
//! ```

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{HglError, Result};
use crate::nn::Affine;
use crate::params::{glorot, ParamId, ParameterStore};
use crate::tensor::{Activation, SoftmaxMode, Tensor};

/// A flattened `P×C` grid of local features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() == 0 || values.cols() == 0 {
            return Err(HglError::dim("feature_map", values.shape(), &[1, 1]));
        }
        if !values.is_finite() {
            return Err(HglError::Domain {
                op: "feature_map",
                reason: "non-finite value".into(),
            });
        }
        Ok(FeatureMap { values })
    }

    pub fn positions(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// How the voting weights enter the residual update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualReading {
    /// `out_i = (Σ_j a_{j→i} y_j) W_a + x_i`.
    Aggregate,
    /// `out_i = a_{i→i} y_i W_a + x_i`.
    SelfScaled,
}

impl ResidualReading {
    pub fn name(self) -> &'static str {
        match self {
            ResidualReading::Aggregate => "aggregate",
            ResidualReading::SelfScaled => "self",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "aggregate" => Some(ResidualReading::Aggregate),
            "self" => Some(ResidualReading::SelfScaled),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvmWeights {
    /// `θ_f`, shared by both sides of the pairwise affinity.
    pub affinity: Affine,
    /// `θ_g`.
    pub value: Affine,
    /// `θ_φ` split over the concatenation: `[x_i, x_j] θ_φ = x_i L + x_j R + b`.
    pub pair_target: ParamId,
    pub pair_source: Affine,
    /// `W_n^a`, `C×1`.
    pub vote_score: ParamId,
    /// `W^a`, `C×C`.
    pub vote_proj: ParamId,
    pub activation: Activation,
}

impl CvmWeights {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        Ok(CvmWeights {
            affinity: Affine::register(store, &format!("{prefix}.affinity"), c, c, true, rng)?,
            value: Affine::register(store, &format!("{prefix}.value"), c, c, true, rng)?,
            pair_target: store.add(format!("{prefix}.pair_target"), glorot(rng, c, c))?,
            pair_source: Affine::register(store, &format!("{prefix}.pair_source"), c, c, true, rng)?,
            vote_score: store.add(format!("{prefix}.vote_score"), glorot(rng, c, 1))?,
            vote_proj: store.add(format!("{prefix}.vote_proj"), glorot(rng, c, c))?,
            activation,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.pair_target, self.vote_score, self.vote_proj];
        ids.extend(self.affinity.params());
        ids.extend(self.value.params());
        ids.extend(self.pair_source.params());
        ids
    }
}

/// `y_i = (1/P) Σ_j ⟨θ_f x_i, θ_f x_j⟩ θ_g x_j`.
pub fn nonlocal_aggregate(tape: &mut Tape, store: &ParameterStore, x: Var, w: &CvmWeights) -> Result<Var> {
    let p = tape.shape(x)[0];
    let theta = w.affinity.apply(tape, store, x)?;
    let theta_t = tape.transpose(theta)?;
    let affinity = tape.matmul(theta, theta_t)?;
    let g = w.value.apply(tape, store, x)?;
    let gathered = tape.matmul(affinity, g)?;
    tape.scale(gathered, 1.0 / p as f64)
}

/// Row-stochastic `P×P` matrix with entry `[i][j] = a_{j→i}`.
pub fn voting_weights(tape: &mut Tape, store: &ParameterStore, x: Var, w: &CvmWeights) -> Result<Var> {
    let p = tape.shape(x)[0];
    let left = tape.param(store, w.pair_target);
    let target = tape.matmul(x, left)?;
    let source = w.pair_source.apply(tape, store, x)?;
    let pairs = tape.pairwise_add(target, source)?;
    let pairs = tape.activation(pairs, w.activation)?;
    let score_w = tape.param(store, w.vote_score);
    let scores = tape.matmul(pairs, score_w)?;
    let scores = tape.reshape(scores, &[p, p])?;
    let votes = tape.softmax(scores, SoftmaxMode::PerRow)?;
    debug_assert!((0..p).all(|i| {
        let s: f64 = tape.value(votes).row(i).iter().sum();
        (s - 1.0).abs() <= 1e-10
    }));
    Ok(votes)
}

pub fn residual_update(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    y: Var,
    votes: Var,
    w: &CvmWeights,
    reading: ResidualReading,
) -> Result<Var> {
    let p = tape.shape(x)[0];
    if tape.shape(x) != tape.shape(y) || tape.shape(votes) != [p, p] {
        return Err(HglError::dim("residual_update", tape.shape(x), tape.shape(votes)));
    }
    let context = match reading {
        ResidualReading::Aggregate => tape.matmul(votes, y)?,
        ResidualReading::SelfScaled => {
            let diag = tape.diagonal(votes)?;
            tape.scale_rows(y, diag)?
        }
    };
    let proj = tape.param(store, w.vote_proj);
    let enhanced = tape.matmul(context, proj)?;
    tape.add(enhanced, x)
}

#[derive(Clone, Copy, Debug)]
pub struct CvmOutput {
    pub aggregated: Var,
    pub votes: Var,
    pub output: Var,
}

pub fn cvm_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    w: &CvmWeights,
    reading: ResidualReading,
) -> Result<CvmOutput> {
    let aggregated = nonlocal_aggregate(tape, store, x, w)?;
    let votes = voting_weights(tape, store, x, w)?;
    let output = residual_update(tape, store, x, aggregated, votes, w, reading)?;
    Ok(CvmOutput {
        aggregated,
        votes,
        output,
    })
}
