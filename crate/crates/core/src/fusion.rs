//! The parser: merges the vision-guided and question-guided answer
//! representations with a learned two-way modality weighting.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{HglError, Result};
use crate::nn::{Affine, Mlp};
use crate::params::{glorot, ParamId, ParameterStore};
use crate::tensor::{Activation, SoftmaxMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ParserWeights {
    /// `W_oa`, `2d×d`.
    pub joint_obj: ParamId,
    /// `W_qa`, `2d×d`.
    pub joint_query: ParamId,
    pub score_v: Mlp,
    pub score_q: Mlp,
    /// Affine map applied after merging.
    pub output_map: Affine,
}

impl ParserWeights {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ParserWeights {
            joint_obj: store.add(format!("{prefix}.joint_obj"), glorot(rng, 2 * d, d))?,
            joint_query: store.add(format!("{prefix}.joint_query"), glorot(rng, 2 * d, d))?,
            score_v: Mlp::register(store, &format!("{prefix}.score_v"), &[d, d, 1], activation, rng)?,
            score_q: Mlp::register(store, &format!("{prefix}.score_q"), &[d, d, 1], activation, rng)?,
            output_map: Affine::register(store, &format!("{prefix}.output"), d, d, true, rng)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.joint_obj, self.joint_query];
        ids.extend(self.score_v.params());
        ids.extend(self.score_q.params());
        ids.extend(self.output_map.params());
        ids
    }
}

/// Scalar `1×1` tape values `w_o`, `w_q`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityWeights {
    pub w_o: Var,
    pub w_q: Var,
}

impl ModalityWeights {
    /// Fixed weights recorded as constants, used when a module is ablated.
    pub fn forced(tape: &mut Tape, w_o: f64, w_q: f64) -> Self {
        ModalityWeights {
            w_o: tape.constant(w_o),
            w_q: tape.constant(w_q),
        }
    }

    pub fn values(&self, tape: &Tape) -> (f64, f64) {
        (tape.value(self.w_o).data()[0], tape.value(self.w_q).data()[0])
    }
}

/// Raw scores `(s_v, s_q)` from pooled `1×d` summaries.
pub fn modality_scores(
    tape: &mut Tape,
    store: &ParameterStore,
    x_obj: Var,
    x_query: Var,
    x_ans: Var,
    w: &ParserWeights,
) -> Result<(Var, Var)> {
    for v in [x_obj, x_query, x_ans] {
        if tape.shape(v)[0] != 1 {
            return Err(HglError::dim("modality_weights", tape.shape(v), &[1, tape.shape(x_ans)[1]]));
        }
    }
    let ov = tape.concat(x_obj, x_ans)?;
    let w_oa = tape.param(store, w.joint_obj);
    let ov = tape.matmul(ov, w_oa)?;
    let s_v = w.score_v.apply(tape, store, ov)?;

    let qv = tape.concat(x_query, x_ans)?;
    let w_qa = tape.param(store, w.joint_query);
    let qv = tape.matmul(qv, w_qa)?;
    let s_q = w.score_q.apply(tape, store, qv)?;
    Ok((s_v, s_q))
}

/// Two-way softmax of `(s_v, s_q)`.
pub fn modality_from_scores(tape: &mut Tape, s_v: Var, s_q: Var) -> Result<ModalityWeights> {
    let pair = tape.concat(s_v, s_q)?;
    let p = tape.softmax(pair, SoftmaxMode::PerRow)?;
    Ok(ModalityWeights {
        w_o: tape.pick(p, 0)?,
        w_q: tape.pick(p, 1)?,
    })
}

pub fn modality_weights(
    tape: &mut Tape,
    store: &ParameterStore,
    x_obj: Var,
    x_query: Var,
    x_ans: Var,
    w: &ParserWeights,
) -> Result<ModalityWeights> {
    let (s_v, s_q) = modality_scores(tape, store, x_obj, x_query, x_ans, w)?;
    modality_from_scores(tape, s_v, s_q)
}

/// `F(w_o · Y_v + w_q · Y_q)`.
pub fn parse(
    tape: &mut Tape,
    store: &ParameterStore,
    y_v: Var,
    y_q: Var,
    mw: ModalityWeights,
    w: &ParserWeights,
) -> Result<Var> {
    if tape.shape(y_v) != tape.shape(y_q) {
        return Err(HglError::dim("parse", tape.shape(y_v), tape.shape(y_q)));
    }
    let a = tape.scalar_mul(y_v, mw.w_o)?;
    let b = tape.scalar_mul(y_q, mw.w_q)?;
    let merged = tape.add(a, b)?;
    w.output_map.apply(tape, store, merged)
}

/// Single-representation parse, `F(w · Y)`, for ablations with one module.
pub fn parse_single(
    tape: &mut Tape,
    store: &ParameterStore,
    y: Var,
    weight: Var,
    w: &ParserWeights,
) -> Result<Var> {
    let scaled = tape.scalar_mul(y, weight)?;
    w.output_map.apply(tape, store, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{self, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, d: usize) -> (ParameterStore, ParserWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let w = ParserWeights::register(&mut store, "p", d, Activation::Relu, &mut rng).unwrap();
        (store, w)
    }

    fn set_score_constant(store: &mut ParameterStore, mlp: &Mlp, value: f64) {
        let last = mlp.layers.last().unwrap();
        let shape = store.value(last.weight).shape().to_vec();
        store.set(last.weight, Tensor::zeros(&shape)).unwrap();
        store.set(last.bias.unwrap(), Tensor::scalar(value)).unwrap();
    }

    fn pooled(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> Var {
        tape.input(crate::params::uniform(rng, &[1, d], 1.0))
    }

    #[test]
    fn equal_scores_split_evenly_and_ln3_gives_three_quarters() {
        let (mut store, w) = setup(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        set_score_constant(&mut store, &w.score_v, 0.7);
        set_score_constant(&mut store, &w.score_q, 0.7);
        let mut tape = Tape::new();
        let (o, q, a) = (pooled(&mut tape, &mut rng, 3), pooled(&mut tape, &mut rng, 3), pooled(&mut tape, &mut rng, 3));
        let mw = modality_weights(&mut tape, &store, o, q, a, &w).unwrap();
        assert_eq!(mw.values(&tape), (0.5, 0.5));

        set_score_constant(&mut store, &w.score_v, 0.2 + 3f64.ln());
        set_score_constant(&mut store, &w.score_q, 0.2);
        let mut tape = Tape::new();
        let (o, q, a) = (pooled(&mut tape, &mut rng, 3), pooled(&mut tape, &mut rng, 3), pooled(&mut tape, &mut rng, 3));
        let mw = modality_weights(&mut tape, &store, o, q, a, &w).unwrap();
        let (wo, wq) = mw.values(&tape);
        assert!((wo - 0.75).abs() < 1e-12 && (wq - 0.25).abs() < 1e-12);
    }

    #[test]
    fn modality_weights_match_scalar_softmax_oracle() {
        let (store, w) = setup(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut tape = Tape::new();
        let (o, q, a) = (pooled(&mut tape, &mut rng, 4), pooled(&mut tape, &mut rng, 4), pooled(&mut tape, &mut rng, 4));
        let mw = modality_weights(&mut tape, &store, o, q, a, &w).unwrap();

        let score = |src: Var, joint: ParamId, mlp: &Mlp| -> f64 {
            let x = tensor::concat_cols(tape.value(src), tape.value(a)).unwrap();
            let h = tensor::matmul(&x, store.value(joint)).unwrap();
            let l0 = &mlp.layers[0];
            let l1 = &mlp.layers[1];
            let mut z = tensor::matmul(&h, store.value(l0.weight)).unwrap();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = (*v + store.value(l0.bias.unwrap()).data()[i]).max(0.0);
            }
            let s = tensor::matmul(&z, store.value(l1.weight)).unwrap();
            s.data()[0] + store.value(l1.bias.unwrap()).data()[0]
        };
        let sv = score(o, w.joint_obj, &w.score_v);
        let sq = score(q, w.joint_query, &w.score_q);
        let expect_o = 1.0 / (1.0 + (sq - sv).exp());
        let (wo, wq) = mw.values(&tape);
        assert!((wo - expect_o).abs() < 1e-12);
        assert!((wo + wq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parse_of_identical_inputs_ignores_weights() {
        let (store, w) = setup(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let y = crate::params::uniform(&mut rng, &[2, 3], 1.0);
        let mut tape = Tape::new();
        let yv = tape.input(y.clone());
        let reference = w.output_map.apply(&mut tape, &store, yv).unwrap();
        for wo in [0.1, 0.5, 0.93] {
            let mw = ModalityWeights::forced(&mut tape, wo, 1.0 - wo);
            let out = parse(&mut tape, &store, yv, yv, mw, &w).unwrap();
            assert!(tape.value(out).max_abs_diff(tape.value(reference)) <= 1e-12);
        }
    }

    #[test]
    fn dominant_vision_score_approaches_vision_only() {
        let (mut store, w) = setup(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        set_score_constant(&mut store, &w.score_v, 20.0);
        set_score_constant(&mut store, &w.score_q, 0.0);
        let mut tape = Tape::new();
        let (o, q, a) = (pooled(&mut tape, &mut rng, 3), pooled(&mut tape, &mut rng, 3), pooled(&mut tape, &mut rng, 3));
        let yv = tape.input(crate::params::uniform(&mut rng, &[2, 3], 1.0));
        let yq = tape.input(crate::params::uniform(&mut rng, &[2, 3], 1.0));
        let mw = modality_weights(&mut tape, &store, o, q, a, &w).unwrap();
        let out = parse(&mut tape, &store, yv, yq, mw, &w).unwrap();
        let vision_only = w.output_map.apply(&mut tape, &store, yv).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(vision_only)) <= 1e-6);
    }

    #[test]
    fn parse_matches_scale_add_affine_oracle() {
        let (store, w) = setup(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let yv = crate::params::uniform(&mut rng, &[3, 4], 1.0);
        let yq = crate::params::uniform(&mut rng, &[3, 4], 1.0);
        let mut tape = Tape::new();
        let (a, b) = (tape.input(yv.clone()), tape.input(yq.clone()));
        let mw = ModalityWeights::forced(&mut tape, 0.3, 0.7);
        let out = parse(&mut tape, &store, a, b, mw, &w).unwrap();

        let merged = Tensor::new(
            vec![3, 4],
            yv.data().iter().zip(yq.data()).map(|(x, y)| 0.3 * x + 0.7 * y).collect(),
        )
        .unwrap();
        let mut expect = tensor::matmul(&merged, store.value(w.output_map.weight)).unwrap();
        let bias = store.value(w.output_map.bias.unwrap()).clone();
        for (i, v) in expect.data_mut().iter_mut().enumerate() {
            *v += bias.data()[i % 4];
        }
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-14);

        let bad = tape.input(Tensor::zeros(&[2, 4]));
        assert!(parse(&mut tape, &store, a, bad, mw, &w).is_err());
    }
}
