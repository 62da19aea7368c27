//! End-to-end four-way choice model: grid context, object pooling, the two
//! heterogeneous graph modules, the parser, and a linear scoring head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cvm::{cvm_forward, CvmOutput, CvmWeights, ResidualReading};
use crate::data::Instance;
use crate::error::{HglError, Result};
use crate::fusion::{modality_weights, parse, parse_single, ModalityWeights, ParserWeights};
use crate::hetgraph::{heterogeneous_forward, GraphModuleWeights, GraphOutput, Source};
use crate::nn::Affine;
use crate::params::{glorot, ParamId, ParameterStore};
use crate::tensor::{self, Activation, SoftmaxMode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub channels: usize,
    pub activation: Activation,
    pub use_vahg: bool,
    pub use_qahg: bool,
    pub use_cvm: bool,
    pub adjacency_mode: SoftmaxMode,
    pub residual_reading: ResidualReading,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            vocab_size: 40,
            channels: 24,
            activation: Activation::Relu,
            use_vahg: true,
            use_qahg: true,
            use_cvm: true,
            adjacency_mode: SoftmaxMode::Global,
            residual_reading: ResidualReading::Aggregate,
        }
    }
}

pub fn adjacency_mode_name(mode: SoftmaxMode) -> &'static str {
    match mode {
        SoftmaxMode::Global => "global",
        SoftmaxMode::PerRow => "row",
    }
}

pub fn parse_adjacency_mode(s: &str) -> Option<SoftmaxMode> {
    match s {
        "global" => Some(SoftmaxMode::Global),
        "row" => Some(SoftmaxMode::PerRow),
        _ => None,
    }
}

impl ModelConfig {
    /// Entries stored in checkpoint headers.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("dim", self.dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("channels", self.channels.to_string()),
            ("activation", self.activation.name().to_string()),
            ("use_vahg", self.use_vahg.to_string()),
            ("use_qahg", self.use_qahg.to_string()),
            ("use_cvm", self.use_cvm.to_string()),
            ("adjacency_mode", adjacency_mode_name(self.adjacency_mode).to_string()),
            ("residual_reading", self.residual_reading.name().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(mk, _)| mk == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| HglError::Checkpoint(format!("missing `{k}` in checkpoint header")))
        };
        let bad = |k: &str| HglError::Checkpoint(format!("bad `{k}` in checkpoint header"));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
        let flag = |k: &str| get(k)?.parse::<bool>().map_err(|_| bad(k));
        Ok(ModelConfig {
            dim: num("dim")?,
            vocab_size: num("vocab_size")?,
            channels: num("channels")?,
            activation: Activation::parse(get("activation")?).ok_or_else(|| bad("activation"))?,
            use_vahg: flag("use_vahg")?,
            use_qahg: flag("use_qahg")?,
            use_cvm: flag("use_cvm")?,
            adjacency_mode: parse_adjacency_mode(get("adjacency_mode")?).ok_or_else(|| bad("adjacency_mode"))?,
            residual_reading: ResidualReading::parse(get("residual_reading")?)
                .ok_or_else(|| bad("residual_reading"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    /// `V×d`.
    pub token_embedding: ParamId,
    /// `C×d`, no bias.
    pub object_projection: ParamId,
    pub cvm: CvmWeights,
    pub vahg: GraphModuleWeights,
    pub qahg: GraphModuleWeights,
    pub parser: ParserWeights,
    /// `d→1`.
    pub classifier: Affine,
}

/// A configuration together with the ids of its weights. Every module is
/// registered regardless of the ablation switches, so checkpoints of
/// ablated and full models share one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self> {
        if config.dim == 0 || config.vocab_size == 0 || config.channels == 0 {
            return Err(HglError::Config("model sizes must be positive".into()));
        }
        let (d, act) = (config.dim, config.activation);
        let token_embedding = store.add("embed.tokens", glorot(rng, config.vocab_size, d))?;
        let object_projection = store.add("embed.objects", glorot(rng, config.channels, d))?;
        let cvm = CvmWeights::register(store, "cvm", config.channels, act, rng)?;
        let vahg = GraphModuleWeights::register(store, "vahg", d, act, rng)?;
        let qahg = GraphModuleWeights::register(store, "qahg", d, act, rng)?;
        let parser = ParserWeights::register(store, "parser", d, act, rng)?;
        let classifier = Affine::register(store, "classifier", d, 1, true, rng)?;
        Ok(Model {
            config,
            weights: ModelWeights {
                token_embedding,
                object_projection,
                cvm,
                vahg,
                qahg,
                parser,
                classifier,
            },
        })
    }

    /// Attaches `config` to weights already held by `store`, checking that
    /// names and shapes match the layout [`Model::new`] would produce.
    pub fn bind(config: ModelConfig, store: &ParameterStore) -> Result<Self> {
        let mut template = ParameterStore::new();
        let model = Model::new(config, &mut template, &mut ChaCha8Rng::seed_from_u64(0))?;
        if template.len() != store.len() {
            return Err(HglError::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.len(),
                store.len()
            )));
        }
        for (want, got) in template.params().iter().zip(store.params()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(HglError::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn check_instance(&self, inst: &Instance) -> Result<()> {
        inst.validate(self.config.vocab_size)?;
        if inst.scene.cols() != self.config.channels {
            return Err(HglError::dim("embed", inst.scene.shape(), &[inst.scene.rows(), self.config.channels]));
        }
        Ok(())
    }
}

/// Tape handles for the embedded inputs of one instance.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub grid: Var,
    pub cvm: Option<CvmOutput>,
    /// `N×d`.
    pub objects: Var,
    /// `M×d`.
    pub question: Var,
    /// One `B_k×d` per candidate.
    pub answers: Vec<Var>,
}

/// `N×P` matrix averaging the cells of each box.
pub fn box_pooling(boxes: &[Vec<usize>], positions: usize) -> Result<Tensor> {
    let mut pool = Tensor::zeros(&[boxes.len(), positions]);
    let d = pool.data_mut();
    for (k, b) in boxes.iter().enumerate() {
        if b.is_empty() {
            return Err(HglError::Contract(format!("box {k} is empty")));
        }
        let w = 1.0 / b.len() as f64;
        for &c in b {
            if c >= positions {
                return Err(HglError::Contract(format!("box {k} cell {c} outside the grid")));
            }
            d[k * positions + c] += w;
        }
    }
    Ok(pool)
}

pub fn embed(tape: &mut Tape, store: &ParameterStore, model: &Model, inst: &Instance) -> Result<Embedded> {
    model.check_instance(inst)?;
    let w = &model.weights;
    let grid = tape.input(inst.scene.clone());
    let (cvm, context) = if model.config.use_cvm {
        let out = cvm_forward(tape, store, grid, &w.cvm, model.config.residual_reading)?;
        (Some(out), out.output)
    } else {
        (None, grid)
    };
    let pool = tape.input(box_pooling(&inst.boxes, inst.scene.rows())?);
    let pooled = tape.matmul(pool, context)?;
    let proj = tape.param(store, w.object_projection);
    let objects = tape.matmul(pooled, proj)?;
    let table = tape.param(store, w.token_embedding);
    let question = tape.gather_rows(table, &inst.question)?;
    let answers = inst
        .candidates
        .iter()
        .map(|c| tape.gather_rows(table, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedded {
        grid,
        cvm,
        objects,
        question,
        answers,
    })
}

/// Intermediates of one candidate's score.
#[derive(Clone, Copy, Debug)]
pub struct CandidateTrace {
    pub vahg: Option<GraphOutput>,
    pub qahg: Option<GraphOutput>,
    /// Answer-to-answer graph used when both heterogeneous modules are off.
    pub homogeneous: Option<GraphOutput>,
    pub modality: ModalityWeights,
    /// `B×d` parsed representation.
    pub parsed: Var,
    /// `1×1`.
    pub logit: Var,
}

pub fn score_candidate(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &Model,
    x_obj: Var,
    x_query: Var,
    x_ans: Var,
) -> Result<CandidateTrace> {
    let w = &model.weights;
    let c = &model.config;
    let mode = c.adjacency_mode;
    let vahg = if c.use_vahg {
        Some(heterogeneous_forward(tape, store, x_obj, x_ans, &w.vahg, mode, Source::Vision)?)
    } else {
        None
    };
    let qahg = if c.use_qahg {
        Some(heterogeneous_forward(tape, store, x_query, x_ans, &w.qahg, mode, Source::Question)?)
    } else {
        None
    };
    let mut homogeneous = None;
    let (modality, parsed) = match (vahg, qahg) {
        (Some(v), Some(q)) => {
            let po = tape.mean_rows(x_obj)?;
            let pq = tape.mean_rows(x_query)?;
            let pa = tape.mean_rows(x_ans)?;
            let mw = modality_weights(tape, store, po, pq, pa, &w.parser)?;
            (mw, parse(tape, store, v.guided, q.guided, mw, &w.parser)?)
        }
        (Some(v), None) => {
            let mw = ModalityWeights::forced(tape, 1.0, 0.0);
            (mw, parse_single(tape, store, v.guided, mw.w_o, &w.parser)?)
        }
        (None, Some(q)) => {
            let mw = ModalityWeights::forced(tape, 0.0, 1.0);
            (mw, parse_single(tape, store, q.guided, mw.w_q, &w.parser)?)
        }
        (None, None) => {
            let h = heterogeneous_forward(tape, store, x_ans, x_ans, &w.vahg, mode, Source::Answer)?;
            homogeneous = Some(h);
            let mw = ModalityWeights::forced(tape, 1.0, 0.0);
            (mw, parse_single(tape, store, h.guided, mw.w_o, &w.parser)?)
        }
    };
    let pooled = tape.mean_rows(parsed)?;
    let logit = w.classifier.apply(tape, store, pooled)?;
    Ok(CandidateTrace {
        vahg,
        qahg,
        homogeneous,
        modality,
        parsed,
        logit,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `1×4`.
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub chosen: usize,
}

impl Prediction {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probabilities = tensor::softmax(&logits, SoftmaxMode::Global)?;
        let chosen = argmax_first(logits.data());
        Ok(Prediction {
            logits,
            probabilities,
            chosen,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub embedded: Embedded,
    pub candidates: Vec<CandidateTrace>,
    /// `1×4`.
    pub logits: Var,
}

impl ForwardTrace {
    pub fn prediction(&self, tape: &Tape) -> Result<Prediction> {
        Prediction::from_logits(tape.value(self.logits).clone())
    }
}

pub fn forward(tape: &mut Tape, store: &ParameterStore, model: &Model, inst: &Instance) -> Result<ForwardTrace> {
    let embedded = embed(tape, store, model, inst)?;
    let mut candidates = Vec::with_capacity(embedded.answers.len());
    for &ans in &embedded.answers {
        candidates.push(score_candidate(tape, store, model, embedded.objects, embedded.question, ans)?);
    }
    let mut logits = candidates[0].logit;
    for c in &candidates[1..] {
        logits = tape.concat(logits, c.logit)?;
    }
    Ok(ForwardTrace {
        embedded,
        candidates,
        logits,
    })
}

/// `−log softmax(logits)[gold]` as a `1×1` tape value.
pub fn loss(tape: &mut Tape, logits: Var, gold: usize) -> Result<Var> {
    let n = tape.shape(logits).iter().product::<usize>();
    if gold >= n {
        return Err(HglError::Contract(format!("gold index {gold} out of range for {n} choices")));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(logp, gold)?;
    tape.scale(picked, -1.0)
}

/// Forward pass without gradients.
pub fn predict(store: &ParameterStore, model: &Model, inst: &Instance) -> Result<(Prediction, Vec<(f64, f64)>)> {
    let mut tape = Tape::new();
    let trace = forward(&mut tape, store, model, inst)?;
    let mw = trace.candidates.iter().map(|c| c.modality.values(&tape)).collect();
    Ok((trace.prediction(&tape)?, mw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig, Task};

    fn tiny_instance() -> Instance {
        Instance {
            scene: Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.4, -0.5, 0.6], [0.7, 0.8, -0.9], [0.0, 0.5, 1.0]])
                .unwrap(),
            boxes: vec![vec![0], vec![2, 3]],
            question: vec![0, 1, 2],
            candidates: vec![vec![3, 4], vec![5], vec![1, 3, 5], vec![2, 2]],
            gold: 1,
            task: Task::Answer,
        }
    }

    fn tiny_model(store: &mut ParameterStore, seed: u64) -> Model {
        let cfg = ModelConfig {
            dim: 4,
            vocab_size: 6,
            channels: 3,
            ..ModelConfig::default()
        };
        Model::new(cfg, store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let mut store = ParameterStore::new();
        let model = tiny_model(&mut store, 1);
        store.zero_all();
        let (p, _) = predict(&store, &model, &tiny_instance()).unwrap();
        assert_eq!(p.logits.data(), &[0.0; 4]);
        assert_eq!(p.probabilities.data(), &[0.25; 4]);
        assert_eq!(p.chosen, 0);
    }

    #[test]
    fn identical_candidates_tie_at_index_zero() {
        let mut store = ParameterStore::new();
        let model = tiny_model(&mut store, 2);
        let mut inst = tiny_instance();
        inst.candidates = vec![vec![1, 4, 2]; 4];
        let (p, _) = predict(&store, &model, &inst).unwrap();
        assert!(p.probabilities.data().iter().all(|&v| v == 0.25));
        assert_eq!(p.chosen, 0);
    }

    #[test]
    fn zero_embedding_table_gives_zero_word_features() {
        let mut store = ParameterStore::new();
        let model = tiny_model(&mut store, 3);
        store.set(model.weights.token_embedding, Tensor::zeros(&[6, 4])).unwrap();
        let mut tape = Tape::new();
        let e = embed(&mut tape, &store, &model, &tiny_instance()).unwrap();
        assert!(tape.value(e.question).data().iter().all(|&v| v == 0.0));
        for a in e.answers {
            assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_cell_box_is_that_cell_projected() {
        let mut store = ParameterStore::new();
        let model = tiny_model(&mut store, 4);
        let inst = tiny_instance();
        let mut tape = Tape::new();
        let e = embed(&mut tape, &store, &model, &inst).unwrap();
        let cvm_out = tape.value(e.cvm.unwrap().output);
        let cell = Tensor::matrix(1, 3, cvm_out.row(0).to_vec()).unwrap();
        let expect = tensor::matmul(&cell, store.value(model.weights.object_projection)).unwrap();
        assert_eq!(tape.value(e.objects).row(0), expect.data());
    }

    #[test]
    fn out_of_range_token_rejected() {
        let mut store = ParameterStore::new();
        let model = tiny_model(&mut store, 5);
        let mut inst = tiny_instance();
        inst.question.push(6);
        assert!(predict(&store, &model, &inst).is_err());
    }

    #[test]
    fn loss_of_uniform_is_ln4_and_bad_gold_rejected() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::zeros(&[1, 4]));
        let l = loss(&mut tape, logits, 2).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(loss(&mut tape, logits, 4).is_err());
    }

    #[test]
    fn bind_accepts_own_layout_and_rejects_other_sizes() {
        let mut store = ParameterStore::new();
        let model = tiny_model(&mut store, 6);
        assert_eq!(Model::bind(model.config.clone(), &store).unwrap(), model);
        let other = ModelConfig {
            dim: 5,
            ..model.config.clone()
        };
        assert!(matches!(Model::bind(other, &store), Err(HglError::Checkpoint(_))));
        let back = ModelConfig::from_meta(&model.config.to_meta()).unwrap();
        assert_eq!(back, model.config);
    }

    #[test]
    fn ablated_models_run_on_generated_data() {
        let ds = generate(&GeneratorConfig {
            instances: 4,
            ..GeneratorConfig::default()
        })
        .unwrap();
        for (v, q, c) in [(true, true, true), (false, true, true), (true, false, true), (false, false, false)] {
            let cfg = ModelConfig {
                dim: 8,
                use_vahg: v,
                use_qahg: q,
                use_cvm: c,
                ..ModelConfig::default()
            };
            let mut store = ParameterStore::new();
            let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            for inst in &ds.instances {
                let (p, mw) = predict(&store, &model, inst).unwrap();
                assert!((p.probabilities.sum() - 1.0).abs() < 1e-12);
                for (wo, wq) in mw {
                    assert!((wo + wq - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
