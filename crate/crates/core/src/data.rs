//! Synthetic multiple-choice scenes: generation, JSON-lines storage, and the
//! reference solvers used to validate a generated corpus.
//!
//! A scene is a `H×W` grid of feature cells. Object cells carry objectness,
//! category, action and color one-hots; background cells carry the scene's
//! weather one-hot. Questions ask what a named object is doing or what the
//! weather around it is, so answering needs both the question (which object)
//! and the grid (which attribute). Weather is only visible on background
//! cells, so object features pick it up only through positional context.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValues};
use crate::error::{HglError, Result};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = "hgl-synth/1";

/// Fixed token ids.
pub mod vocab {
    pub const WHAT: usize = 0;
    pub const IS: usize = 1;
    pub const THE: usize = 2;
    pub const DOING: usize = 3;
    pub const WEATHER: usize = 4;
    pub const IN: usize = 5;
    pub const BECAUSE: usize = 6;
    /// Padding word prepended to reach a sampled length.
    pub const FILLER: usize = 7;
    pub const CATEGORY: usize = 8;
    pub const ACTION: usize = 14;
    pub const COLOR: usize = 20;
    pub const WEATHER_KIND: usize = 26;
    pub const MIN_SIZE: usize = 30;

    pub fn name(id: usize) -> String {
        const WORDS: [&str; 8] = ["what", "is", "the", "doing", "weather", "in", "because", "so"];
        match id {
            0..=7 => WORDS[id].to_string(),
            8..=13 => format!("obj{}", id - CATEGORY),
            14..=19 => format!("act{}", id - ACTION),
            20..=25 => format!("color{}", id - COLOR),
            26..=29 => format!("weather{}", id - WEATHER_KIND),
            _ => format!("tok{id}"),
        }
    }
}

/// Grid channel layout.
pub mod channel {
    pub const OBJECTNESS: usize = 0;
    pub const CATEGORY: usize = 1;
    pub const ACTION: usize = 7;
    pub const COLOR: usize = 13;
    pub const WEATHER: usize = 19;
    pub const MIN_COUNT: usize = 23;
}

pub const CATEGORIES: usize = 6;
pub const ACTIONS: usize = 6;
pub const COLORS: usize = 6;
pub const WEATHERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Answer,
    Rationale,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Answer => "answer",
            Task::Rationale => "rationale",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorStrategy {
    /// Same object with a different value of the queried attribute.
    AttributeSwap,
    /// A true statement about a different object in the scene.
    LexicalOverlap,
    /// Uniform random tokens.
    Random,
}

impl DistractorStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DistractorStrategy::AttributeSwap => "attribute-swap",
            DistractorStrategy::LexicalOverlap => "lexical-overlap",
            DistractorStrategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attribute-swap" => Some(DistractorStrategy::AttributeSwap),
            "lexical-overlap" => Some(DistractorStrategy::LexicalOverlap),
            "random" => Some(DistractorStrategy::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub question_len_min: usize,
    pub question_len_max: usize,
    pub answer_len_min: usize,
    pub answer_len_max: usize,
    /// Total instances; each scene yields one answer and one rationale instance.
    pub instances: usize,
    pub train_fraction: f64,
    /// One strategy per distractor slot.
    pub distractors: [DistractorStrategy; 3],
    /// Half-width of the uniform noise added to every grid entry.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 40,
            grid_height: 4,
            grid_width: 4,
            channels: 24,
            objects_min: 2,
            objects_max: 4,
            question_len_min: 6,
            question_len_max: 8,
            answer_len_min: 3,
            answer_len_max: 5,
            instances: 2000,
            train_fraction: 0.8,
            distractors: [DistractorStrategy::AttributeSwap; 3],
            noise: 0.05,
            seed: 0,
        }
    }
}

const GENERATOR_KEYS: &[&str] = &[
    "vocab_size",
    "grid_height",
    "grid_width",
    "channels",
    "objects_min",
    "objects_max",
    "question_len_min",
    "question_len_max",
    "answer_len_min",
    "answer_len_max",
    "instances",
    "train_fraction",
    "distractors",
    "noise",
    "seed",
];

impl GeneratorConfig {
    /// The corpus used for the ablation grid: 6,000 scenes split into
    /// 10,000 training and 2,000 validation instances.
    pub fn reference() -> Self {
        GeneratorConfig {
            instances: 12_000,
            train_fraction: 5.0 / 6.0,
            seed: 2024,
            ..Self::default()
        }
    }

    pub fn positions(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(GENERATOR_KEYS)?;
        let mut c = Self::default();
        kv.read("vocab_size", &mut c.vocab_size)?;
        kv.read("grid_height", &mut c.grid_height)?;
        kv.read("grid_width", &mut c.grid_width)?;
        kv.read("channels", &mut c.channels)?;
        kv.read("objects_min", &mut c.objects_min)?;
        kv.read("objects_max", &mut c.objects_max)?;
        kv.read("question_len_min", &mut c.question_len_min)?;
        kv.read("question_len_max", &mut c.question_len_max)?;
        kv.read("answer_len_min", &mut c.answer_len_min)?;
        kv.read("answer_len_max", &mut c.answer_len_max)?;
        kv.read("instances", &mut c.instances)?;
        kv.read("train_fraction", &mut c.train_fraction)?;
        kv.read_with("distractors", &mut c.distractors, |s| {
            let v: Option<Vec<_>> = s.split(',').map(|p| DistractorStrategy::parse(p.trim())).collect();
            match v?.as_slice() {
                &[one] => Some([one; 3]),
                slots => slots.try_into().ok(),
            }
        })?;
        kv.read("noise", &mut c.noise)?;
        kv.read("seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> String {
        let d: Vec<&str> = self.distractors.iter().map(|s| s.name()).collect();
        config::render(&[
            ("vocab_size", self.vocab_size.to_string()),
            ("grid_height", self.grid_height.to_string()),
            ("grid_width", self.grid_width.to_string()),
            ("channels", self.channels.to_string()),
            ("objects_min", self.objects_min.to_string()),
            ("objects_max", self.objects_max.to_string()),
            ("question_len_min", self.question_len_min.to_string()),
            ("question_len_max", self.question_len_max.to_string()),
            ("answer_len_min", self.answer_len_min.to_string()),
            ("answer_len_max", self.answer_len_max.to_string()),
            ("instances", self.instances.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("distractors", d.join(",")),
            ("noise", self.noise.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    /// Checks that ranges are well formed.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HglError::Config(m));
        if self.vocab_size < vocab::MIN_SIZE {
            return bad(format!("vocab_size must be at least {}", vocab::MIN_SIZE));
        }
        if self.channels < channel::MIN_COUNT {
            return bad(format!("channels must be at least {}", channel::MIN_COUNT));
        }
        if self.positions() == 0 {
            return bad("grid must have at least one cell".into());
        }
        for (name, lo, hi) in [
            ("objects", self.objects_min, self.objects_max),
            ("question_len", self.question_len_min, self.question_len_max),
            ("answer_len", self.answer_len_min, self.answer_len_max),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5)".into());
        }
        if self.instances % 2 != 0 {
            return bad("instances must be even (one answer and one rationale per scene)".into());
        }
        Ok(())
    }

    /// Checks that scenes and distractors can always be produced.
    fn check_feasible(&self) -> Result<()> {
        let fail = |m: String| Err(HglError::Generation(m));
        if self.objects_max >= self.positions() {
            return fail(format!(
                "{} objects need more than {} grid cells",
                self.objects_max,
                self.positions()
            ));
        }
        if self.objects_max > CATEGORIES {
            return fail(format!("at most {CATEGORIES} objects per scene"));
        }
        let count = |s| self.distractors.iter().filter(|&&d| d == s).count();
        let swaps = count(DistractorStrategy::AttributeSwap);
        if swaps >= ACTIONS.min(COLORS).min(WEATHERS) {
            return fail(format!("{swaps} attribute swaps exceed the attribute values"));
        }
        let overlaps = count(DistractorStrategy::LexicalOverlap);
        if overlaps >= self.objects_min {
            return fail(format!(
                "{overlaps} lexical-overlap distractors need at least {} objects",
                overlaps + 1
            ));
        }
        if self.question_len_max < 6 {
            return fail("questions need at least 6 tokens".into());
        }
        if self.answer_len_max < 4 {
            return fail("responses need at least 4 tokens".into());
        }
        Ok(())
    }
}

/// One four-way multiple-choice problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// `P×C` raw grid.
    pub scene: Tensor,
    /// Cell indices covered by each object.
    pub boxes: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gold: usize,
    pub task: Task,
}

impl Instance {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |m: String| Err(HglError::Contract(m));
        let p = self.scene.rows();
        if self.scene.shape().len() != 2 || p == 0 || self.scene.cols() == 0 {
            return bad(format!("scene shape {:?}", self.scene.shape()));
        }
        if self.boxes.is_empty() {
            return bad("scene has no objects".into());
        }
        for b in &self.boxes {
            if b.is_empty() || b.iter().any(|&c| c >= p) {
                return bad(format!("box {b:?} outside a {p}-cell grid"));
            }
        }
        if self.question.is_empty() {
            return bad("empty question".into());
        }
        if self.candidates.len() != 4 {
            return bad(format!("{} candidates, expected 4", self.candidates.len()));
        }
        if self.candidates.iter().any(Vec::is_empty) {
            return bad("empty candidate".into());
        }
        if self.gold >= 4 {
            return bad(format!("gold index {} out of range", self.gold));
        }
        let tokens = self.question.iter().chain(self.candidates.iter().flatten());
        if let Some(t) = tokens.copied().find(|&t| t >= vocab_size) {
            return bad(format!("token {t} outside vocabulary of {vocab_size}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub generator_version: String,
    pub seed: u64,
    pub vocab_size: usize,
    pub positions: usize,
    pub channels: usize,
    pub config: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn empty(config: &GeneratorConfig) -> Self {
        Dataset {
            meta: DatasetMeta {
                generator_version: GENERATOR_VERSION.to_string(),
                seed: config.seed,
                vocab_size: config.vocab_size,
                positions: config.positions(),
                channels: config.channels,
                config: config.clone(),
            },
            instances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn with_instances(&self, instances: Vec<Instance>) -> Self {
        Dataset {
            meta: self.meta.clone(),
            instances,
        }
    }

    pub fn filter_task(&self, task: Task) -> Self {
        self.with_instances(self.instances.iter().filter(|i| i.task == task).cloned().collect())
    }

    /// Runs of consecutive instances sharing a scene, as index ranges.
    pub fn scene_groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for i in 1..=self.instances.len() {
            if i == self.instances.len() || self.instances[i].scene != self.instances[start].scene {
                if i > start {
                    groups.push(start..i);
                }
                start = i;
            }
        }
        groups
    }

    /// Splits whole scenes, so an answer instance and its rationale
    /// always land on the same side.
    pub fn split(&self, train_fraction: f64) -> (Dataset, Dataset) {
        let groups = self.scene_groups();
        let n_train = (groups.len() as f64 * train_fraction).round() as usize;
        let cut = groups.get(n_train).map_or(self.instances.len(), |g| g.start);
        (
            self.with_instances(self.instances[..cut].to_vec()),
            self.with_instances(self.instances[cut..].to_vec()),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SceneObject {
    category: usize,
    action: usize,
    color: usize,
    cells: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Scene {
    objects: Vec<SceneObject>,
    weather: usize,
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    config.check_feasible()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ds = Dataset::empty(config);
    for _ in 0..config.instances / 2 {
        let scene = sample_scene(config, &mut rng);
        let grid = render_grid(config, &scene, &mut rng);
        let (answer, rationale) = sample_pair(config, &scene, grid, &mut rng)?;
        ds.instances.push(answer);
        ds.instances.push(rationale);
    }
    Ok(ds)
}

/// [`generate`] followed by a scene-level train/validation split.
pub fn generate_split(config: &GeneratorConfig) -> Result<(Dataset, Dataset)> {
    Ok(generate(config)?.split(config.train_fraction))
}

fn sample_scene(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = (config.grid_height, config.grid_width);
    let p = h * w;
    let n = rng.random_range(config.objects_min..=config.objects_max);
    let mut categories: Vec<usize> = (0..CATEGORIES).collect();
    categories.shuffle(rng);

    let mut free: Vec<bool> = vec![true; p];
    let mut free_count = p;
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(rng);
    let mut objects = Vec::with_capacity(n);
    for (k, &category) in categories.iter().take(n).enumerate() {
        let first = *order.iter().find(|&&c| free[c]).expect("fewer objects than cells");
        free[first] = false;
        free_count -= 1;
        let mut cells = vec![first];
        // A second cell is only taken if every later object still fits and a
        // background cell remains.
        let remaining = n - k - 1;
        if free_count > remaining + 1 && rng.random_bool(0.5) {
            let (r, c) = (first / w, first % w);
            let mut nbrs = Vec::new();
            if r > 0 {
                nbrs.push(first - w);
            }
            if r + 1 < h {
                nbrs.push(first + w);
            }
            if c > 0 {
                nbrs.push(first - 1);
            }
            if c + 1 < w {
                nbrs.push(first + 1);
            }
            nbrs.retain(|&x| free[x]);
            if let Some(&x) = nbrs.choose(rng) {
                free[x] = false;
                free_count -= 1;
                cells.push(x);
                cells.sort_unstable();
            }
        }
        objects.push(SceneObject {
            category,
            action: rng.random_range(0..ACTIONS),
            color: rng.random_range(0..COLORS),
            cells,
        });
    }
    Scene {
        objects,
        weather: rng.random_range(0..WEATHERS),
    }
}

fn render_grid(config: &GeneratorConfig, scene: &Scene, rng: &mut ChaCha8Rng) -> Tensor {
    let (p, c) = (config.positions(), config.channels);
    let mut grid = Tensor::zeros(&[p, c]);
    let mut covered = vec![false; p];
    {
        let d = grid.data_mut();
        for o in &scene.objects {
            for &cell in &o.cells {
                covered[cell] = true;
                let row = &mut d[cell * c..(cell + 1) * c];
                row[channel::OBJECTNESS] = 1.0;
                row[channel::CATEGORY + o.category] = 1.0;
                row[channel::ACTION + o.action] = 1.0;
                row[channel::COLOR + o.color] = 1.0;
            }
        }
        for cell in (0..p).filter(|&x| !covered[x]) {
            d[cell * c + channel::WEATHER + scene.weather] = 1.0;
        }
        if config.noise > 0.0 {
            for v in d.iter_mut() {
                *v += rng.random_range(-config.noise..config.noise);
            }
        }
    }
    grid
}

fn pad(mut tokens: Vec<usize>, len: usize) -> Vec<usize> {
    if tokens.len() < len {
        let mut out = vec![vocab::FILLER; len - tokens.len()];
        out.append(&mut tokens);
        out
    } else {
        tokens
    }
}

/// Random tokens of length `len`, resampled until distinct from every
/// sequence in `taken`. Fails if no distinct sequence exists.
pub fn random_distractor(
    rng: &mut impl Rng,
    vocab_size: usize,
    len: usize,
    taken: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let space = (vocab_size as f64).powi(len as i32);
    if space <= taken.len() as f64 {
        return Err(HglError::Generation(format!(
            "no unused sequence of length {len} over {vocab_size} tokens"
        )));
    }
    loop {
        let cand: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
        if !taken.contains(&cand) {
            return Ok(cand);
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Action,
    Weather,
}

fn sample_len(rng: &mut ChaCha8Rng, lo: usize, hi: usize, base: usize) -> usize {
    rng.random_range(lo.max(base)..=hi.max(base))
}

fn sample_pair(
    config: &GeneratorConfig,
    scene: &Scene,
    grid: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Instance, Instance)> {
    use vocab::*;
    let kind = if rng.random_bool(0.5) {
        Kind::Action
    } else {
        Kind::Weather
    };
    let referent = rng.random_range(0..scene.objects.len());
    let obj = &scene.objects[referent];
    let cat = CATEGORY + obj.category;

    let base_q = match kind {
        Kind::Action => vec![WHAT, IS, THE, cat, DOING],
        Kind::Weather => vec![WHAT, WEATHER, IS, THE, cat, IN],
    };
    let m = sample_len(rng, config.question_len_min, config.question_len_max, base_q.len());
    let question = pad(base_q, m);

    let answer_for = |o: &SceneObject, weather: usize| match kind {
        Kind::Action => vec![CATEGORY + o.category, ACTION + o.action],
        Kind::Weather => vec![CATEGORY + o.category, IN, WEATHER_KIND + weather],
    };
    // Rationales name the referent's color for both question kinds, so a
    // rationale never restates the value its answer already fixed.
    let rationale_for = |o: &SceneObject| vec![BECAUSE, CATEGORY + o.category, IS, COLOR + o.color];
    let boxes: Vec<Vec<usize>> = scene.objects.iter().map(|o| o.cells.clone()).collect();

    let make = |task: Task, question: Vec<usize>, rng: &mut ChaCha8Rng| -> Result<Instance> {
        let gold_seq = match task {
            Task::Answer => answer_for(obj, scene.weather),
            Task::Rationale => rationale_for(obj),
        };
        let b = sample_len(rng, config.answer_len_min, config.answer_len_max, gold_seq.len());
        let mut taken = vec![pad(gold_seq, b)];
        let mut used_values: Vec<usize> = Vec::new();
        let mut used_objects: Vec<usize> = vec![referent];
        // random fills go last so they can avoid every structured distractor
        let mut order = config.distractors;
        order.sort_by_key(|&s| s == DistractorStrategy::Random);
        for strategy in order {
            let seq = match strategy {
                DistractorStrategy::AttributeSwap => {
                    let mut o = obj.clone();
                    let mut weather = scene.weather;
                    match (kind, task) {
                        (Kind::Action, Task::Answer) => {
                            o.action = pick_other(rng, ACTIONS, obj.action, &used_values);
                            used_values.push(o.action);
                        }
                        (_, Task::Rationale) => {
                            o.color = pick_other(rng, COLORS, obj.color, &used_values);
                            used_values.push(o.color);
                        }
                        (Kind::Weather, Task::Answer) => {
                            weather = pick_other(rng, WEATHERS, scene.weather, &used_values);
                            used_values.push(weather);
                        }
                    }
                    let seq = match task {
                        Task::Answer => answer_for(&o, weather),
                        Task::Rationale => rationale_for(&o),
                    };
                    pad(seq, b)
                }
                DistractorStrategy::LexicalOverlap => {
                    let others: Vec<usize> =
                        (0..scene.objects.len()).filter(|k| !used_objects.contains(k)).collect();
                    let &k = others.choose(rng).expect("feasibility checked");
                    used_objects.push(k);
                    let o = &scene.objects[k];
                    let seq = match task {
                        Task::Answer => answer_for(o, scene.weather),
                        Task::Rationale => rationale_for(o),
                    };
                    pad(seq, b)
                }
                DistractorStrategy::Random => random_distractor(rng, config.vocab_size, b, &taken)?,
            };
            debug_assert!(!taken.contains(&seq));
            taken.push(seq);
        }
        let gold = rng.random_range(0..4);
        let gold_seq = taken.remove(0);
        taken.insert(gold, gold_seq);
        Ok(Instance {
            scene: grid.clone(),
            boxes: boxes.clone(),
            question,
            candidates: taken,
            gold,
            task,
        })
    };

    let answer = make(Task::Answer, question.clone(), rng)?;
    let mut rq = question;
    rq.extend_from_slice(&answer.candidates[answer.gold]);
    let rationale = make(Task::Rationale, rq, rng)?;
    Ok((answer, rationale))
}

/// Uniform choice among `0..n` excluding `own` and `used`.
fn pick_other(rng: &mut ChaCha8Rng, n: usize, own: usize, used: &[usize]) -> usize {
    let pool: Vec<usize> = (0..n).filter(|&v| v != own && !used.contains(&v)).collect();
    *pool.choose(rng).expect("feasibility checked")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene: Vec<Vec<f64>>,
    boxes: Vec<Vec<usize>>,
    question: Vec<usize>,
    candidates: Vec<Vec<usize>>,
    gold: usize,
    task: Task,
}

fn to_record(inst: &Instance) -> Record {
    Record {
        scene: (0..inst.scene.rows()).map(|r| inst.scene.row(r).to_vec()).collect(),
        boxes: inst.boxes.clone(),
        question: inst.question.clone(),
        candidates: inst.candidates.clone(),
        gold: inst.gold,
        task: inst.task,
    }
}

fn from_record(r: Record, meta: &DatasetMeta, line: usize) -> Result<Instance> {
    let schema = |reason: String| HglError::Schema { line, reason };
    if r.candidates.len() != 4 {
        return Err(schema(format!("expected 4 candidates, found {}", r.candidates.len())));
    }
    if r.scene.len() != meta.positions || r.scene.iter().any(|row| row.len() != meta.channels) {
        return Err(schema(format!(
            "scene must be {}×{}",
            meta.positions, meta.channels
        )));
    }
    let data: Vec<f64> = r.scene.into_iter().flatten().collect();
    let scene = Tensor::new(vec![meta.positions, meta.channels], data).map_err(|e| schema(e.to_string()))?;
    let inst = Instance {
        scene,
        boxes: r.boxes,
        question: r.question,
        candidates: r.candidates,
        gold: r.gold,
        task: r.task,
    };
    inst.validate(meta.vocab_size).map_err(|e| schema(e.to_string()))?;
    if !inst.scene.is_finite() {
        return Err(schema("non-finite scene value".into()));
    }
    Ok(inst)
}

pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    let meta = serde_json::to_string(&ds.meta).map_err(|e| HglError::Contract(e.to_string()))?;
    let werr = |e: std::io::Error| HglError::io("<dataset stream>", e);
    writeln!(out, "#meta {meta}").map_err(werr)?;
    for inst in &ds.instances {
        let line = serde_json::to_string(&to_record(inst)).map_err(|e| HglError::Contract(e.to_string()))?;
        writeln!(out, "{line}").map_err(werr)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let read_err = |line: usize, e: std::io::Error| HglError::Parse {
        line,
        reason: e.to_string(),
    };
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| read_err(1, e))?,
        None => {
            return Err(HglError::Parse {
                line: 1,
                reason: "missing `#meta` header".into(),
            })
        }
    };
    let meta_json = header.strip_prefix("#meta ").ok_or_else(|| HglError::Parse {
        line: 1,
        reason: "first line must start with `#meta `".into(),
    })?;
    let meta: DatasetMeta = serde_json::from_str(meta_json).map_err(|e| HglError::Schema {
        line: 1,
        reason: e.to_string(),
    })?;
    let mut instances = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let text = l.map_err(|e| read_err(line, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&text).map_err(|e| {
            let reason = e.to_string();
            if e.is_data() {
                HglError::Schema { line, reason }
            } else {
                HglError::Parse { line, reason }
            }
        })?;
        instances.push(from_record(rec, &meta, line)?);
    }
    Ok(Dataset { meta, instances })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HglError::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| HglError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_dataset(ds, &mut w)?;
    w.flush().map_err(|e| HglError::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| HglError::io(path, e))?;
    read_dataset(BufReader::new(f))
}

/// Attributes read back from a rendered grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedScene {
    /// `(category, action, color)` per box.
    pub objects: Vec<(usize, usize, usize)>,
    pub weather: Option<usize>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn mean_channels(scene: &Tensor, cells: &[usize], from: usize, count: usize) -> Vec<f64> {
    let mut acc = vec![0.0; count];
    for &cell in cells {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += scene.get(cell, from + k);
        }
    }
    acc
}

pub fn decode_scene(inst: &Instance) -> DecodedScene {
    let s = &inst.scene;
    let objects = inst
        .boxes
        .iter()
        .map(|b| {
            (
                argmax(&mean_channels(s, b, channel::CATEGORY, CATEGORIES)),
                argmax(&mean_channels(s, b, channel::ACTION, ACTIONS)),
                argmax(&mean_channels(s, b, channel::COLOR, COLORS)),
            )
        })
        .collect();
    let covered: HashSet<usize> = inst.boxes.iter().flatten().copied().collect();
    let background: Vec<usize> = (0..s.rows()).filter(|c| !covered.contains(c)).collect();
    let weather =
        (!background.is_empty()).then(|| argmax(&mean_channels(s, &background, channel::WEATHER, WEATHERS)));
    DecodedScene { objects, weather }
}

fn strip_filler(seq: &[usize]) -> &[usize] {
    let start = seq.iter().position(|&t| t != vocab::FILLER).unwrap_or(seq.len());
    &seq[start..]
}

/// Reads the grid symbolically and returns the single candidate consistent
/// with it, or `None` if zero or several are.
pub fn symbolic_answer(inst: &Instance) -> Option<usize> {
    use vocab::*;
    let scene = decode_scene(inst);
    let cat_range = CATEGORY..CATEGORY + CATEGORIES;
    let referent = inst.question.iter().copied().find(|t| cat_range.contains(t))? - CATEGORY;
    let weather_q = inst.question.contains(&WEATHER);
    let obj = scene.objects.iter().find(|o| o.0 == referent)?;
    let consistent = |cand: &[usize]| -> bool {
        let c = strip_filler(cand);
        let head = CATEGORY + referent;
        match (inst.task, weather_q) {
            (Task::Answer, false) => c == [head, ACTION + obj.1],
            (Task::Answer, true) => scene.weather.is_some_and(|w| c == [head, IN, WEATHER_KIND + w]),
            (Task::Rationale, _) => c == [BECAUSE, head, IS, COLOR + obj.2],
        }
    };
    let hits: Vec<usize> = (0..inst.candidates.len()).filter(|&k| consistent(&inst.candidates[k])).collect();
    (hits.len() == 1).then(|| hits[0])
}

/// Ignores the scene and picks the candidate sharing the most non-filler
/// tokens with the question; ties go to the lowest index.
pub fn lexical_answer(inst: &Instance) -> usize {
    let q: HashSet<usize> = inst.question.iter().copied().collect();
    let scores: Vec<f64> = inst
        .candidates
        .iter()
        .map(|c| c.iter().filter(|&&t| t != vocab::FILLER && q.contains(&t)).count() as f64)
        .collect();
    argmax(&scores)
}

/// Most frequent gold position in `fit`.
pub fn position_prior(fit: &[Instance]) -> usize {
    let mut counts = [0.0f64; 4];
    for inst in fit {
        counts[inst.gold] += 1.0;
    }
    argmax(&counts)
}

/// Fraction of instances where `choose` returns the gold index.
pub fn oracle_accuracy(instances: &[Instance], choose: impl Fn(&Instance) -> Option<usize>) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let hits = instances.iter().filter(|i| choose(i) == Some(i.gold)).count();
    hits as f64 / instances.len() as f64
}
