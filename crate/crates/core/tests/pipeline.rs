use std::fs;

use hgl_core::autodiff::Tape;
use hgl_core::data::{self, GeneratorConfig, Task};
use hgl_core::nn::{mlp_apply, Mlp};
use hgl_core::params::ParameterStore;
use hgl_core::tensor::{Activation, Tensor};
use hgl_core::train::{self, load_checkpoint, TaskSelection, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bits(store: &ParameterStore) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn dataset_file_roundtrip_is_field_for_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig {
        instances: 100,
        seed: 17,
        ..GeneratorConfig::default()
    };
    let ds = data::generate(&cfg).unwrap();
    let path = dir.path().join("ds.jsonl");
    data::save(&ds, &path).unwrap();
    let back = data::load(&path).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.len(), 100);
    for (a, b) in ds.instances.iter().zip(&back.instances) {
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.question, b.question);
        assert_eq!(a.candidates, b.candidates);
        assert_eq!(a.gold, b.gold);
        assert_eq!(a.task, b.task);
        assert_eq!(a.scene.shape(), b.scene.shape());
        let (x, y): (Vec<u64>, Vec<u64>) = (
            a.scene.data().iter().map(|v| v.to_bits()).collect(),
            b.scene.data().iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(x, y);
    }

    let empty = ds.with_instances(Vec::new());
    let path = dir.path().join("empty.jsonl");
    data::save(&empty, &path).unwrap();
    assert_eq!(data::load(&path).unwrap(), empty);
}

#[test]
fn checkpoint_file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = hgl_core::model::Model::new(
        hgl_core::model::ModelConfig {
            dim: 8,
            ..Default::default()
        },
        &mut store,
        &mut rng,
    )
    .unwrap();
    // awkward values must survive too
    let id = model.weights.classifier.weight;
    let mut w = store.value(id).clone();
    w.data_mut()[0] = f64::MIN_POSITIVE / 3.0;
    w.data_mut()[1] = -0.0;
    w.data_mut()[2] = 1.0 / 3.0;
    store.set(id, w).unwrap();

    let path = dir.path().join("checkpoint.bin");
    store.save(&path, &model.config.to_meta()).unwrap();
    let (m2, s2) = load_checkpoint(&path).unwrap();
    assert_eq!(m2, model);
    assert_eq!(bits(&s2), bits(&store));
}

fn small_run(out: &std::path::Path) {
    let gen = GeneratorConfig {
        instances: 60,
        seed: 5,
        ..GeneratorConfig::default()
    };
    let (tr, va) = data::generate_split(&gen).unwrap();
    let cfg = TrainConfig {
        dim: 8,
        max_epochs: 2,
        batch_size: 8,
        seed: 9,
        task: TaskSelection::Both,
        ..TrainConfig::default()
    };
    train::train(&cfg, &tr, &va).unwrap().write(out).unwrap();
}

#[test]
fn identical_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_run(a.path());
    small_run(b.path());
    for name in ["checkpoint.bin", "metrics.csv", "summary.csv", "report.txt"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty(), "{name} is empty");
        assert_eq!(x, y, "{name} differs");
    }
    assert!(a.path().join("timing.txt").exists());
    let (model, _) = load_checkpoint(&a.path().join("checkpoint.bin")).unwrap();
    assert_eq!(model.config.dim, 8);
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut store = ParameterStore::new();
    let w = store.add("w", Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&store, w);
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_of_square_sum_doubles() {
    let mut store = ParameterStore::new();
    let w = store.add("w", Tensor::from_rows(&[[3.0]]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&store, w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[6.0]);
}

#[test]
fn mlp_by_name_matches_registered_layers() {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mlp = Mlp::register(&mut store, "m", &[3, 4, 2], Activation::Relu, &mut rng).unwrap();
    let x = Tensor::from_rows(&[[0.5, -1.0, 2.0], [0.0, 0.25, -0.75]]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let a = mlp.apply(&mut tape, &store, xv).unwrap();
    let b = mlp_apply(
        &mut tape,
        &store,
        xv,
        &[("m.0.weight", "m.0.bias"), ("m.1.weight", "m.1.bias")],
        Activation::Relu,
    )
    .unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert_eq!(tape.shape(a), &[2, 2]);
    assert!(mlp_apply(&mut tape, &store, xv, &[("m.9.weight", "m.9.bias")], Activation::Relu).is_err());
}

#[test]
fn answer_and_rationale_instances_share_scenes() {
    let ds = data::generate(&GeneratorConfig {
        instances: 20,
        ..GeneratorConfig::default()
    })
    .unwrap();
    for g in ds.scene_groups() {
        let tasks: Vec<Task> = ds.instances[g.clone()].iter().map(|i| i.task).collect();
        assert_eq!(tasks, vec![Task::Answer, Task::Rationale]);
        let (a, r) = (&ds.instances[g.start], &ds.instances[g.start + 1]);
        assert_eq!(a.scene, r.scene);
        let mut expect = a.question.clone();
        expect.extend(&a.candidates[a.gold]);
        assert_eq!(r.question, expect);
    }
}

#[test]
fn shipped_config_files_parse() {
    use hgl_core::config::KeyValues;
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let kv = KeyValues::from_file(&dir.join("reference-data.conf")).unwrap();
    let gen = GeneratorConfig::from_key_values(&kv).unwrap();
    assert_eq!(gen, GeneratorConfig::reference());
    let kv = KeyValues::from_file(&dir.join("ablation.conf")).unwrap();
    let cfg = TrainConfig::from_key_values(&kv).unwrap();
    assert_eq!(cfg.task, TaskSelection::Answer);
    assert_eq!(cfg.learning_rate, TrainConfig::default().learning_rate);
}
