//! Independent naive-loop reference implementations shared by the
//! integration and acceptance tests.

#![allow(dead_code)]

use hgl_core::cvm::ResidualReading;
use hgl_core::data::{Instance, Task};
use hgl_core::model::ModelConfig;
use hgl_core::params::{uniform, ParameterStore};
use hgl_core::tensor::{Activation, SoftmaxMode, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    uniform(rng, &[rows, cols], scale)
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn affine(x: &[Vec<f64>], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut out = mat_mul(x, w);
    if let Some(b) = b {
        for row in &mut out {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    out
}

pub fn relu(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn softmax_all(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = x.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().flatten().map(|v| (v - m).exp()).sum();
    x.iter().map(|r| r.iter().map(|v| (v - m).exp() / z).collect()).collect()
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
    r.iter().map(|v| (v - m).exp() / z).collect()
}

/// `A[i][j] = exp(⟨src_i, ans_j⟩) / Z`.
pub fn adjacency(src: &[Vec<f64>], ans: &[Vec<f64>], mode: SoftmaxMode) -> Vec<Vec<f64>> {
    let mut raw = vec![vec![0.0; ans.len()]; src.len()];
    for i in 0..src.len() {
        for j in 0..ans.len() {
            raw[i][j] = src[i].iter().zip(&ans[j]).map(|(a, b)| a * b).sum();
        }
    }
    match mode {
        SoftmaxMode::Global => softmax_all(&raw),
        SoftmaxMode::PerRow => raw.iter().map(|r| softmax_row(r)).collect(),
    }
}

/// `relu(Σ_i A[i][j] src_i · W)` for each answer word `j`.
pub fn graph_reason(adj: &[Vec<f64>], src: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = adj[0].len();
    let d = src[0].len();
    let mut gathered = vec![vec![0.0; d]; b];
    for j in 0..b {
        for i in 0..src.len() {
            for c in 0..d {
                gathered[j][c] += adj[i][j] * src[i][c];
            }
        }
    }
    relu(&mat_mul(&gathered, w))
}

/// `y_i = (1/P) Σ_j ⟨f_i, f_j⟩ g_j` with `f = x θ_f + b_f`, `g = x θ_g + b_g`.
pub fn nonlocal(
    x: &[Vec<f64>],
    tf: &[Vec<f64>],
    bf: &[f64],
    tg: &[Vec<f64>],
    bg: &[f64],
) -> Vec<Vec<f64>> {
    let p = x.len();
    let f = affine(x, tf, Some(bf));
    let g = affine(x, tg, Some(bg));
    let c = g[0].len();
    let mut y = vec![vec![0.0; c]; p];
    for i in 0..p {
        for j in 0..p {
            let dot: f64 = f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum();
            for k in 0..c {
                y[i][k] += dot * g[j][k];
            }
        }
        for v in &mut y[i] {
            *v /= p as f64;
        }
    }
    y
}

/// `a[i][j] = softmax_j(w · relu([x_i, x_j] Θ + b))`, where `Θ` stacks the
/// target block over the source block.
pub fn votes(x: &[Vec<f64>], target: &[Vec<f64>], source: &[Vec<f64>], b: &[f64], w: &[f64]) -> Vec<Vec<f64>> {
    let p = x.len();
    let c = x[0].len();
    let mut theta = target.to_vec();
    theta.extend(source.iter().cloned());
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let mut scores = Vec::with_capacity(p);
        for j in 0..p {
            let mut cat = x[i].clone();
            cat.extend_from_slice(&x[j]);
            let mut s = 0.0;
            for k in 0..c {
                let mut h = b[k];
                for (t, v) in cat.iter().enumerate() {
                    h += v * theta[t][k];
                }
                s += h.max(0.0) * w[k];
            }
            scores.push(s);
        }
        out.push(softmax_row(&scores));
    }
    out
}

/// `out_i = (Σ_j a[i][j] y_j) W_a + x_i`.
pub fn residual(x: &[Vec<f64>], y: &[Vec<f64>], a: &[Vec<f64>], wa: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let ctx = mat_mul(a, y);
    let mut out = mat_mul(&ctx, wa);
    for (o, xr) in out.iter_mut().zip(x) {
        for (v, xv) in o.iter_mut().zip(xr) {
            *v += xv;
        }
    }
    out
}

/// Scalar Adam with decoupled decay, for one coordinate over a gradient
/// sequence.
pub fn scalar_adam(mut w: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w = w - lr * mh / (vh.sqrt() + eps) - lr * wd * w;
    }
    w
}

/// `log Σ exp(x)` computed with the max shift.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn rand_dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn param(store: &ParameterStore, name: &str) -> Vec<Vec<f64>> {
    to_rows(store.value(store.id(name).unwrap()))
}

fn bias(store: &ParameterStore, name: &str) -> Vec<f64> {
    param(store, name).remove(0)
}

fn concat(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).cloned().collect()).collect()
}

fn mean_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut m = vec![0.0; x[0].len()];
    for r in x {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    vec![m.into_iter().map(|v| v / x.len() as f64).collect()]
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn scaled(a: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// Two-layer relu MLP registered as `{prefix}.0` and `{prefix}.1`.
fn mlp2(store: &ParameterStore, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h = relu(&affine(
        x,
        &param(store, &format!("{prefix}.0.weight")),
        Some(&bias(store, &format!("{prefix}.0.bias"))),
    ));
    affine(
        &h,
        &param(store, &format!("{prefix}.1.weight")),
        Some(&bias(store, &format!("{prefix}.1.bias"))),
    )
}

/// Guided representation of one heterogeneous module with relu activations.
pub fn graph_module(
    store: &ParameterStore,
    prefix: &str,
    src: &[Vec<f64>],
    ans: &[Vec<f64>],
    mode: SoftmaxMode,
) -> Vec<Vec<f64>> {
    let p = |n: &str| param(store, &format!("{prefix}.{n}"));
    let adj = adjacency(src, ans, mode);
    let evolved = graph_reason(&adj, src, &p("reason"));
    let enc = mlp2(store, &format!("{prefix}.encoder"), ans);
    let scores: Vec<f64> = mat_mul(&enc, &p("attention")).iter().map(|r| r[0]).collect();
    let att = softmax_row(&scores);
    let x_m: Vec<Vec<f64>> = enc.iter().zip(&att).map(|(r, a)| r.iter().map(|v| v * a).collect()).collect();
    let mid = mlp2(store, &format!("{prefix}.fuse"), &concat(&x_m, &evolved));
    let common = add(&mat_mul(&evolved, &p("map_src")), &mat_mul(&mid, &p("map_mid")));
    let inner = mlp2(store, &format!("{prefix}.guide_inner"), &common);
    mlp2(store, &format!("{prefix}.guide_outer"), &mat_mul(&inner, &p("senior")))
}

/// Four candidate logits of a relu model computed entirely with nested
/// loops, following the module definitions one by one.
pub fn model_logits(store: &ParameterStore, cfg: &ModelConfig, inst: &Instance) -> Vec<f64> {
    assert_eq!(cfg.activation, Activation::Relu);
    assert_eq!(cfg.residual_reading, ResidualReading::Aggregate);
    let grid = to_rows(&inst.scene);
    let context = if cfg.use_cvm {
        let y = nonlocal(
            &grid,
            &param(store, "cvm.affinity.weight"),
            &bias(store, "cvm.affinity.bias"),
            &param(store, "cvm.value.weight"),
            &bias(store, "cvm.value.bias"),
        );
        let score: Vec<f64> = param(store, "cvm.vote_score").iter().map(|r| r[0]).collect();
        let a = votes(
            &grid,
            &param(store, "cvm.pair_target"),
            &param(store, "cvm.pair_source.weight"),
            &bias(store, "cvm.pair_source.bias"),
            &score,
        );
        residual(&grid, &y, &a, &param(store, "cvm.vote_proj"))
    } else {
        grid
    };
    let pooled: Vec<Vec<f64>> = inst
        .boxes
        .iter()
        .map(|b| {
            let mut m = vec![0.0; context[0].len()];
            for &c in b {
                for (a, v) in m.iter_mut().zip(&context[c]) {
                    *a += v / b.len() as f64;
                }
            }
            m
        })
        .collect();
    let objects = mat_mul(&pooled, &param(store, "embed.objects"));
    let table = param(store, "embed.tokens");
    let lookup = |ids: &[usize]| -> Vec<Vec<f64>> { ids.iter().map(|&t| table[t].clone()).collect() };
    let question = lookup(&inst.question);
    let mode = cfg.adjacency_mode;

    inst.candidates
        .iter()
        .map(|cand| {
            let ans = lookup(cand);
            let merged = match (cfg.use_vahg, cfg.use_qahg) {
                (true, true) => {
                    let yv = graph_module(store, "vahg", &objects, &ans, mode);
                    let yq = graph_module(store, "qahg", &question, &ans, mode);
                    let pa = mean_rows(&ans);
                    let sv = mlp2(
                        store,
                        "parser.score_v",
                        &mat_mul(&concat(&mean_rows(&objects), &pa), &param(store, "parser.joint_obj")),
                    );
                    let sq = mlp2(
                        store,
                        "parser.score_q",
                        &mat_mul(&concat(&mean_rows(&question), &pa), &param(store, "parser.joint_query")),
                    );
                    let w = softmax_row(&[sv[0][0], sq[0][0]]);
                    add(&scaled(&yv, w[0]), &scaled(&yq, w[1]))
                }
                (true, false) => graph_module(store, "vahg", &objects, &ans, mode),
                (false, true) => graph_module(store, "qahg", &question, &ans, mode),
                (false, false) => graph_module(store, "vahg", &ans, &ans, mode),
            };
            let parsed = affine(
                &merged,
                &param(store, "parser.output.weight"),
                Some(&bias(store, "parser.output.bias")),
            );
            let logit = affine(
                &mean_rows(&parsed),
                &param(store, "classifier.weight"),
                Some(&bias(store, "classifier.bias")),
            );
            logit[0][0]
        })
        .collect()
}

/// Random instance with every size drawn from `1..=max`.
pub fn random_instance(rng: &mut ChaCha8Rng, vocab: usize, channels: usize, positions: usize, max: usize) -> Instance {
    let n = rng.random_range(1..=max);
    let boxes = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=positions.min(3));
            (0..k).map(|_| rng.random_range(0..positions)).collect()
        })
        .collect();
    let mut seq = |lo: usize| -> Vec<usize> {
        let len = rng.random_range(lo..=max);
        (0..len).map(|_| rng.random_range(0..vocab)).collect()
    };
    let question = seq(1);
    let candidates = (0..4).map(|_| seq(1)).collect();
    Instance {
        scene: rand_matrix(rng, positions, channels, 1.0),
        boxes,
        question,
        candidates,
        gold: rng.random_range(0..4),
        task: Task::Answer,
    }
}
