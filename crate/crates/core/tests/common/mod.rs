//! Helpers shared by the integration suites: a central-difference gradient
//! checker and independently written brute-force oracles for the sampling,
//! grouping, and metric code. The oracles deliberately use the dumbest
//! possible formulation (full rescans, full sorts, per-pair counting) so
//! they share no shortcuts with the implementations under test.
#![allow(dead_code)]

use pointstage::aggregation::{
    aggregate, init_aggregation, AggVariant, AggregationConfig, GroupPlan,
};
use pointstage::encoding::Fusion;
use pointstage::network::{BatchInput, Model, NetworkConfig, Task};
use pointstage::nn::{ForwardCtx, ParamStore};
use pointstage::tensor::{Graph, Mode, Tensor, TensorId};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// gradient checking

/// Infinity-norm relative error between an analytic gradient and its
/// finite-difference estimate: ||a - f||_inf / max(||f||_inf, floor).
pub fn grad_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), fd.len(), "gradient length mismatch");
    let diff = analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs())
        .fold(0.0f64, f64::max);
    let scale = fd.iter().map(|f| f.abs()).fold(0.0f64, f64::max);
    diff / scale.max(floor)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let above = f(&probe);
        probe[i] = orig - h;
        let below = f(&probe);
        probe[i] = orig;
        grad[i] = (above - below) / (2.0 * h);
    }
    grad
}

/// Deterministic values in [lo, hi) for building test tensors.
pub fn random_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// One finite-difference check of a single graph operation.
///
/// `build` reconstructs the op on a fresh graph from parameter tensors (one
/// per entry of `shapes`) and returns its output. The output is scalarized
/// with a fixed random weighting so every element contributes a distinct
/// gradient signal, then the analytic tape gradient of every parameter is
/// compared against central differences.
pub fn check_op(
    name: &str,
    seed: u64,
    inits: &[Vec<f64>],
    shapes: &[Vec<usize>],
    build: impl Fn(&mut Graph, &[TensorId]) -> TensorId,
) -> f64 {
    assert_eq!(inits.len(), shapes.len());
    let total: usize = inits.iter().map(|v| v.len()).sum();
    let flat: Vec<f64> = inits.iter().flatten().copied().collect();

    let run = |values: &[f64], want_grads: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (init, shape) in inits.iter().zip(shapes) {
            let part = &values[offset..offset + init.len()];
            offset += init.len();
            ids.push(g.param(Tensor::new(shape.clone(), part.to_vec()).unwrap()));
        }
        let out = build(&mut g, &ids);
        let loss = if g.value(out).numel() == 1 {
            g.sum_all(out)
        } else {
            let numel = g.value(out).numel();
            let shape = g.value(out).shape().to_vec();
            let weights = random_vec(seed ^ 0x5eed, numel, -1.0, 1.0);
            let w = g.input(Tensor::new(shape, weights).unwrap());
            let prod = g.mul(out, w).unwrap();
            g.sum_all(prod)
        };
        let loss_val = g.value(loss).data()[0];
        if !want_grads {
            return (loss_val, Vec::new());
        }
        g.backward(loss).unwrap();
        let mut grads = Vec::with_capacity(total);
        for &id in &ids {
            match g.grad(id) {
                Some(gr) => grads.extend_from_slice(gr),
                None => grads.extend(std::iter::repeat(0.0).take(g.value(id).numel())),
            }
        }
        (loss_val, grads)
    };

    let (_, analytic) = run(&flat, true);
    let fd = fd_gradient(|v| run(v, false).0, &flat, 1e-5);
    let err = grad_rel_err(&analytic, &fd, 1e-6);
    assert!(
        err.is_finite(),
        "{name}: non-finite gradient comparison (analytic or fd produced NaN)"
    );
    err
}

// ---------------------------------------------------------------------------
// the per-op catalog

/// Every differentiable operation, by check name.
pub const OP_NAMES: &[&str] = &[
    "linear",
    "linear_nobias",
    "relu",
    "sigmoid",
    "sin",
    "cos",
    "add",
    "mul",
    "reduce_max",
    "reduce_mean",
    "reduce_mean_axis0",
    "sum_all",
    "concat_axis1",
    "concat_axis0",
    "gather_rows",
    "interp_rows",
    "reshape",
    "batch_norm_train",
    "batch_norm_eval",
    "cross_entropy",
    "cross_entropy_smoothed",
];

/// Values bounded away from zero so relu stays off its kink and a 1e-5
/// probe cannot cross it.
fn kink_free_vec(seed: u64, n: usize) -> Vec<f64> {
    random_vec(seed, n, 0.1, 1.0)
        .into_iter()
        .zip(random_vec(seed ^ 1, n, -1.0, 1.0))
        .map(|(mag, sign)| if sign < 0.0 { -mag } else { mag })
        .collect()
}

/// Values for a [3, 5, 2] tensor whose middle-axis slices each hold five
/// distinct multiples of 0.1, so every running maximum has a unique winner
/// with a gap no probe step can close. (3 is coprime to 5, so j*3 mod 5
/// walks all residues within a slice.)
fn tie_free_352() -> Vec<f64> {
    (0..30)
        .map(|f| {
            let o = f / 10;
            let j = (f / 2) % 5;
            let i = f % 2;
            0.1 * ((j * 3 + o * 2 + i) % 5) as f64 - 0.2
        })
        .collect()
}

/// Finite-difference check of one named operation; returns its rel err.
pub fn op_case(name: &str) -> f64 {
    match name {
        "linear" => check_op(
            name,
            11,
            &[random_vec(1, 4 * 5, -1.0, 1.0), random_vec(2, 5 * 3, -1.0, 1.0), random_vec(3, 3, -1.0, 1.0)],
            &[vec![4, 5], vec![5, 3], vec![3]],
            |g, ids| g.linear(ids[0], ids[1], Some(ids[2])).unwrap(),
        ),
        "linear_nobias" => check_op(
            name,
            12,
            &[random_vec(4, 2 * 3 * 4, -1.0, 1.0), random_vec(5, 4 * 6, -1.0, 1.0)],
            &[vec![2, 3, 4], vec![4, 6]],
            |g, ids| g.linear(ids[0], ids[1], None).unwrap(),
        ),
        "relu" => check_op(name, 13, &[kink_free_vec(6, 24)], &[vec![4, 6]], |g, ids| g.relu(ids[0])),
        "sigmoid" => check_op(
            name,
            14,
            &[random_vec(7, 18, -2.0, 2.0)],
            &[vec![3, 6]],
            |g, ids| g.sigmoid(ids[0]),
        ),
        "sin" => check_op(name, 15, &[random_vec(8, 20, -3.0, 3.0)], &[vec![4, 5]], |g, ids| g.sin(ids[0])),
        "cos" => check_op(name, 16, &[random_vec(9, 20, -3.0, 3.0)], &[vec![4, 5]], |g, ids| g.cos(ids[0])),
        "add" => check_op(
            name,
            17,
            &[random_vec(10, 12, -1.0, 1.0), random_vec(11, 12, -1.0, 1.0)],
            &[vec![3, 4], vec![3, 4]],
            |g, ids| g.add(ids[0], ids[1]).unwrap(),
        ),
        "mul" => check_op(
            name,
            19,
            &[random_vec(14, 12, -1.0, 1.0), random_vec(15, 12, -1.0, 1.0)],
            &[vec![3, 4], vec![3, 4]],
            |g, ids| g.mul(ids[0], ids[1]).unwrap(),
        ),
        "reduce_max" => check_op(
            name,
            21,
            &[tie_free_352()],
            &[vec![3, 5, 2]],
            |g, ids| g.reduce_max(ids[0], 1).unwrap(),
        ),
        "reduce_mean" => check_op(
            name,
            22,
            &[random_vec(18, 30, -1.0, 1.0)],
            &[vec![3, 5, 2]],
            |g, ids| g.reduce_mean(ids[0], 1).unwrap(),
        ),
        "reduce_mean_axis0" => check_op(
            name,
            23,
            &[random_vec(19, 20, -1.0, 1.0)],
            &[vec![4, 5]],
            |g, ids| g.reduce_mean(ids[0], 0).unwrap(),
        ),
        "sum_all" => check_op(
            name,
            24,
            &[random_vec(20, 15, -1.0, 1.0)],
            &[vec![3, 5]],
            |g, ids| g.sum_all(ids[0]),
        ),
        "concat_axis1" => check_op(
            name,
            25,
            &[random_vec(21, 12, -1.0, 1.0), random_vec(22, 8, -1.0, 1.0)],
            &[vec![4, 3], vec![4, 2]],
            |g, ids| g.concat(&[ids[0], ids[1]], 1).unwrap(),
        ),
        "concat_axis0" => check_op(
            name,
            26,
            &[random_vec(23, 6, -1.0, 1.0), random_vec(24, 9, -1.0, 1.0)],
            &[vec![2, 3], vec![3, 3]],
            |g, ids| g.concat(&[ids[0], ids[1]], 0).unwrap(),
        ),
        // Row 2 appears three times, so its gradient accumulates across copies.
        "gather_rows" => check_op(
            name,
            27,
            &[random_vec(25, 5 * 3, -1.0, 1.0)],
            &[vec![5, 3]],
            |g, ids| g.gather_rows(ids[0], &[2, 0, 2, 4, 2, 1], &[3, 2]).unwrap(),
        ),
        "interp_rows" => check_op(
            name,
            28,
            &[random_vec(26, 4 * 3, -1.0, 1.0)],
            &[vec![4, 3]],
            |g, ids| {
                g.interp_rows(ids[0], &[0, 1, 2, 1, 3, 3], &[0.5, 0.3, 0.2, 0.9, 0.05, 0.05], 3)
                    .unwrap()
            },
        ),
        // Last-axis slices after the reshape are aligned blocks of four; 3f mod
        // 4 is distinct within each block, so the downstream max is tie-free.
        "reshape" => check_op(
            name,
            29,
            &[(0..24).map(|f| 0.1 * ((3 * (f % 4)) % 4) as f64 + 0.01 * (f / 4) as f64).collect()],
            &[vec![4, 6]],
            |g, ids| {
                let r = g.reshape(ids[0], vec![2, 3, 4]).unwrap();
                g.reduce_max(r, 2).unwrap()
            },
        ),
        "batch_norm_train" => check_op(
            name,
            30,
            &[
                random_vec(28, 6 * 4, -1.0, 1.0),
                random_vec(29, 4, 0.5, 1.5),
                random_vec(30, 4, -0.5, 0.5),
            ],
            &[vec![6, 4], vec![4], vec![4]],
            |g, ids| {
                let mut rm = vec![0.0; 4];
                let mut rv = vec![1.0; 4];
                g.batch_norm(ids[0], ids[1], ids[2], &mut rm, &mut rv, Mode::Train, 1e-5, 0.1)
                    .unwrap()
            },
        ),
        "batch_norm_eval" => check_op(
            name,
            31,
            &[
                random_vec(31, 6 * 4, -1.0, 1.0),
                random_vec(32, 4, 0.5, 1.5),
                random_vec(33, 4, -0.5, 0.5),
            ],
            &[vec![6, 4], vec![4], vec![4]],
            |g, ids| {
                let mut rm = vec![0.1, -0.2, 0.05, 0.3];
                let mut rv = vec![0.9, 1.3, 0.7, 1.1];
                g.batch_norm(ids[0], ids[1], ids[2], &mut rm, &mut rv, Mode::Eval, 1e-5, 0.1)
                    .unwrap()
            },
        ),
        "cross_entropy" => check_op(
            name,
            32,
            &[random_vec(34, 5 * 4, -2.0, 2.0)],
            &[vec![5, 4]],
            |g, ids| g.cross_entropy_ls(ids[0], &[0, 3, 1, 1, 2], 0.0).unwrap(),
        ),
        "cross_entropy_smoothed" => check_op(
            name,
            32,
            &[random_vec(34, 5 * 4, -2.0, 2.0)],
            &[vec![5, 4]],
            |g, ids| g.cross_entropy_ls(ids[0], &[0, 3, 1, 1, 2], 0.2).unwrap(),
        ),
        other => panic!("unknown op case {other}"),
    }
}

// ---------------------------------------------------------------------------
// whole-network gradient check

/// Train-mode loss of `model` on a fixed batch, as a pure function of the
/// learnable parameters (batch-norm buffer updates do not feed back into
/// the loss in train mode).
pub fn batch_loss(model: &mut Model, positions: &[[f64; 3]], n: usize, labels: &[usize]) -> f64 {
    let batch = positions.len() / n;
    let task = model.config.task;
    let k = model.config.num_classes;
    let cats: Vec<usize> = vec![0; batch];
    let input = BatchInput {
        positions,
        batch,
        n,
        categories: if task == Task::Partseg { Some(&cats) } else { None },
    };
    let (mut ctx, logits) = model.forward(&input, Mode::Train).unwrap();
    let flat = match task {
        Task::Classify => logits,
        Task::Segment | Task::Partseg => ctx.graph.reshape(logits, vec![labels.len(), k]).unwrap(),
    };
    let loss = ctx.graph.cross_entropy_ls(flat, labels, 0.2).unwrap();
    ctx.graph.value(loss).data()[0]
}

/// Compare the tape gradient of every learnable scalar (striding by
/// `stride` for the bigger nets) against central differences; returns the
/// worst relative error.
pub fn network_fd_check(mut config: NetworkConfig, n: usize, batch: usize, stride: usize) -> f64 {
    config.num_categories = 1;
    let mut model = pointstage::network::build(config.clone(), 99).unwrap();
    let positions = random_cloud(4242, n * batch);
    let labels: Vec<usize> = match config.task {
        Task::Classify => (0..batch).map(|b| b % config.num_classes).collect(),
        _ => (0..batch * n).map(|i| (i * 31 + i / 7) % config.num_classes).collect(),
    };

    let cats: Vec<usize> = vec![0; batch];
    let input = BatchInput {
        positions: &positions,
        batch,
        n,
        categories: if config.task == Task::Partseg { Some(&cats) } else { None },
    };
    let (mut ctx, logits) = model.forward(&input, Mode::Train).unwrap();
    let flat = match config.task {
        Task::Classify => logits,
        _ => ctx.graph.reshape(logits, vec![labels.len(), config.num_classes]).unwrap(),
    };
    let loss = ctx.graph.cross_entropy_ls(flat, &labels, 0.2).unwrap();
    ctx.graph.backward(loss).unwrap();
    let analytic = ctx.learnable_grads();
    drop(ctx);

    let ids = model.store.learnable_ids();
    let h = 1e-5;
    let mut worst_abs = 0.0f64;
    let mut max_fd = 0.0f64;
    for (slot, &id) in ids.iter().enumerate() {
        let len = model.store.tensor(id).numel();
        for j in (0..len).step_by(stride) {
            let orig = model.store.tensor(id).data()[j];
            model.store.tensor_mut(id).data_mut()[j] = orig + h;
            let above = batch_loss(&mut model, &positions, n, &labels);
            model.store.tensor_mut(id).data_mut()[j] = orig - h;
            let below = batch_loss(&mut model, &positions, n, &labels);
            model.store.tensor_mut(id).data_mut()[j] = orig;
            let fd = (above - below) / (2.0 * h);
            worst_abs = worst_abs.max((analytic[slot][j] - fd).abs());
            max_fd = max_fd.max(fd.abs());
        }
    }
    worst_abs / max_fd.max(1e-6)
}

// ---------------------------------------------------------------------------
// aggregation reordering

/// Run one aggregation over a fixed neighborhood, with each group's
/// neighbor list optionally reshuffled by `perms[group]`, and return the
/// output bit patterns. Codes and offsets are reshuffled in lockstep, since
/// they ride along the same neighbor axis.
pub fn aggregation_bits(
    variant: AggVariant,
    fusion: Fusion,
    perms: Option<&[Vec<usize>]>,
) -> Vec<u64> {
    let (m, k, n_src, c) = (5usize, 4usize, 12usize, 6usize);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let base_rows: Vec<usize> = (0..m * k).map(|_| rng.random_range(0..n_src)).collect();
    let x_data: Vec<f64> = (0..n_src * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let code_data: Vec<f64> = (0..m * k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let off_data: Vec<f64> = (0..m * k * 3).map(|_| rng.random_range(-0.5..0.5)).collect();

    let reorder = |stride: usize, data: &[f64]| -> Vec<f64> {
        let Some(perms) = perms else { return data.to_vec() };
        let mut out = vec![0.0; data.len()];
        for g in 0..m {
            for (j, &src_j) in perms[g].iter().enumerate() {
                let dst = (g * k + j) * stride;
                let src = (g * k + src_j) * stride;
                out[dst..dst + stride].copy_from_slice(&data[src..src + stride]);
            }
        }
        out
    };
    let rows: Vec<usize> = match perms {
        None => base_rows.clone(),
        Some(perms) => (0..m * k)
            .map(|i| base_rows[(i / k) * k + perms[i / k][i % k]])
            .collect(),
    };

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = AggregationConfig::new(variant, vec![c, c]);
    let params = init_aggregation(&mut store, &mut init_rng, "agg", &cfg, c).unwrap();

    let mut ctx = ForwardCtx::new(&mut store, Mode::Eval);
    let x = ctx.graph.input(Tensor::new(vec![n_src, c], x_data).unwrap());
    let codes = ctx
        .graph
        .input(Tensor::new(vec![m, k, c], reorder(c, &code_data)).unwrap());
    let offsets = Tensor::new(vec![m, k, 3], reorder(3, &off_data)).unwrap();
    let plan = GroupPlan { rows, m, k };
    let out = aggregate(&mut ctx, &cfg, &params, &plan, x, Some((codes, fusion)), Some(&offsets))
        .unwrap();
    ctx.graph.value(out).data().iter().map(|v| v.to_bits()).collect()
}

/// One random shuffle of 0..k per group.
pub fn group_perms(seed: u64, m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let mut p: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.random_range(0..=i);
                p.swap(i, j);
            }
            p
        })
        .collect()
}

pub fn translated(cloud: &[[f64; 3]], t: [f64; 3]) -> Vec<[f64; 3]> {
    cloud.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect()
}

/// Fisher-Yates shuffle of 0..n.
pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

// ---------------------------------------------------------------------------
// geometry oracles

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Brute-force greedy farthest point sampling: every step rescans every
/// point against every already-chosen point, no incremental distance cache.
/// Ties take the lowest index (strict `>` keeps the earliest maximum).
pub fn fps_oracle(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    assert!(m >= 1 && m <= points.len() && start < points.len());
    let mut chosen = vec![start];
    for _ in 1..m {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &p) in points.iter().enumerate() {
            let nearest = chosen
                .iter()
                .map(|&c| d2(p, points[c]))
                .fold(f64::INFINITY, f64::min);
            if nearest > best_d {
                best_d = nearest;
                best = i;
            }
        }
        chosen.push(best);
    }
    chosen
}

/// Exhaustive k-nearest-neighbor lookup: full stable sort of every source
/// point by distance (index order breaks ties), truncated to k, padded by
/// repeating the nearest point when the source is smaller than k.
pub fn knn_oracle(query: &[[f64; 3]], source: &[[f64; 3]], k: usize) -> Vec<usize> {
    assert!(k > 0 && !source.is_empty());
    let mut out = Vec::with_capacity(query.len() * k);
    for &q in query {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.sort_by(|&a, &b| d2(q, source[a]).total_cmp(&d2(q, source[b])));
        order.truncate(k);
        while order.len() < k {
            order.push(order[0]);
        }
        out.extend_from_slice(&order);
    }
    out
}

/// Per-pair recount of overall accuracy, mean class accuracy, and mean IoU
/// straight from the label arrays, never materializing a confusion matrix.
/// Classes absent from both truth and prediction are skipped; a class with
/// no truth rows contributes nothing to the accuracy average but still
/// counts toward both denominators, mirroring the documented convention.
pub fn metrics_oracle(k: usize, truth: &[usize], pred: &[usize]) -> (f64, f64, f64) {
    assert_eq!(truth.len(), pred.len());
    assert!(!truth.is_empty());
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    let oa = hits as f64 / truth.len() as f64;
    let mut acc_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as u64;
        let in_truth = truth.iter().filter(|&&t| t == c).count() as u64;
        let in_pred = pred.iter().filter(|&&p| p == c).count() as u64;
        if in_truth == 0 && in_pred == 0 {
            continue;
        }
        present += 1;
        if in_truth > 0 {
            acc_sum += tp as f64 / in_truth as f64;
        }
        iou_sum += tp as f64 / (in_truth + in_pred - tp) as f64;
    }
    (oa, acc_sum / present as f64, iou_sum / present as f64)
}

// ---------------------------------------------------------------------------
// cloud and model helpers

/// Uniform points in [-1, 1]^3.
pub fn random_cloud(seed: u64, n: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

/// Eval-mode forward pass of a single cloud; returns the flattened logits.
pub fn forward_logits(model: &mut Model, positions: &[[f64; 3]]) -> Vec<f64> {
    let n = positions.len();
    let input = BatchInput { positions, batch: 1, n, categories: None };
    let (ctx, logits) = model.forward(&input, Mode::Eval).unwrap();
    ctx.graph.value(logits).data().to_vec()
}

/// Small classification network used by the invariance checks. Depths list
/// all four stage slots even though classification only runs the first two.
pub fn tiny_classify_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::default();
    cfg.c_embed = 8;
    cfg.ref_depths = vec![1, 1, 0, 0];
    cfg.num_classes = 3;
    cfg.num_categories = 1;
    cfg.k_abs = 8;
    cfg.k_ref = 4;
    cfg
}
