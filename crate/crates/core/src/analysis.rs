//! Analytic cost model and throughput benchmark.
//!
//! Parameter counts come straight from the store. FLOP counts come from one
//! instrumented forward pass at a stated input size, so they track the exact
//! per-stage resolutions the sampler produces, not an idealized formula.
//! Conventions: one multiply-accumulate per linear weight, one flop per
//! element for normalization/activation/elementwise ops. Max reductions and
//! neighborhood search count comparisons, reported in separate buckets.

use std::fmt;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{BatchInput, Model};
use crate::nn::ParamStore;
use crate::tensor::{CostKind, Mode};

/// One (stage, kind) bucket of the cost report.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub stage: String,
    pub kind: CostKind,
    pub params: u64,
    pub flops: u64,
}

/// Cost breakdown for a built model at a stated input size.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub points: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    /// Neighborhood search work (sampling + knn), comparison counts.
    pub geometry_comparisons: u64,
    /// Comparisons spent in max reductions on the tape.
    pub reduce_comparisons: u64,
}

/// Total learnable scalars in a store.
pub fn count_params(store: &ParamStore) -> u64 {
    store.learnable_scalars()
}

/// Assign a parameter to a (stage, kind) bucket from its registered name.
/// Mirrors the attribution the forward pass uses for the matching ops.
fn param_bucket(name: &str) -> (String, CostKind) {
    let stage = name.split('/').next().unwrap_or(name).to_string();
    let kind = if name.contains("/norm") {
        CostKind::NormAct
    } else if name.contains("/encode/") {
        CostKind::Encoder
    } else if name.contains("/agg/") {
        CostKind::Aggregation
    } else if name.contains("/post") || name.contains("/last") {
        CostKind::RefineMlp
    } else if name.contains("/bfm/") {
        CostKind::Bfm
    } else if stage == "embed" {
        CostKind::Embedding
    } else if stage == "head" {
        CostKind::Head
    } else if stage == "class_embed" {
        CostKind::ClassEmbed
    } else if stage.starts_with("dec") {
        CostKind::Decoder
    } else {
        CostKind::Other
    };
    (stage, kind)
}

/// Build the full cost report: parameters from the store, FLOPs from one
/// eval-mode forward pass on `points` synthetic positions (batch 1).
pub fn analyze(model: &mut Model, points: usize) -> Result<CostReport> {
    // Buckets keyed by (stage, kind), with stage order fixed by first use.
    let mut stages: Vec<String> = Vec::new();
    let mut rows: Vec<CostRow> = Vec::new();
    let bump = |list: &mut Vec<CostRow>,
                    order: &mut Vec<String>,
                    stage: &str,
                    kind: CostKind,
                    params: u64,
                    flops: u64| {
        if !order.iter().any(|s| s == stage) {
            order.push(stage.to_string());
        }
        match list.iter_mut().find(|r| r.stage == stage && r.kind == kind) {
            Some(row) => {
                row.params += params;
                row.flops += flops;
            }
            None => list.push(CostRow { stage: stage.to_string(), kind, params, flops }),
        }
    };

    // Synthetic input; coordinate values only steer grouping decisions, the
    // per-layer work depends on the stage resolutions alone.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let positions: Vec<[f64; 3]> = (0..points)
        .map(|_| {
            [
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ]
        })
        .collect();
    let categories = [0usize];
    let input = BatchInput {
        positions: &positions,
        batch: 1,
        n: points,
        categories: Some(&categories[..]),
    };
    let (ctx, _logits) = model.forward(&input, Mode::Eval)?;

    let mut reduce_comparisons = 0u64;
    for entry in ctx.graph.cost_entries() {
        reduce_comparisons += entry.comparisons;
        if entry.flops == 0 {
            continue;
        }
        let stage = ctx.graph.stage_label(entry.stage).to_string();
        bump(&mut rows, &mut stages, &stage, entry.kind, 0, entry.flops);
    }
    let geometry_comparisons = ctx.counters.comparisons;
    drop(ctx);

    for entry in model.store.entries() {
        if !entry.learnable {
            continue;
        }
        let (stage, kind) = param_bucket(&entry.name);
        bump(&mut rows, &mut stages, &stage, kind, entry.tensor.numel() as u64, 0);
    }

    // Stable order: stage by first appearance, kind by enum declaration.
    rows.sort_by_key(|r| {
        let s = stages.iter().position(|x| *x == r.stage).unwrap_or(usize::MAX);
        (s, r.kind as usize)
    });

    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    Ok(CostReport {
        points,
        rows,
        total_params,
        total_flops,
        geometry_comparisons,
        reduce_comparisons,
    })
}

impl CostReport {
    /// CSV with header `stage,kind,params,flops`, one row per bucket.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,kind,params,flops\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.stage,
                row.kind.label(),
                row.params,
                row.flops
            ));
        }
        out
    }

    /// Sum of FLOPs over rows matching a stage prefix and kind.
    pub fn flops_for(&self, stage_prefix: &str, kind: CostKind) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.stage.starts_with(stage_prefix) && r.kind == kind)
            .map(|r| r.flops)
            .sum()
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cost report at {} input points (batch 1)", self.points)?;
        writeln!(f, "{:<14}{:<14}{:>12}{:>16}", "stage", "kind", "params", "flops")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<14}{:<14}{:>12}{:>16}",
                row.stage,
                row.kind.label(),
                row.params,
                row.flops
            )?;
        }
        writeln!(f, "{:<28}{:>12}{:>16}", "total", self.total_params, self.total_flops)?;
        writeln!(f, "geometry comparisons (sampling + knn): {}", self.geometry_comparisons)?;
        writeln!(f, "max-reduction comparisons: {}", self.reduce_comparisons)
    }
}

/// Empirical throughput measurement.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub batch: usize,
    pub points: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Instances per second, one entry per timed repeat.
    pub per_repeat: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub stddev: f64,
    /// stddev / median, the jitter figure checked in CI runs.
    pub jitter: f64,
}

/// Time eval-mode forward passes and report instances/second statistics.
/// Runs one warmup pass, then `repeats` timed passes on one thread.
pub fn benchmark(model: &mut Model, batch: usize, points: usize, repeats: usize) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::Usage("benchmark needs at least 3 repeats".into()));
    }
    if batch == 0 {
        return Err(Error::Usage("benchmark batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let positions: Vec<[f64; 3]> = (0..batch * points)
        .map(|_| {
            [
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ]
        })
        .collect();
    let categories: Vec<usize> = vec![0; batch];
    let input = BatchInput { positions: &positions, batch, n: points, categories: Some(&categories) };

    let warmup = 1;
    for _ in 0..warmup {
        model.forward(&input, Mode::Eval)?;
    }
    let mut per_repeat = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        model.forward(&input, Mode::Eval)?;
        let secs = start.elapsed().as_secs_f64().max(1e-12);
        per_repeat.push(batch as f64 / secs);
    }
    let mut sorted = per_repeat.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("throughput is finite"));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let mean = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
    let var = per_repeat.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / per_repeat.len() as f64;
    let stddev = var.sqrt();
    Ok(BenchReport {
        batch,
        points,
        repeats,
        warmup,
        threads: 1,
        per_repeat,
        median,
        mean,
        stddev,
        jitter: stddev / median.max(1e-12),
    })
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "throughput: batch {} x {} points, {} repeats after {} warmup, {} thread(s)",
            self.batch, self.points, self.repeats, self.warmup, self.threads
        )?;
        writeln!(
            f,
            "instances/s median {:.3} mean {:.3} stddev {:.3} (jitter {:.4})",
            self.median, self.mean, self.stddev, self.jitter
        )
    }
}
