//! Local aggregation variants over grouped neighborhoods.
//!
//! All variants share the same pieces: a gather over a neighbor table, a
//! stack of shared MLP layers (the set operation), and a max reduction over
//! the neighbor axis. They differ only in where the MLP sits relative to the
//! gather and the reduction, which is what drives their cost separation.

use serde::{Deserialize, Serialize};

use crate::encoding::Fusion;
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_norm, ForwardCtx, LinearP, NormP, ParamStore};
use crate::tensor::{CostKind, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggVariant {
    /// Gather, then MLP on every (centroid, neighbor) pair, then max.
    /// Concatenates relative offsets to the gathered features by default.
    Conv,
    /// Conv without the offset concatenation.
    ConvStar,
    /// MLP once on the source points, then gather and max.
    Preconv,
    /// Gather and max first, then MLP on the reduced centroids.
    Proconv,
}

/// Reduction over the neighbor axis. Max is the only supported choice; mean
/// pooling appears elsewhere (backward fusion) but not in this path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Max,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub variant: AggVariant,
    /// Output widths of the shared MLP layers, applied in order.
    pub mlp_widths: Vec<usize>,
    pub reduction: Reduction,
    /// Fuse positional codes into the grouped features when available.
    pub use_encoding: bool,
    /// Conv only: concatenate the 3 relative-offset channels ahead of the
    /// first MLP layer.
    pub concat_offsets: bool,
}

impl AggregationConfig {
    pub fn new(variant: AggVariant, mlp_widths: Vec<usize>) -> Self {
        AggregationConfig {
            variant,
            mlp_widths,
            reduction: Reduction::Max,
            use_encoding: true,
            concat_offsets: variant == AggVariant::Conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_widths.is_empty() || self.mlp_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "aggregation mlp_widths must be non-empty and positive, got {:?}",
                self.mlp_widths
            )));
        }
        if self.variant == AggVariant::ConvStar && self.concat_offsets {
            return Err(Error::Config(
                "conv_star does not concatenate offsets".into(),
            ));
        }
        if self.variant != AggVariant::Conv && self.variant != AggVariant::ConvStar && self.concat_offsets
        {
            return Err(Error::Config(format!(
                "concat_offsets only applies to the conv variant, not {:?}",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.mlp_widths.last().unwrap()
    }
}

/// The shared MLP stack: one linear + norm + relu per configured width.
#[derive(Debug, Clone)]
pub struct AggregationParams {
    layers: Vec<(LinearP, NormP)>,
}

pub fn init_aggregation(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &AggregationConfig,
    c_in: usize,
) -> Result<AggregationParams> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.mlp_widths.len());
    let mut width = c_in;
    if cfg.variant == AggVariant::Conv && cfg.concat_offsets {
        width += 3;
    }
    for (i, &w) in cfg.mlp_widths.iter().enumerate() {
        let lin = init_linear(store, rng, &format!("{name}/mlp{i}"), width, w);
        let norm = init_norm(store, &format!("{name}/mlp{i}/norm"), w);
        layers.push((lin, norm));
        width = w;
    }
    Ok(AggregationParams { layers })
}

/// Flattened gather indices for one grouped neighborhood, with any batch row
/// offsets already applied.
#[derive(Debug, Clone)]
pub struct GroupPlan {
    pub rows: Vec<usize>,
    pub m: usize,
    pub k: usize,
}

fn mlp(ctx: &mut ForwardCtx, params: &AggregationParams, mut h: TensorId) -> Result<TensorId> {
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Aggregation);
    for (lin, norm) in &params.layers {
        h = ctx.linear_norm_relu(h, lin, norm)?;
    }
    ctx.graph.set_kind(kind);
    Ok(h)
}

fn fuse_codes(
    ctx: &mut ForwardCtx,
    features: TensorId,
    codes: Option<(TensorId, Fusion)>,
) -> Result<TensorId> {
    let Some((codes, fusion)) = codes else {
        return Ok(features);
    };
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Elementwise);
    let out = match fusion {
        Fusion::Add => ctx.graph.add(features, codes),
        Fusion::Multiply => ctx.graph.mul(features, codes),
    };
    ctx.graph.set_kind(kind);
    out
}

/// Run one aggregation over a grouped neighborhood.
///
/// `x` holds the source features as `[n_source, c_in]`, `plan.rows` indexes
/// into them, `codes` carries fused positional codes shaped `[m, k, c]`
/// (ignored unless `cfg.use_encoding`), and `offsets` the relative neighbor
/// coordinates `[m, k, 3]` (required by conv with concat_offsets).
pub fn aggregate(
    ctx: &mut ForwardCtx,
    cfg: &AggregationConfig,
    params: &AggregationParams,
    plan: &GroupPlan,
    x: TensorId,
    codes: Option<(TensorId, Fusion)>,
    offsets: Option<&Tensor>,
) -> Result<TensorId> {
    cfg.validate()?;
    let codes = if cfg.use_encoding { codes } else { None };
    let lead = [plan.m, plan.k];
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Aggregation);
    let out = match cfg.variant {
        AggVariant::Conv | AggVariant::ConvStar => {
            let g = ctx.graph.gather_rows(x, &plan.rows, &lead)?;
            let mut h = fuse_codes(ctx, g, codes)?;
            if cfg.concat_offsets {
                let off = offsets.ok_or_else(|| {
                    Error::shape("aggregate", "conv with concat_offsets needs relative offsets")
                })?;
                let off = ctx.graph.input(off.clone());
                h = ctx.graph.concat(&[h, off], 2)?;
            }
            let h = mlp(ctx, params, h)?;
            ctx.graph.reduce_max(h, 1)?
        }
        AggVariant::Preconv => {
            let h = mlp(ctx, params, x)?;
            let g = ctx.graph.gather_rows(h, &plan.rows, &lead)?;
            let fused = fuse_codes(ctx, g, codes)?;
            ctx.graph.reduce_max(fused, 1)?
        }
        AggVariant::Proconv => {
            let g = ctx.graph.gather_rows(x, &plan.rows, &lead)?;
            let fused = fuse_codes(ctx, g, codes)?;
            let pooled = ctx.graph.reduce_max(fused, 1)?;
            mlp(ctx, params, pooled)?
        }
    };
    ctx.graph.set_kind(kind);
    Ok(out)
}

/// Closed-form multiply-accumulate count of the set operation for a uniform
/// width-C depth-L MLP: preconv runs it on the N_in source points, conv on
/// all N_out*k gathered pairs, proconv on the N_out reduced centroids.
pub fn flop_count(
    variant: AggVariant,
    n_in: usize,
    n_out: usize,
    k: usize,
    c: usize,
    l: usize,
) -> Result<u64> {
    for (label, v) in [("N_in", n_in), ("N_out", n_out), ("k", k), ("C", c), ("L", l)] {
        if v == 0 {
            return Err(Error::Config(format!("flop_count: {label} must be positive")));
        }
    }
    let (c, l) = (c as u64, l as u64);
    Ok(match variant {
        AggVariant::Preconv => c * c * n_in as u64 * l,
        AggVariant::Conv | AggVariant::ConvStar => c * c * n_out as u64 * k as u64 * l,
        AggVariant::Proconv => c * c * n_out as u64 * l,
    })
}
