//! Composite stages: abstraction, refinement, inverted-residual MLPs,
//! backward fusion, and the decoder stage that ties them together.
//!
//! All stage functions operate on batched features laid out as
//! `[batch * points, channels]`; every cloud in a batch has the same point
//! count, and gather indices are globalized with per-cloud row offsets.

use crate::aggregation::{aggregate, init_aggregation, AggregationConfig, AggregationParams, GroupPlan};
use crate::encoding::{init_encoder, Coordinates, EncoderParams, EncodingConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    absolute_neighbor_positions, farthest_point_sample, fps_comparisons, interpolation_weights,
    knn_comparisons, knn_group, relative_offsets,
};
use crate::nn::{init_linear, init_linear_zero, init_norm, ForwardCtx, LinearP, NormP, ParamStore};
use crate::tensor::{CostKind, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

/// Grouped geometry for one stage over a whole batch: gather plan, grouped
/// coordinates in both frames, and the centroid bookkeeping.
#[derive(Debug, Clone)]
pub struct StageGeometry {
    pub plan: GroupPlan,
    /// `[m, k, 3]` neighbor positions relative to their centroid.
    pub offsets: Tensor,
    /// `[m, k, 3]` absolute neighbor positions.
    pub absolute: Tensor,
    /// Stacked centroid positions, `batch * m_cloud` entries.
    pub centroids: Vec<[f64; 3]>,
    /// Global source row of each centroid.
    pub centroid_rows: Vec<usize>,
    pub batch: usize,
    pub m_cloud: usize,
    pub comparisons: u64,
}

impl StageGeometry {
    pub fn coords(&self, which: Coordinates) -> &Tensor {
        match which {
            Coordinates::Relative => &self.offsets,
            Coordinates::Absolute => &self.absolute,
        }
    }
}

fn check_batch(positions: &[[f64; 3]], batch: usize, n: usize, op: &'static str) -> Result<()> {
    if batch == 0 || n == 0 || positions.len() != batch * n {
        return Err(Error::shape(
            op,
            format!("{} positions do not form batch {} x {}", positions.len(), batch, n),
        ));
    }
    Ok(())
}

fn stack_geometry(
    per_cloud: Vec<(Vec<usize>, Vec<usize>, Tensor, Tensor, Vec<[f64; 3]>)>,
    n: usize,
    k: usize,
    comparisons: u64,
) -> StageGeometry {
    let batch = per_cloud.len();
    let m_cloud = per_cloud[0].4.len();
    let mut rows = Vec::with_capacity(batch * m_cloud * k);
    let mut centroid_rows = Vec::with_capacity(batch * m_cloud);
    let mut centroids = Vec::with_capacity(batch * m_cloud);
    let mut off = Vec::with_capacity(batch * m_cloud * k * 3);
    let mut abs = Vec::with_capacity(batch * m_cloud * k * 3);
    for (b, (neighbors, crows, offsets, absolute, cents)) in per_cloud.into_iter().enumerate() {
        rows.extend(neighbors.into_iter().map(|j| j + b * n));
        centroid_rows.extend(crows.into_iter().map(|j| j + b * n));
        off.extend_from_slice(offsets.data());
        abs.extend_from_slice(absolute.data());
        centroids.extend(cents);
    }
    let m = batch * m_cloud;
    StageGeometry {
        plan: GroupPlan { rows, m, k },
        offsets: Tensor::new(vec![m, k, 3], off).unwrap(),
        absolute: Tensor::new(vec![m, k, 3], abs).unwrap(),
        centroids,
        centroid_rows,
        batch,
        m_cloud,
        comparisons,
    }
}

/// Downsampling geometry: per cloud, farthest-point-sample ceil(n/ratio)
/// centroids and group their k nearest source points.
pub fn sample_group(
    positions: &[[f64; 3]],
    batch: usize,
    n: usize,
    ratio: usize,
    k: usize,
    fps_start: usize,
) -> Result<StageGeometry> {
    check_batch(positions, batch, n, "sample_group")?;
    if ratio == 0 {
        return Err(Error::Config("downsample ratio must be at least 1".into()));
    }
    let m_cloud = n.div_ceil(ratio);
    let mut per_cloud = Vec::with_capacity(batch);
    let mut comparisons = 0;
    for b in 0..batch {
        let cloud = &positions[b * n..(b + 1) * n];
        let idx = farthest_point_sample(cloud, m_cloud, fps_start)?;
        let cents: Vec<[f64; 3]> = idx.iter().map(|&i| cloud[i]).collect();
        let table = knn_group(&cents, cloud, k)?;
        let offsets = relative_offsets(&table, &cents, cloud)?;
        let absolute = absolute_neighbor_positions(&table, cloud)?;
        comparisons += fps_comparisons(n, m_cloud) + knn_comparisons(m_cloud, n);
        per_cloud.push((table.neighbors, idx, offsets, absolute, cents));
    }
    Ok(stack_geometry(per_cloud, n, k, comparisons))
}

/// Resolution-preserving geometry: per cloud, group each point's k nearest
/// neighbors within the same cloud.
pub fn self_group(positions: &[[f64; 3]], batch: usize, n: usize, k: usize) -> Result<StageGeometry> {
    check_batch(positions, batch, n, "self_group")?;
    let mut per_cloud = Vec::with_capacity(batch);
    let mut comparisons = 0;
    for b in 0..batch {
        let cloud = &positions[b * n..(b + 1) * n];
        let table = knn_group(cloud, cloud, k)?;
        let offsets = relative_offsets(&table, cloud, cloud)?;
        let absolute = absolute_neighbor_positions(&table, cloud)?;
        comparisons += knn_comparisons(n, n);
        per_cloud.push((table.neighbors, (0..n).collect(), offsets, absolute, cloud.to_vec()));
    }
    Ok(stack_geometry(per_cloud, n, k, comparisons))
}

/// One abstraction stage: positional codes from the grouped coordinates,
/// then the configured aggregation down to the centroid resolution.
#[derive(Debug, Clone)]
pub struct AbsStageParams {
    pub agg: AggregationParams,
    pub encoder: EncoderParams,
}

pub fn init_abs_stage(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    agg_cfg: &AggregationConfig,
    enc_cfg: &EncodingConfig,
    c_in: usize,
) -> Result<AbsStageParams> {
    use crate::aggregation::AggVariant;
    // Codes fuse with pre-MLP features for conv/proconv but post-MLP features
    // for preconv, so the encoder width follows the fusion point.
    let code_width = match agg_cfg.variant {
        AggVariant::Preconv => agg_cfg.out_channels(),
        _ => c_in,
    };
    let encoder = init_encoder(store, rng, &format!("{name}/encode"), enc_cfg, code_width)?;
    let agg = init_aggregation(store, rng, &format!("{name}/agg"), agg_cfg, c_in)?;
    Ok(AbsStageParams { agg, encoder })
}

pub fn abs_stage(
    ctx: &mut ForwardCtx,
    agg_cfg: &AggregationConfig,
    params: &AbsStageParams,
    geo: &StageGeometry,
    x: TensorId,
) -> Result<TensorId> {
    let codes = params.encoder.encode(ctx, geo.coords(params.encoder.coordinates))?;
    aggregate(
        ctx,
        agg_cfg,
        &params.agg,
        &geo.plan,
        x,
        codes.map(|c| (c, params.encoder.fusion)),
        Some(&geo.offsets),
    )
}

/// One refinement block: the set operation (placed per the aggregation
/// variant) wrapped by pointwise MLPs and a residual connection. The final
/// linear starts at zero, so a fresh block is an identity map.
#[derive(Debug, Clone)]
pub struct RefBlockParams {
    pub agg: AggregationParams,
    post_lin: LinearP,
    post_norm: NormP,
    last: LinearP,
}

pub fn init_ref_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    agg_cfg: &AggregationConfig,
    c: usize,
) -> Result<RefBlockParams> {
    if agg_cfg.out_channels() != c {
        return Err(Error::Config(format!(
            "refinement aggregation must preserve width {c}, got {:?}",
            agg_cfg.mlp_widths
        )));
    }
    if agg_cfg.concat_offsets {
        return Err(Error::Config(
            "refinement blocks do not concatenate offsets".into(),
        ));
    }
    Ok(RefBlockParams {
        agg: init_aggregation(store, rng, &format!("{name}/agg"), agg_cfg, c)?,
        post_lin: init_linear(store, rng, &format!("{name}/post"), c, c),
        post_norm: init_norm(store, &format!("{name}/post/norm"), c),
        last: init_linear_zero(store, &format!("{name}/last"), c, c),
    })
}

pub fn ref_block(
    ctx: &mut ForwardCtx,
    agg_cfg: &AggregationConfig,
    params: &RefBlockParams,
    plan: &GroupPlan,
    codes: Option<(TensorId, crate::encoding::Fusion)>,
    x: TensorId,
) -> Result<TensorId> {
    let h = aggregate(ctx, agg_cfg, &params.agg, plan, x, codes, None)?;
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::RefineMlp);
    let h = ctx.linear_norm_relu(h, &params.post_lin, &params.post_norm)?;
    let h = ctx.linear(h, &params.last)?;
    ctx.graph.set_kind(CostKind::Elementwise);
    let out = ctx.graph.add(h, x)?;
    ctx.graph.set_kind(kind);
    Ok(out)
}

/// A stack of refinement blocks sharing one neighbor table and one
/// positional-code tensor.
#[derive(Debug, Clone)]
pub struct RefStageParams {
    /// Absent at depth zero: a stage with no blocks owns no code tensor.
    pub encoder: Option<EncoderParams>,
    pub blocks: Vec<RefBlockParams>,
}

pub fn init_ref_stage(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    agg_cfg: &AggregationConfig,
    enc_cfg: &EncodingConfig,
    depth: usize,
    c: usize,
) -> Result<RefStageParams> {
    if depth == 0 {
        return Ok(RefStageParams { encoder: None, blocks: Vec::new() });
    }
    let encoder = init_encoder(store, rng, &format!("{name}/encode"), enc_cfg, c)?;
    let blocks = (0..depth)
        .map(|i| init_ref_block(store, rng, &format!("{name}/block{i}"), agg_cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(RefStageParams { encoder: Some(encoder), blocks })
}

/// Run a whole refinement stage. Geometry and codes are built exactly once
/// and reused by every block; the instrumentation counters record both.
pub fn ref_stage(
    ctx: &mut ForwardCtx,
    agg_cfg: &AggregationConfig,
    params: &RefStageParams,
    positions: &[[f64; 3]],
    batch: usize,
    n: usize,
    k: usize,
    stage_label: &str,
    mut x: TensorId,
) -> Result<TensorId> {
    let Some(encoder) = &params.encoder else {
        return Ok(x);
    };
    let geo = self_group(positions, batch, n, k)?;
    ctx.counters.ref_tables.push(stage_label.to_string());
    ctx.counters.comparisons += geo.comparisons;
    let codes = encoder.encode(ctx, geo.coords(encoder.coordinates))?;
    if codes.is_some() {
        ctx.counters.ref_codes.push(stage_label.to_string());
    }
    let codes = codes.map(|c| (c, encoder.fusion));
    for block in &params.blocks {
        x = ref_block(ctx, agg_cfg, block, &geo.plan, codes, x)?;
    }
    Ok(x)
}

/// Expansion MLP with a residual: linear C -> eC, norm + relu, then a
/// zero-initialized linear back to C added onto the input.
#[derive(Debug, Clone)]
pub struct InvertedResidualParams {
    expand: LinearP,
    norm: NormP,
    project: LinearP,
}

pub fn init_inverted_residual(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c: usize,
    expand_ratio: usize,
) -> Result<InvertedResidualParams> {
    if expand_ratio == 0 {
        return Err(Error::Config("expansion ratio must be at least 1".into()));
    }
    Ok(InvertedResidualParams {
        expand: init_linear(store, rng, &format!("{name}/expand"), c, c * expand_ratio),
        norm: init_norm(store, &format!("{name}/norm"), c * expand_ratio),
        project: init_linear_zero(store, &format!("{name}/project"), c * expand_ratio, c),
    })
}

pub fn inverted_residual(
    ctx: &mut ForwardCtx,
    params: &InvertedResidualParams,
    x: TensorId,
) -> Result<TensorId> {
    let h = ctx.linear_norm_relu(x, &params.expand, &params.norm)?;
    let h = ctx.linear(h, &params.project)?;
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Elementwise);
    let out = ctx.graph.add(h, x)?;
    ctx.graph.set_kind(kind);
    Ok(out)
}

/// Backward fusion: a channel gate computed from pooled high-resolution
/// statistics, applied multiplicatively (with residuals) to both feature
/// maps, followed by concatenation.
#[derive(Debug, Clone)]
pub struct BfmParams {
    expand: LinearP,
    squeeze: LinearP,
    low_proj: LinearP,
    pub c_high: usize,
    pub c_low: usize,
}

pub fn init_bfm(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_high: usize,
    c_low: usize,
    expand_ratio: usize,
) -> Result<BfmParams> {
    if expand_ratio == 0 {
        return Err(Error::Config("expansion ratio must be at least 1".into()));
    }
    Ok(BfmParams {
        expand: init_linear(store, rng, &format!("{name}/expand"), c_high, c_high * expand_ratio),
        squeeze: init_linear_zero(store, &format!("{name}/squeeze"), c_high * expand_ratio, c_high),
        low_proj: init_linear_zero(store, &format!("{name}/low_proj"), c_high, c_low),
        c_high,
        c_low,
    })
}

/// The per-cloud channel gate `g = sigmoid(squeeze(relu(expand(s))))` where
/// `s` sums the max-pooled and mean-pooled high-resolution features.
/// Output shape `[batch, c_high]`.
pub fn bfm_gate(
    ctx: &mut ForwardCtx,
    params: &BfmParams,
    high: TensorId,
    batch: usize,
    n: usize,
) -> Result<TensorId> {
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Bfm);
    let h3 = ctx.graph.reshape(high, vec![batch, n, params.c_high])?;
    let mx = ctx.graph.reduce_max(h3, 1)?;
    let mn = ctx.graph.reduce_mean(h3, 1)?;
    let s = ctx.graph.add(mx, mn)?;
    let z = ctx.linear(s, &params.expand)?;
    let z = ctx.graph.relu(z);
    let z = ctx.linear(z, &params.squeeze)?;
    let g = ctx.graph.sigmoid(z);
    ctx.graph.set_kind(kind);
    Ok(g)
}

/// Projection of the gate onto the low branch's width, `[batch, c_low]`.
/// Zero-initialized, so a fresh module leaves the low branch untouched.
pub fn bfm_low_gate(ctx: &mut ForwardCtx, params: &BfmParams, g: TensorId) -> Result<TensorId> {
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Bfm);
    let out = ctx.linear(g, &params.low_proj)?;
    ctx.graph.set_kind(kind);
    Ok(out)
}

/// Gated residual update `x + x * gate_row(cloud)`, broadcasting the
/// per-cloud gate over each cloud's rows.
pub fn bfm_apply(
    ctx: &mut ForwardCtx,
    gate: TensorId,
    x: TensorId,
    batch: usize,
    n: usize,
) -> Result<TensorId> {
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Bfm);
    let rows: Vec<usize> = (0..batch * n).map(|r| r / n).collect();
    let gx = ctx.graph.gather_rows(gate, &rows, &[batch * n])?;
    let scaled = ctx.graph.mul(x, gx)?;
    let out = ctx.graph.add(x, scaled)?;
    ctx.graph.set_kind(kind);
    Ok(out)
}

/// Full backward fusion at one resolution: gate from `high`, residual gating
/// of both maps, concatenation to width `c_high + c_low`.
pub fn bfm(
    ctx: &mut ForwardCtx,
    params: &BfmParams,
    high: TensorId,
    low: TensorId,
    batch: usize,
    n: usize,
) -> Result<TensorId> {
    let g = bfm_gate(ctx, params, high, batch, n)?;
    let high2 = bfm_apply(ctx, g, high, batch, n)?;
    let gl = bfm_low_gate(ctx, params, g)?;
    let low2 = bfm_apply(ctx, gl, low, batch, n)?;
    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Bfm);
    let out = ctx.graph.concat(&[high2, low2], 1)?;
    ctx.graph.set_kind(kind);
    Ok(out)
}

/// One decoder stage: upsample the low-resolution branch onto the high
/// resolution, fuse backward, project to the stage width, refine.
#[derive(Debug, Clone)]
pub struct DecoderStageParams {
    pub bfm: BfmParams,
    proj_lin: LinearP,
    proj_norm: NormP,
    pub irm: InvertedResidualParams,
    pub c_out: usize,
}

pub fn init_decoder_stage(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_high: usize,
    c_low: usize,
    c_out: usize,
    expand_ratio: usize,
) -> Result<DecoderStageParams> {
    Ok(DecoderStageParams {
        bfm: init_bfm(store, rng, &format!("{name}/bfm"), c_high, c_low, expand_ratio)?,
        proj_lin: init_linear(store, rng, &format!("{name}/proj"), c_high + c_low, c_out),
        proj_norm: init_norm(store, &format!("{name}/proj/norm"), c_out),
        irm: init_inverted_residual(store, rng, &format!("{name}/irm"), c_out, expand_ratio)?,
        c_out,
    })
}

/// Stacked per-cloud interpolation plan (indices globalized, weights
/// normalized per target point).
fn batch_interpolation(
    high_pos: &[[f64; 3]],
    low_pos: &[[f64; 3]],
    batch: usize,
    n_high: usize,
    n_low: usize,
) -> Result<(Vec<usize>, Vec<f64>, usize, u64)> {
    let mut idx = Vec::new();
    let mut w = Vec::new();
    let mut k = 0;
    let mut comparisons = 0;
    for b in 0..batch {
        let hi = &high_pos[b * n_high..(b + 1) * n_high];
        let lo = &low_pos[b * n_low..(b + 1) * n_low];
        let (i, wv, kk) = interpolation_weights(hi, lo)?;
        idx.extend(i.into_iter().map(|j| j + b * n_low));
        w.extend(wv);
        k = kk;
        comparisons += knn_comparisons(n_high, n_low);
    }
    Ok((idx, w, k, comparisons))
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_stage(
    ctx: &mut ForwardCtx,
    params: &DecoderStageParams,
    high_pos: &[[f64; 3]],
    high: TensorId,
    low_pos: &[[f64; 3]],
    low: TensorId,
    batch: usize,
    gate_before_interpolation: bool,
) -> Result<TensorId> {
    let n_high = high_pos.len() / batch;
    let n_low = low_pos.len() / batch;
    check_batch(high_pos, batch, n_high, "decoder_stage")?;
    check_batch(low_pos, batch, n_low, "decoder_stage")?;

    let (idx, w, k, comparisons) = batch_interpolation(high_pos, low_pos, batch, n_high, n_low)?;
    ctx.counters.comparisons += comparisons;

    let kind = ctx.graph.kind();
    ctx.graph.set_kind(CostKind::Decoder);
    let g = bfm_gate(ctx, &params.bfm, high, batch, n_high)?;
    let gl = bfm_low_gate(ctx, &params.bfm, g)?;
    let low_up = if gate_before_interpolation {
        let gated = bfm_apply(ctx, gl, low, batch, n_low)?;
        ctx.graph.interp_rows(gated, &idx, &w, k)?
    } else {
        let up = ctx.graph.interp_rows(low, &idx, &w, k)?;
        bfm_apply(ctx, gl, up, batch, n_high)?
    };
    let high2 = bfm_apply(ctx, g, high, batch, n_high)?;
    let cat = ctx.graph.concat(&[high2, low_up], 1)?;
    let h = ctx.linear_norm_relu(cat, &params.proj_lin, &params.proj_norm)?;
    let out = inverted_residual(ctx, &params.irm, h)?;
    ctx.graph.set_kind(kind);
    Ok(out)
}
