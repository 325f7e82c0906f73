//! Network assembly: staged encoders over point clouds with task heads for
//! classification, semantic segmentation, and part segmentation.

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggVariant, AggregationConfig};
use crate::blocks::{
    abs_stage, decoder_stage, init_abs_stage, init_decoder_stage, init_ref_stage, ref_stage,
    sample_group, AbsStageParams, DecoderStageParams, RefStageParams,
};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_norm, ForwardCtx, LinearP, NormP, ParamId, ParamStore};
use crate::tensor::{CostKind, Mode, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CLASS_EMBED_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Segment,
    Partseg,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            "partseg" => Ok(Task::Partseg),
            other => Err(Error::Usage(format!(
                "unknown task '{other}' (expected classify, segment, partseg)"
            ))),
        }
    }
}

/// Named size presets: embedding width and per-stage refinement depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    S,
    B,
    L,
    Xl,
}

impl Preset {
    pub fn embed_width(self) -> usize {
        match self {
            Preset::S | Preset::B | Preset::L => 32,
            Preset::Xl => 64,
        }
    }

    pub fn ref_depths(self) -> [usize; 4] {
        match self {
            Preset::S => [0, 0, 0, 0],
            Preset::B => [1, 2, 1, 1],
            Preset::L => [2, 4, 2, 2],
            Preset::Xl => [3, 6, 3, 3],
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Preset::S),
            "b" => Ok(Preset::B),
            "l" => Ok(Preset::L),
            "xl" => Ok(Preset::Xl),
            other => Err(Error::Usage(format!("unknown preset '{other}' (expected s, b, l, xl)"))),
        }
    }
}

/// Which aggregation variant sits where in the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationChoice {
    /// Variant of the first abstraction stage.
    pub first_abs: AggVariant,
    /// Variant of the remaining abstraction stages.
    pub later_abs: AggVariant,
    /// Variant (set-operation placement) inside refinement blocks.
    pub refinement: AggVariant,
    /// Depth of the abstraction-stage MLP stacks.
    pub abs_layers: usize,
}

impl Default for AggregationChoice {
    fn default() -> Self {
        AggregationChoice {
            first_abs: AggVariant::Conv,
            later_abs: AggVariant::Preconv,
            refinement: AggVariant::Preconv,
            abs_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub task: Task,
    /// Embedding width; stage widths double after every abstraction stage.
    pub c_embed: usize,
    /// Refinement depths per stage (a preset's B vector).
    pub ref_depths: Vec<usize>,
    pub num_classes: usize,
    /// Shape categories for the part-segmentation class embedding.
    pub num_categories: usize,
    pub k_abs: usize,
    pub k_ref: usize,
    pub downsample_ratio: usize,
    pub aggregation: AggregationChoice,
    pub encoding: EncodingConfig,
    /// Expansion ratio of the fusion and inverted-residual MLPs.
    pub expand_ratio: usize,
    /// Index the first abstraction stage's point sampler starts from.
    /// Deeper stages always start from the first already-selected centroid.
    pub fps_start: usize,
    /// Apply the low-branch gate before upsampling instead of after.
    pub gate_before_interpolation: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            task: Task::Classify,
            c_embed: Preset::B.embed_width(),
            ref_depths: Preset::B.ref_depths().to_vec(),
            num_classes: 3,
            num_categories: 4,
            k_abs: 24,
            k_ref: 16,
            downsample_ratio: 4,
            aggregation: AggregationChoice::default(),
            encoding: EncodingConfig::default(),
            expand_ratio: 4,
            fps_start: 0,
            gate_before_interpolation: false,
        }
    }
}

impl NetworkConfig {
    pub fn preset(preset: Preset, task: Task) -> NetworkConfig {
        NetworkConfig {
            task,
            c_embed: preset.embed_width(),
            ref_depths: preset.ref_depths().to_vec(),
            ..Default::default()
        }
    }

    /// Abstraction stages: four for scene segmentation, two for the
    /// object-scale tasks.
    pub fn abs_stage_count(&self) -> usize {
        match self.task {
            Task::Segment => 4,
            Task::Classify | Task::Partseg => 2,
        }
    }

    /// Feature width at stage level i (0 = embedding resolution).
    pub fn stage_width(&self, level: usize) -> usize {
        self.c_embed << level
    }

    /// Smallest admissible input point count.
    pub fn min_points(&self) -> usize {
        self.downsample_ratio.pow(self.abs_stage_count() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_embed == 0 {
            return Err(Error::Config("c_embed must be positive".into()));
        }
        if self.ref_depths.len() != 4 {
            return Err(Error::Config(format!(
                "ref_depths must list 4 stages, got {}",
                self.ref_depths.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.task == Task::Partseg && self.num_categories == 0 {
            return Err(Error::Config("partseg needs at least one shape category".into()));
        }
        if self.k_abs == 0 || self.k_ref == 0 {
            return Err(Error::Config("neighborhood sizes must be positive".into()));
        }
        if self.downsample_ratio == 0 {
            return Err(Error::Config("downsample_ratio must be at least 1".into()));
        }
        if self.expand_ratio == 0 {
            return Err(Error::Config("expand_ratio must be at least 1".into()));
        }
        if self.aggregation.abs_layers == 0 {
            return Err(Error::Config("abs_layers must be at least 1".into()));
        }
        self.encoding.validate()
    }

    fn abs_agg_config(&self, stage: usize) -> AggregationConfig {
        let variant = if stage == 0 { self.aggregation.first_abs } else { self.aggregation.later_abs };
        let c_out = self.stage_width(stage + 1);
        AggregationConfig::new(variant, vec![c_out; self.aggregation.abs_layers])
    }

    fn ref_agg_config(&self, stage: usize) -> AggregationConfig {
        let mut cfg =
            AggregationConfig::new(self.aggregation.refinement, vec![self.stage_width(stage + 1)]);
        // Refinement never concatenates offsets, whatever the variant.
        cfg.concat_offsets = false;
        cfg
    }
}

/// One batched input: `batch` clouds of `n` points each, stacked.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    pub positions: &'a [[f64; 3]],
    pub batch: usize,
    pub n: usize,
    /// Shape category per cloud (part segmentation only).
    pub categories: Option<&'a [usize]>,
}

pub struct Model {
    pub config: NetworkConfig,
    pub store: ParamStore,
    embed_lin: LinearP,
    embed_norm: NormP,
    abs_cfgs: Vec<AggregationConfig>,
    abs: Vec<AbsStageParams>,
    ref_cfgs: Vec<AggregationConfig>,
    refs: Vec<RefStageParams>,
    class_embed: Option<ParamId>,
    decoders: Vec<DecoderStageParams>,
    head_lin: LinearP,
    head_norm: NormP,
    head_out: LinearP,
}

/// Deterministically initialize a model from a config and a seed.
pub fn build(config: NetworkConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = config.abs_stage_count();

    let embed_lin = init_linear(&mut store, &mut rng, "embed", 1, config.c_embed);
    let embed_norm = init_norm(&mut store, "embed/norm", config.c_embed);

    let mut abs_cfgs = Vec::new();
    let mut abs = Vec::new();
    let mut ref_cfgs = Vec::new();
    let mut refs = Vec::new();
    for i in 0..stages {
        let acfg = config.abs_agg_config(i);
        abs.push(init_abs_stage(
            &mut store,
            &mut rng,
            &format!("abs{}", i + 1),
            &acfg,
            &config.encoding,
            config.stage_width(i),
        )?);
        abs_cfgs.push(acfg);
        let rcfg = config.ref_agg_config(i);
        refs.push(init_ref_stage(
            &mut store,
            &mut rng,
            &format!("ref{}", i + 1),
            &rcfg,
            &config.encoding,
            config.ref_depths[i],
            config.stage_width(i + 1),
        )?);
        ref_cfgs.push(rcfg);
    }

    let class_embed = (config.task == Task::Partseg).then(|| {
        let bound = 1.0 / (CLASS_EMBED_WIDTH as f64).sqrt();
        use rand::RngExt;
        let vals: Vec<f64> = (0..config.num_categories * CLASS_EMBED_WIDTH)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        store.learnable(
            "class_embed",
            Tensor::new(vec![config.num_categories, CLASS_EMBED_WIDTH], vals).unwrap(),
        )
    });

    let mut decoders = Vec::new();
    if config.task != Task::Classify {
        for i in (0..stages).rev() {
            let c_high = config.stage_width(i);
            let mut c_low = config.stage_width(i + 1);
            if i + 1 == stages && config.task == Task::Partseg {
                c_low += CLASS_EMBED_WIDTH;
            }
            decoders.push(init_decoder_stage(
                &mut store,
                &mut rng,
                &format!("dec{i}"),
                c_high,
                c_low,
                c_high,
                config.expand_ratio,
            )?);
        }
    }

    let head_in = match config.task {
        Task::Classify => config.stage_width(stages),
        Task::Segment | Task::Partseg => config.c_embed,
    };
    let head_mid = (head_in / 2).max(1);
    let head_lin = init_linear(&mut store, &mut rng, "head/mlp", head_in, head_mid);
    let head_norm = init_norm(&mut store, "head/mlp/norm", head_mid);
    let head_out = init_linear(&mut store, &mut rng, "head/out", head_mid, config.num_classes);

    Ok(Model {
        config,
        store,
        embed_lin,
        embed_norm,
        abs_cfgs,
        abs,
        ref_cfgs,
        refs,
        class_embed,
        decoders,
        head_lin,
        head_norm,
        head_out,
    })
}

impl Model {
    /// Run the network. Returns the forward context (tape, counters) and the
    /// logits: `[batch, num_classes]` for classification, otherwise
    /// `[batch, n, num_classes]`.
    pub fn forward<'a>(
        &'a mut self,
        input: &BatchInput,
        mode: Mode,
    ) -> Result<(ForwardCtx<'a>, TensorId)> {
        let cfg = &self.config;
        let (batch, n) = (input.batch, input.n);
        if batch == 0 || n == 0 || input.positions.len() != batch * n {
            return Err(Error::shape(
                "forward",
                format!("{} positions do not form batch {} x {}", input.positions.len(), batch, n),
            ));
        }
        let min = cfg.min_points();
        if n < min {
            return Err(Error::shape(
                "forward",
                format!(
                    "{n} points per cloud, but {} abstraction stages at ratio {} need at least {min}",
                    cfg.abs_stage_count(),
                    cfg.downsample_ratio
                ),
            ));
        }
        if cfg.task == Task::Partseg {
            let cats = input.categories.ok_or_else(|| {
                Error::Data("part segmentation needs a shape category per cloud".into())
            })?;
            if cats.len() != batch {
                return Err(Error::Data(format!(
                    "{} categories for {} clouds",
                    cats.len(),
                    batch
                )));
            }
            if let Some(&bad) = cats.iter().find(|&&c| c >= cfg.num_categories) {
                return Err(Error::Data(format!(
                    "shape category {bad} out of range 0..{}",
                    cfg.num_categories
                )));
            }
        }

        let stages = cfg.abs_stage_count();
        let mut ctx = ForwardCtx::new(&mut self.store, mode);

        ctx.graph.set_scope("embed", CostKind::Embedding);
        let ones = ctx.graph.input(Tensor::full(vec![batch * n, 1], 1.0));
        let mut h = {
            let lin = &self.embed_lin;
            let norm = &self.embed_norm;
            ctx.linear_norm_relu(ones, lin, norm)?
        };

        // Per-level skip state: positions, per-cloud count, features.
        let mut skips: Vec<(Vec<[f64; 3]>, usize, TensorId)> =
            vec![(input.positions.to_vec(), n, h)];
        let mut cur_pos = input.positions.to_vec();
        let mut n_cur = n;

        for i in 0..stages {
            let label = format!("abs{}", i + 1);
            ctx.graph.set_scope(&label, CostKind::Aggregation);
            // Only the first stage honors the configured start; once points
            // are in selection order, index 0 already names that same
            // physical point at every deeper resolution.
            let geo = sample_group(
                &cur_pos,
                batch,
                n_cur,
                cfg.downsample_ratio,
                cfg.k_abs,
                if i == 0 { cfg.fps_start } else { 0 },
            )?;
            ctx.counters.abs_tables.push(label);
            ctx.counters.comparisons += geo.comparisons;
            h = abs_stage(&mut ctx, &self.abs_cfgs[i], &self.abs[i], &geo, h)?;
            cur_pos = geo.centroids;
            n_cur = geo.m_cloud;

            let label = format!("ref{}", i + 1);
            ctx.graph.set_scope(&label, CostKind::Aggregation);
            h = ref_stage(
                &mut ctx,
                &self.ref_cfgs[i],
                &self.refs[i],
                &cur_pos,
                batch,
                n_cur,
                cfg.k_ref,
                &label,
                h,
            )?;
            skips.push((cur_pos.clone(), n_cur, h));
        }

        let logits = match cfg.task {
            Task::Classify => {
                ctx.graph.set_scope("head", CostKind::Head);
                let c = cfg.stage_width(stages);
                let h3 = ctx.graph.reshape(h, vec![batch, n_cur, c])?;
                let pooled = ctx.graph.reduce_max(h3, 1)?;
                let t = ctx.linear_norm_relu(pooled, &self.head_lin, &self.head_norm)?;
                ctx.linear(t, &self.head_out)?
            }
            Task::Segment | Task::Partseg => {
                let mut low = h;
                if let Some(table) = self.class_embed {
                    ctx.graph.set_scope("class_embed", CostKind::ClassEmbed);
                    let cats = input.categories.unwrap();
                    let table = ctx.param(table);
                    let per_cloud = ctx.graph.gather_rows(table, cats, &[batch])?;
                    let rows: Vec<usize> = (0..batch * n_cur).map(|r| r / n_cur).collect();
                    let per_point = ctx.graph.gather_rows(per_cloud, &rows, &[batch * n_cur])?;
                    low = ctx.graph.concat(&[low, per_point], 1)?;
                }
                for (d, i) in (0..stages).rev().enumerate() {
                    ctx.graph.set_scope(&format!("dec{i}"), CostKind::Decoder);
                    let (high_pos, _n_high, high) = &skips[i];
                    low = decoder_stage(
                        &mut ctx,
                        &self.decoders[d],
                        high_pos,
                        *high,
                        &cur_pos,
                        low,
                        batch,
                        cfg.gate_before_interpolation,
                    )?;
                    cur_pos = high_pos.clone();
                }
                ctx.graph.set_scope("head", CostKind::Head);
                let t = ctx.linear_norm_relu(low, &self.head_lin, &self.head_norm)?;
                let flat = ctx.linear(t, &self.head_out)?;
                ctx.graph.reshape(flat, vec![batch, n, cfg.num_classes])?
            }
        };
        Ok((ctx, logits))
    }
}
