//! Positional encodings and their fusion with grouped features.
//!
//! Two families: a fixed sinusoidal map (`pe_sin`) and learnable MLP codes.
//! The high-dimensional variants (`hpe_*`) project into the feature width C
//! so codes can be fused directly with grouped features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_linear, init_norm, ForwardCtx, LinearP, NormP, ParamStore};
use crate::tensor::{CostKind, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    None,
    PeSin,
    PeMlp,
    HpeSin,
    HpeMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Add,
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub kind: EncodingKind,
    /// Intermediate width of the MLP codes as a fraction of the output width:
    /// `c_mid = max(1, round(c * hidden_ratio))`.
    pub hidden_ratio: f64,
    pub fusion: Fusion,
    pub coordinates: Coordinates,
    /// Input scale for the sinusoidal map (applied before the 100x factor).
    pub rescale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            kind: EncodingKind::HpeMlp,
            hidden_ratio: 0.25,
            fusion: Fusion::Add,
            coordinates: Coordinates::Relative,
            rescale: 1.0,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hidden_ratio > 0.0) || !self.hidden_ratio.is_finite() {
            return Err(Error::Config(format!(
                "encoding hidden_ratio must be positive, got {}",
                self.hidden_ratio
            )));
        }
        if !self.rescale.is_finite() || self.rescale == 0.0 {
            return Err(Error::Config(format!(
                "encoding rescale must be finite and nonzero, got {}",
                self.rescale
            )));
        }
        Ok(())
    }

    pub fn c_mid(&self, c_out: usize) -> usize {
        ((c_out as f64 * self.hidden_ratio).round() as usize).max(1)
    }
}

/// Width of the raw sinusoidal map for a requested channel count.
pub fn pe_sin_dim(c: usize) -> usize {
    (c / 6) * 6
}

/// Fixed sinusoidal encoding of 3-d coordinates.
///
/// For sub-group `i` (six channels each) and axis `a` in x, y, z:
/// entry `6i + 2a`   = sin(100 * p_a / 1000^(6i/c))
/// entry `6i + 2a+1` = cos(100 * p_a / 1000^(6i/c))
///
/// Output shape replaces the trailing 3 with `floor(c/6) * 6`.
pub fn pe_sin(coords: &Tensor, c: usize, rescale: f64) -> Result<Tensor> {
    if coords.last_dim() != 3 {
        return Err(Error::shape(
            "pe_sin",
            format!("coordinates must be [..., 3], got {:?}", coords.shape()),
        ));
    }
    if c < 6 {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs at least 6 channels, got {}",
            c
        )));
    }
    let groups = c / 6;
    let width = groups * 6;
    let rows = coords.leading();
    let cd = coords.data();
    let mut out = vec![0.0; rows * width];
    let mut denoms = Vec::with_capacity(groups);
    for i in 0..groups {
        denoms.push(1000f64.powf((6 * i) as f64 / c as f64));
    }
    for r in 0..rows {
        let p = &cd[r * 3..r * 3 + 3];
        let o = &mut out[r * width..(r + 1) * width];
        for (i, &denom) in denoms.iter().enumerate() {
            for a in 0..3 {
                let arg = 100.0 * p[a] * rescale / denom;
                o[6 * i + 2 * a] = arg.sin();
                o[6 * i + 2 * a + 1] = arg.cos();
            }
        }
    }
    let mut shape = coords.shape().to_vec();
    *shape.last_mut().unwrap() = width;
    Tensor::new(shape, out)
}

fn pad_last_dim(t: Tensor, c: usize) -> Tensor {
    let width = t.last_dim();
    if width == c {
        return t;
    }
    let rows = t.leading();
    let mut shape = t.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        out[r * c..r * c + width].copy_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    Tensor::new(shape, out).unwrap()
}

/// Learnable state of one encoder instance.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub kind: EncodingKind,
    pub c_out: usize,
    pub fusion: Fusion,
    pub coordinates: Coordinates,
    pub rescale: f64,
    delta: Option<LinearP>,
    norm: Option<NormP>,
    theta: Option<LinearP>,
}

/// Register one encoder's parameters. Layout by kind:
/// - none:    no parameters
/// - pe_sin:  no parameters (fixed map, zero-padded to c)
/// - pe_mlp:  delta 3->3, norm, theta 3->c (the 3-wide special case below)
/// - hpe_mlp: delta 3->c_mid, norm, theta c_mid->c
/// - hpe_sin: theta (floor(c/6)*6)->c followed by norm + relu
pub fn init_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &EncodingConfig,
    c_out: usize,
) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut p = EncoderParams {
        kind: cfg.kind,
        c_out,
        fusion: cfg.fusion,
        coordinates: cfg.coordinates,
        rescale: cfg.rescale,
        delta: None,
        norm: None,
        theta: None,
    };
    match cfg.kind {
        EncodingKind::None => {}
        EncodingKind::PeSin => {
            if c_out < 6 {
                return Err(Error::Config(format!(
                    "pe_sin needs at least 6 output channels, got {}",
                    c_out
                )));
            }
        }
        EncodingKind::PeMlp | EncodingKind::HpeMlp => {
            let c_mid = if cfg.kind == EncodingKind::PeMlp { 3 } else { cfg.c_mid(c_out) };
            p.delta = Some(init_linear(store, rng, &format!("{name}/delta"), 3, c_mid));
            p.norm = Some(init_norm(store, &format!("{name}/norm"), c_mid));
            p.theta = Some(init_linear(store, rng, &format!("{name}/theta"), c_mid, c_out));
        }
        EncodingKind::HpeSin => {
            let pe = pe_sin_dim(c_out);
            if pe < 6 {
                return Err(Error::Config(format!(
                    "hpe_sin needs at least 6 output channels, got {}",
                    c_out
                )));
            }
            p.theta = Some(init_linear(store, rng, &format!("{name}/theta"), pe, c_out));
            p.norm = Some(init_norm(store, &format!("{name}/norm"), c_out));
        }
    }
    Ok(p)
}

impl EncoderParams {
    /// Code tensor for grouped coordinates (`[m, k, 3]` offsets or absolute
    /// positions, chosen by the caller per `self.coordinates`). Returns
    /// `None` for kind = none.
    pub fn encode(&self, ctx: &mut ForwardCtx, coords: &Tensor) -> Result<Option<TensorId>> {
        let kind = ctx.graph.kind();
        ctx.graph.set_kind(CostKind::Encoder);
        let out = match self.kind {
            EncodingKind::None => None,
            EncodingKind::PeSin => {
                let vals = pad_last_dim(pe_sin(coords, self.c_out, self.rescale)?, self.c_out);
                Some(ctx.graph.input(vals))
            }
            EncodingKind::PeMlp | EncodingKind::HpeMlp => {
                let x = ctx.graph.input(coords.clone());
                let h = ctx.linear(x, self.delta.as_ref().unwrap())?;
                ctx.graph.set_kind(CostKind::NormAct);
                let h = ctx.batch_norm(h, self.norm.as_ref().unwrap())?;
                ctx.graph.set_kind(CostKind::Encoder);
                Some(ctx.linear(h, self.theta.as_ref().unwrap())?)
            }
            EncodingKind::HpeSin => {
                let vals = pe_sin(coords, self.c_out, self.rescale)?;
                let x = ctx.graph.input(vals);
                let h = ctx.linear(x, self.theta.as_ref().unwrap())?;
                ctx.graph.set_kind(CostKind::NormAct);
                let h = ctx.batch_norm(h, self.norm.as_ref().unwrap())?;
                Some(ctx.graph.relu(h))
            }
        };
        ctx.graph.set_kind(kind);
        Ok(out)
    }

    /// Fuse codes into grouped features (same shape). No-op when the encoder
    /// kind is none.
    pub fn fuse(
        &self,
        ctx: &mut ForwardCtx,
        features: TensorId,
        codes: Option<TensorId>,
    ) -> Result<TensorId> {
        let Some(codes) = codes else {
            return Ok(features);
        };
        let kind = ctx.graph.kind();
        ctx.graph.set_kind(CostKind::Elementwise);
        let out = match self.fusion {
            Fusion::Add => ctx.graph.add(features, codes),
            Fusion::Multiply => ctx.graph.mul(features, codes),
        };
        ctx.graph.set_kind(kind);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use rand::SeedableRng;

    #[test]
    fn pe_sin_quarter_period_hits_one() {
        let coords = Tensor::new(vec![1, 3], vec![std::f64::consts::PI / 200.0, 0.0, 0.0]).unwrap();
        let out = pe_sin(&coords, 6, 1.0).unwrap();
        let d = out.data();
        assert!((d[0] - 1.0).abs() < 1e-12, "sin(pi/2) entry, got {}", d[0]);
        assert!(d[1].abs() < 1e-12, "cos(pi/2) entry, got {}", d[1]);
        assert_eq!(&d[2..6], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_sin_width_rounds_down_to_multiple_of_six() {
        let coords = Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap();
        assert_eq!(pe_sin(&coords, 32, 1.0).unwrap().shape(), &[2, 30]);
        assert_eq!(pe_sin_dim(32), 30);
    }

    #[test]
    fn pe_sin_rejects_narrow_channels() {
        let coords = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(pe_sin(&coords, 5, 1.0).is_err());
    }

    #[test]
    fn mlp_code_params_grow_with_ratio() {
        let mut counts = Vec::new();
        for ratio in [0.125, 0.25, 0.5, 1.0] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cfg = EncodingConfig { hidden_ratio: ratio, ..Default::default() };
            init_encoder(&mut store, &mut rng, "e", &cfg, 32).unwrap();
            counts.push(store.learnable_scalars());
        }
        for w in counts.windows(2) {
            assert!(w[0] < w[1], "expected strictly increasing params, got {:?}", counts);
        }
    }

    #[test]
    fn zero_theta_gives_zero_codes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = init_encoder(&mut store, &mut rng, "e", &EncodingConfig::default(), 8).unwrap();
        let theta = enc.theta.as_ref().unwrap();
        let zeros = vec![0.0; store.tensor(theta.w).numel()];
        store.set_values(theta.w, &zeros).unwrap();
        let zeros = vec![0.0; store.tensor(theta.b).numel()];
        store.set_values(theta.b, &zeros).unwrap();

        let coords = Tensor::new(vec![2, 2, 3], vec![0.3; 12]).unwrap();
        let mut ctx = ForwardCtx::new(&mut store, Mode::Train);
        let codes = enc.encode(&mut ctx, &coords).unwrap().unwrap();
        assert!(ctx.graph.value(codes).data().iter().all(|&v| v == 0.0));
    }

    // Construction: identity theta, bias 0, eval-mode norm with running stats
    // (0, 1 - eps) reproduces the raw sinusoidal values exactly as long as
    // they are nonnegative (relu is then an identity too).
    #[test]
    fn hpe_sin_identity_construction_reproduces_pe_sin() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncodingConfig { kind: EncodingKind::HpeSin, ..Default::default() };
        let enc = init_encoder(&mut store, &mut rng, "e", &cfg, 6).unwrap();
        let theta = enc.theta.as_ref().unwrap();
        let mut eye = vec![0.0; 36];
        for i in 0..6 {
            eye[i * 6 + i] = 1.0;
        }
        store.set_values(theta.w, &eye).unwrap();
        store.set_values(theta.b, &[0.0; 6]).unwrap();
        let norm = enc.norm.as_ref().unwrap();
        store
            .set_values(norm.running_var, &[1.0 - crate::nn::NORM_EPS; 6])
            .unwrap();

        let coords = Tensor::new(vec![1, 2, 3], vec![0.001, 0.002, 0.003, 0.004, 0.001, 0.002]).unwrap();
        let want = pe_sin(&coords, 6, 1.0).unwrap();
        assert!(want.data().iter().all(|&v| v >= 0.0), "construction needs nonnegative codes");

        let mut ctx = ForwardCtx::new(&mut store, Mode::Eval);
        let codes = enc.encode(&mut ctx, &coords).unwrap().unwrap();
        let got = ctx.graph.value(codes).data();
        for (g, w) in got.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-15, "got {}, want {}", g, w);
        }
    }

    #[test]
    fn fusion_add_and_multiply_differ() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut outs = Vec::new();
        for fusion in [Fusion::Add, Fusion::Multiply] {
            let cfg = EncodingConfig { kind: EncodingKind::PeSin, fusion, ..Default::default() };
            let enc = init_encoder(&mut store, &mut rng, &format!("e{:?}", fusion), &cfg, 6).unwrap();
            let coords = Tensor::new(vec![1, 1, 3], vec![0.01, 0.02, 0.03]).unwrap();
            let mut ctx = ForwardCtx::new(&mut store, Mode::Train);
            let feats = ctx.graph.input(Tensor::full(vec![1, 1, 6], 2.0));
            let codes = enc.encode(&mut ctx, &coords).unwrap();
            let fused = enc.fuse(&mut ctx, feats, codes).unwrap();
            outs.push(ctx.graph.value(fused).data().to_vec());
        }
        assert_ne!(outs[0], outs[1]);
        // add: 2 + code; multiply: 2 * code.
        let code0 = outs[0][0] - 2.0;
        assert!((outs[1][0] - 2.0 * code0).abs() < 1e-12);
    }
}
