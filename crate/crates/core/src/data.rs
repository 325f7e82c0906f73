//! Synthetic point clouds: parameterized primitives with analytic part
//! labels, random rigid pose and scale, and a versioned binary container.
//!
//! Labels are assigned on the canonical (pre-pose) surface, so they are
//! invariant to the applied pose by construction. Coordinates are quantized
//! through 32-bit floats at generation time, which makes save/load round
//! trips bit-exact.

use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape families the generator knows how to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

/// Part classes per family; every family splits into two analytic regions.
pub const PART_CLASSES: usize = 2;

const CYLINDER_RADIUS: f64 = 1.0;
const CYLINDER_HALF_HEIGHT: f64 = 1.0;
const TORUS_RING: f64 = 1.0;
const TORUS_TUBE: f64 = 0.35;

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Cube => "cube",
            Family::Cylinder => "cylinder",
            Family::Torus => "torus",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "sphere" => Ok(Family::Sphere),
            "cube" => Ok(Family::Cube),
            "cylinder" => Ok(Family::Cylinder),
            "torus" => Ok(Family::Torus),
            other => Err(Error::Config(format!(
                "unknown shape family '{other}' (expected sphere, cube, cylinder, torus)"
            ))),
        }
    }

    fn code(self) -> u8 {
        match self {
            Family::Sphere => 0,
            Family::Cube => 1,
            Family::Cylinder => 2,
            Family::Torus => 3,
        }
    }

    fn from_code(code: u8, offset: usize) -> Result<Family> {
        match code {
            0 => Ok(Family::Sphere),
            1 => Ok(Family::Cube),
            2 => Ok(Family::Cylinder),
            3 => Ok(Family::Torus),
            other => Err(Error::Parse {
                offset,
                detail: format!("unknown family code {other}"),
            }),
        }
    }
}

/// What to generate. Families cycle round-robin over samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub families: Vec<Family>,
    pub n_samples: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            families: vec![Family::Sphere, Family::Cube, Family::Torus],
            n_samples: 200,
            points_per_cloud: 256,
            noise_sigma: 0.01,
        }
    }
}

/// One cloud: quantized positions, per-point part labels, the family index
/// as both cloud label and shape category.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub positions: Vec<[f64; 3]>,
    pub point_labels: Vec<u16>,
    pub cloud_label: u16,
    pub category: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub families: Vec<Family>,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Two independent standard normals (Box-Muller).
fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut u1: f64 = rng.random();
    while u1 <= 0.0 {
        u1 = rng.random();
    }
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let a = 2.0 * std::f64::consts::PI * u2;
    (r * a.cos(), r * a.sin())
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    gaussian_pair(rng).0
}

/// Uniform point on the canonical surface plus its part label.
/// Regions: sphere splits at the equator (upper = 1); cube separates the two
/// faces normal to z (= 1) from the four side faces (= 0); cylinder side = 0,
/// caps = 1; torus outer half = 0, inner half = 1.
pub fn sample_surface(family: Family, rng: &mut ChaCha8Rng) -> ([f64; 3], u16) {
    match family {
        Family::Sphere => loop {
            let (a, b) = gaussian_pair(rng);
            let c = gaussian(rng);
            let norm = (a * a + b * b + c * c).sqrt();
            if norm > 1e-9 {
                let p = [a / norm, b / norm, c / norm];
                let label = if p[2] >= 0.0 { 1 } else { 0 };
                return (p, label);
            }
        },
        Family::Cube => {
            let face = rng.random_range(0..6usize);
            let u = rng.random::<f64>() * 2.0 - 1.0;
            let v = rng.random::<f64>() * 2.0 - 1.0;
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            let (p, label) = match face / 2 {
                0 => ([s, u, v], 0),
                1 => ([u, s, v], 0),
                _ => ([u, v, s], 1),
            };
            (p, label)
        }
        Family::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT);
            // Surface areas: side 2*pi*r*(2h), each cap pi*r^2.
            let side_area = 4.0 * std::f64::consts::PI * r * h;
            let cap_area = std::f64::consts::PI * r * r;
            let total = side_area + 2.0 * cap_area;
            let pick = rng.random::<f64>() * total;
            if pick < side_area {
                let phi = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                let z = (rng.random::<f64>() * 2.0 - 1.0) * h;
                ([r * phi.cos(), r * phi.sin(), z], 0)
            } else {
                let z = if pick < side_area + cap_area { h } else { -h };
                let rad = r * rng.random::<f64>().sqrt();
                let phi = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                ([rad * phi.cos(), rad * phi.sin(), z], 1)
            }
        }
        Family::Torus => {
            let (ring, tube) = (TORUS_RING, TORUS_TUBE);
            // Area density over the tube angle is proportional to
            // ring + tube*cos(theta); rejection-sample it.
            let theta = loop {
                let theta = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                let accept = rng.random::<f64>() * (ring + tube);
                if accept <= ring + tube * theta.cos() {
                    break theta;
                }
            };
            let phi = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            let radial = ring + tube * theta.cos();
            let p = [radial * phi.cos(), radial * phi.sin(), tube * theta.sin()];
            let label = if theta.cos() >= 0.0 { 0 } else { 1 };
            (p, label)
        }
    }
}

/// Random rotation (uniform over orientations, via normalized quaternion).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (w, x, y, z) = loop {
        let (a, b) = gaussian_pair(rng);
        let (c, d) = gaussian_pair(rng);
        let norm = (a * a + b * b + c * c + d * d).sqrt();
        if norm > 1e-9 {
            break (a / norm, b / norm, c / norm, d / norm);
        }
    };
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn apply(rot: &[[f64; 3]; 3], scale: f64, shift: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let q = [p[0] * scale, p[1] * scale, p[2] * scale];
    [
        rot[0][0] * q[0] + rot[0][1] * q[1] + rot[0][2] * q[2] + shift[0],
        rot[1][0] * q[0] + rot[1][1] * q[1] + rot[1][2] * q[2] + shift[1],
        rot[2][0] * q[0] + rot[2][1] * q[1] + rot[2][2] * q[2] + shift[2],
    ]
}

/// Generate a dataset. Each sample draws from its own stream derived from
/// `seed` and the sample index, so generation order never matters.
pub fn generate(config: &GenConfig, seed: u64) -> Result<Dataset> {
    if config.families.is_empty() {
        return Err(Error::Config("at least one shape family is required".into()));
    }
    if config.n_samples == 0 || config.points_per_cloud == 0 {
        return Err(Error::Config("n_samples and points_per_cloud must be positive".into()));
    }
    if !config.noise_sigma.is_finite() || config.noise_sigma < 0.0 {
        return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
    }
    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let family_index = i % config.families.len();
        let family = config.families[family_index];
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(i as u64)));

        let mut positions = Vec::with_capacity(config.points_per_cloud);
        let mut point_labels = Vec::with_capacity(config.points_per_cloud);
        for _ in 0..config.points_per_cloud {
            let (p, label) = sample_surface(family, &mut rng);
            positions.push(p);
            point_labels.push(label);
        }
        if config.noise_sigma > 0.0 {
            for p in &mut positions {
                for coord in p.iter_mut() {
                    *coord += config.noise_sigma * gaussian(&mut rng);
                }
            }
        }
        let rot = random_rotation(&mut rng);
        let scale = 0.8 + 0.4 * rng.random::<f64>();
        let shift = [
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        ];
        for p in &mut positions {
            let posed = apply(&rot, scale, shift, *p);
            *p = [posed[0] as f32 as f64, posed[1] as f32 as f64, posed[2] as f32 as f64];
        }
        samples.push(Sample {
            positions,
            point_labels,
            cloud_label: family_index as u16,
            category: family_index as u16,
        });
    }
    Ok(Dataset {
        families: config.families.clone(),
        points_per_cloud: config.points_per_cloud,
        noise_sigma: config.noise_sigma,
        seed,
        samples,
    })
}

const MAGIC: [u8; 4] = *b"PCDS";
const VERSION: u32 = 1;

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("file truncated ({} bytes needed, {} left)", n, self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.families.len()
    }

    /// 80/20 split by sample index: every fifth sample goes to the test set.
    pub fn train_test(&self) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..self.samples.len() {
            if i % 5 == 4 {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }

    /// Write the binary container plus a human-readable sidecar summary at
    /// `<path>.txt`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.points_per_cloud as u32).to_le_bytes());
        buf.extend_from_slice(&(self.families.len() as u32).to_le_bytes());
        for f in &self.families {
            buf.push(f.code());
        }
        buf.extend_from_slice(&self.noise_sigma.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for sample in &self.samples {
            buf.extend_from_slice(&sample.cloud_label.to_le_bytes());
            buf.extend_from_slice(&sample.category.to_le_bytes());
            for p in &sample.positions {
                for &coord in p {
                    buf.extend_from_slice(&(coord as f32).to_le_bytes());
                }
            }
            for &label in &sample.point_labels {
                buf.extend_from_slice(&label.to_le_bytes());
            }
        }
        fs::write(path, &buf)?;
        fs::write(sidecar_path(path), self.summary())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let buf = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse { offset: 0, detail: "not a dataset file (bad magic)".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                detail: format!("unsupported dataset version {version} (expected {VERSION})"),
            });
        }
        let n_samples = r.u32()? as usize;
        let points = r.u32()? as usize;
        let n_families = r.u32()? as usize;
        let mut families = Vec::with_capacity(n_families);
        for _ in 0..n_families {
            let at = r.pos;
            families.push(Family::from_code(r.u8()?, at)?);
        }
        if families.is_empty() {
            return Err(Error::Parse { offset: 12, detail: "dataset lists no shape families".into() });
        }
        let noise_sigma = r.f64()?;
        let seed = r.u64()?;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let at = r.pos;
            let cloud_label = r.u16()?;
            let category = r.u16()?;
            if (cloud_label as usize) >= families.len() || (category as usize) >= families.len() {
                return Err(Error::Parse {
                    offset: at,
                    detail: format!("cloud label {cloud_label} outside the {} families", families.len()),
                });
            }
            let mut positions = Vec::with_capacity(points);
            for _ in 0..points {
                let x = r.f32()? as f64;
                let y = r.f32()? as f64;
                let z = r.f32()? as f64;
                positions.push([x, y, z]);
            }
            let mut point_labels = Vec::with_capacity(points);
            for _ in 0..points {
                let at = r.pos;
                let label = r.u16()?;
                if (label as usize) >= PART_CLASSES {
                    return Err(Error::Parse {
                        offset: at,
                        detail: format!("part label {label} outside {PART_CLASSES} classes"),
                    });
                }
                point_labels.push(label);
            }
            samples.push(Sample { positions, point_labels, cloud_label, category });
        }
        Ok(Dataset { families, points_per_cloud: points, noise_sigma, seed, samples })
    }

    fn summary(&self) -> String {
        let mut per_family = vec![0usize; self.families.len()];
        let mut part_counts = [0u64; PART_CLASSES];
        for s in &self.samples {
            per_family[s.cloud_label as usize] += 1;
            for &l in &s.point_labels {
                part_counts[l as usize] += 1;
            }
        }
        let mut out = String::new();
        out.push_str(&format!(
            "synthetic point-cloud dataset\nsamples: {}\npoints per cloud: {}\nnoise sigma: {}\nseed: {}\n",
            self.samples.len(),
            self.points_per_cloud,
            self.noise_sigma,
            self.seed
        ));
        for (f, count) in self.families.iter().zip(&per_family) {
            out.push_str(&format!("family {}: {} samples\n", f.label(), count));
        }
        for (i, count) in part_counts.iter().enumerate() {
            out.push_str(&format!("part class {i}: {count} points\n"));
        }
        out
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".txt");
    std::path::PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_sit_on_the_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (p, label) = sample_surface(Family::Sphere, &mut rng);
            let radius = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((radius - 1.0).abs() < 1e-12);
            assert_eq!(label, (p[2] >= 0.0) as u16);
        }
    }

    #[test]
    fn cylinder_regions_match_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (p, label) = sample_surface(Family::Cylinder, &mut rng);
            let radial = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if label == 1 {
                assert!(p[2].abs() == CYLINDER_HALF_HEIGHT && radial <= CYLINDER_RADIUS + 1e-12);
            } else {
                assert!((radial - CYLINDER_RADIUS).abs() < 1e-12);
                assert!(p[2].abs() <= CYLINDER_HALF_HEIGHT);
            }
        }
    }

    #[test]
    fn cylinder_side_region_is_the_majority() {
        // Side area over total is 2h/(2h+r) = 2/3 for r=1, h=2.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let side = (0..n)
            .filter(|_| sample_surface(Family::Cylinder, &mut rng).1 == 0)
            .count();
        let frac = side as f64 / n as f64;
        assert!(frac > 0.5, "side fraction {frac}");
        assert!((frac - 2.0 / 3.0).abs() < 0.05, "side fraction {frac}");
    }

    #[test]
    fn torus_points_satisfy_the_surface_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let (p, label) = sample_surface(Family::Torus, &mut rng);
            let ring_dist = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let tube = ((ring_dist - TORUS_RING).powi(2) + p[2] * p[2]).sqrt();
            assert!((tube - TORUS_TUBE).abs() < 1e-12);
            assert_eq!(label, (ring_dist < TORUS_RING) as u16);
        }
    }

    #[test]
    fn cube_separates_z_faces_from_side_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let (p, label) = sample_surface(Family::Cube, &mut rng);
            let on_z_face = p[2].abs() == 1.0;
            assert_eq!(label == 1, on_z_face, "point {p:?}");
            assert!(p.iter().any(|c| c.abs() == 1.0));
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let cfg = GenConfig { n_samples: 12, points_per_cloud: 64, ..GenConfig::default() };
        let a = generate(&cfg, 77).unwrap();
        let b = generate(&cfg, 77).unwrap();
        assert_eq!(a, b);
        let c = generate(&cfg, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_is_four_to_one_and_disjoint() {
        let cfg = GenConfig { n_samples: 25, points_per_cloud: 16, ..GenConfig::default() };
        let ds = generate(&cfg, 1).unwrap();
        let (train, test) = ds.train_test();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 5);
        assert!(test.iter().all(|i| i % 5 == 4));
        assert!(train.iter().all(|i| !test.contains(i)));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        let cfg = GenConfig {
            families: vec![Family::Cylinder, Family::Torus],
            n_samples: 6,
            points_per_cloud: 32,
            noise_sigma: 0.02,
        };
        let ds = generate(&cfg, 9).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
        assert!(path.with_file_name("toy.bin.txt").exists());
    }

    #[test]
    fn truncated_file_reports_the_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        let cfg = GenConfig { n_samples: 4, points_per_cloud: 16, ..GenConfig::default() };
        generate(&cfg, 3).unwrap().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match Dataset::load(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"not a dataset at all").unwrap();
        match Dataset::load(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_family_name_is_a_config_error() {
        assert!(matches!(Family::parse("cone"), Err(Error::Config(_))));
    }
}
