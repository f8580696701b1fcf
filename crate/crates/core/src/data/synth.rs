use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Geometry, LabelMap, Sample, Split, Volume};
use crate::{Error, Result};

pub const BACKGROUND_MEAN: f64 = -50.0;
pub const BACKGROUND_STD: f64 = 30.0;
pub const FOREGROUND_MEAN: f64 = 60.0;
pub const FOREGROUND_STD: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cases: usize,
    /// Extents, axis 0 fastest (2 or 3 axes).
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub spacing: Vec<f64>,
    /// Inclusive bounds on the foreground voxel fraction of every case.
    pub min_foreground: f64,
    pub max_foreground: f64,
    /// Blobs per foreground class.
    pub max_blobs: usize,
    pub splits: SplitRatios,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_cases: 8,
            shape: vec![64, 64],
            num_classes: 2,
            spacing: vec![1.0, 1.0],
            min_foreground: 0.05,
            max_foreground: 0.4,
            max_blobs: 2,
            splits: SplitRatios::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!("num_classes must be in [2, 256], got {}", self.num_classes)));
        }
        Geometry::new(&self.shape, &self.spacing)?;
        if !(0.0..=1.0).contains(&self.min_foreground) || !(self.min_foreground..=1.0).contains(&self.max_foreground) {
            return Err(Error::Config(format!(
                "foreground bounds [{}, {}] are not an interval in [0, 1]",
                self.min_foreground, self.max_foreground
            )));
        }
        if self.max_blobs == 0 {
            return Err(Error::Config("max_blobs must be >= 1".into()));
        }
        let r = self.splits;
        if !(r.train >= 0.0 && r.val >= 0.0 && r.train + r.val <= 1.0) {
            return Err(Error::Config(format!("split ratios {r:?} must be non-negative and sum to <= 1")));
        }
        Ok(())
    }
}

/// Deterministic split from the SHA-256 of `case_id`.
pub fn split_for(case_id: &str, ratios: SplitRatios) -> Split {
    let digest = Sha256::digest(case_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    let u = (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64;
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipsoid,
    Box,
}

const MIN_RADIUS: usize = 2;
const ATTEMPTS: usize = 200;

fn paint_blob(rng: &mut ChaCha8Rng, label: &mut [u8], shape: &[usize], class: u8) {
    let rank = shape.len();
    let kind = if rng.random_bool(0.5) { Shape::Ellipsoid } else { Shape::Box };
    let mut center = [0.0f64; 3];
    let mut radius = [0.0f64; 3];
    for a in 0..rank {
        let n = shape[a];
        let rmax = (n / 4).max(MIN_RADIUS);
        let r = rng.random_range(MIN_RADIUS..=rmax);
        // keep the blob inside the grid
        let lo = r.min(n - 1);
        let hi = (n - 1).saturating_sub(r).max(lo);
        center[a] = rng.random_range(lo..=hi) as f64;
        radius[a] = r as f64;
    }
    let mut pos = [0usize; 3];
    for v in label.iter_mut() {
        let inside = match kind {
            Shape::Ellipsoid => {
                let mut s = 0.0;
                for a in 0..rank {
                    let d = (pos[a] as f64 - center[a]) / radius[a];
                    s += d * d;
                }
                s <= 1.0
            }
            Shape::Box => (0..rank).all(|a| (pos[a] as f64 - center[a]).abs() <= radius[a]),
        };
        if inside {
            *v = class;
        }
        for a in 0..rank {
            pos[a] += 1;
            if pos[a] < shape[a] {
                break;
            }
            pos[a] = 0;
        }
    }
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&h.finalize()[..32]);
    ChaCha8Rng::from_seed(s)
}

/// Case `index` of the dataset described by `cfg`.
pub fn synth_case(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let shape = &cfg.shape;
    if shape.iter().any(|&n| n < 2 * MIN_RADIUS + 1) {
        return Err(Error::Generation(format!(
            "a blob of radius {MIN_RADIUS} does not fit in shape {shape:?}"
        )));
    }
    let mut rng = case_rng(cfg.seed, index);
    let n: usize = shape.iter().product();
    let mut label = vec![0u8; n];
    let mut ok = false;
    for _ in 0..ATTEMPTS {
        label.iter_mut().for_each(|v| *v = 0);
        for class in 1..cfg.num_classes {
            let blobs = rng.random_range(1..=cfg.max_blobs);
            for _ in 0..blobs {
                paint_blob(&mut rng, &mut label, shape, class as u8);
            }
        }
        let fg = label.iter().filter(|&&v| v != 0).count() as f64 / n as f64;
        let present = (1..cfg.num_classes).all(|c| label.contains(&(c as u8)));
        if present && fg >= cfg.min_foreground && fg <= cfg.max_foreground {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Generation(format!(
            "could not place blobs with foreground fraction in [{}, {}] for shape {shape:?}",
            cfg.min_foreground, cfg.max_foreground
        )));
    }
    let bg = Normal::new(BACKGROUND_MEAN, BACKGROUND_STD).expect("valid normal");
    let fgd = Normal::new(FOREGROUND_MEAN, FOREGROUND_STD).expect("valid normal");
    let image: Vec<f32> = label
        .iter()
        .map(|&c| if c == 0 { bg.sample(&mut rng) } else { fgd.sample(&mut rng) } as f32)
        .collect();
    let geometry = Geometry::new(shape, &cfg.spacing)?;
    let case_id = format!("case_{index:04}");
    let split = split_for(&case_id, cfg.splits);
    Sample::new(
        Volume::new(geometry.clone(), image)?,
        LabelMap::new(geometry, label, cfg.num_classes)?,
        case_id,
        split,
    )
}

/// `cfg.n_cases` deterministic cases named `case_0000, case_0001, ...`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    (0..cfg.n_cases).map(|i| synth_case(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            n_cases: 4,
            shape: vec![32, 24],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(&cfg()).unwrap(), synth_dataset(&cfg()).unwrap());
        let other = SynthConfig { seed: 1, ..cfg() };
        assert_ne!(synth_dataset(&cfg()).unwrap(), synth_dataset(&other).unwrap());
    }

    #[test]
    fn foreground_fraction_within_bounds() {
        let c = SynthConfig {
            num_classes: 3,
            n_cases: 6,
            ..cfg()
        };
        for s in synth_dataset(&c).unwrap() {
            let fg = s.label.data.iter().filter(|&&v| v != 0).count() as f64 / s.label.data.len() as f64;
            assert!(fg >= c.min_foreground && fg <= c.max_foreground, "{fg}");
            assert!(s.label.data.contains(&1) && s.label.data.contains(&2));
        }
    }

    #[test]
    fn intensity_distributions_separate() {
        let c = SynthConfig {
            n_cases: 6,
            shape: vec![48, 48],
            ..SynthConfig::default()
        };
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        for s in synth_dataset(&c).unwrap() {
            for (&x, &l) in s.image.data.iter().zip(&s.label.data) {
                if l == 0 { bg.push(x as f64) } else { fg.push(x as f64) }
            }
        }
        assert!(fg.len() + bg.len() >= 10_000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mf, mb) = (mean(&fg), mean(&bg));
        let se = (FOREGROUND_STD.powi(2) / fg.len() as f64 + BACKGROUND_STD.powi(2) / bg.len() as f64).sqrt();
        assert!(mf - mb > 3.0 * se);
        assert!((mf - FOREGROUND_MEAN).abs() < 4.0 * FOREGROUND_STD / (fg.len() as f64).sqrt());
    }

    #[test]
    fn three_dimensional_cases() {
        let c = SynthConfig {
            shape: vec![12, 12, 10],
            spacing: vec![1.0, 1.0, 2.0],
            n_cases: 2,
            ..SynthConfig::default()
        };
        let d = synth_dataset(&c).unwrap();
        assert_eq!(d[0].image.shape(), &[12, 12, 10]);
    }

    #[test]
    fn generation_errors() {
        let tiny = SynthConfig { shape: vec![4, 40], ..cfg() };
        assert!(matches!(synth_case(&tiny, 0), Err(Error::Generation(_))));
        let impossible = SynthConfig {
            min_foreground: 0.99,
            max_foreground: 1.0,
            ..cfg()
        };
        assert!(matches!(synth_case(&impossible, 0), Err(Error::Generation(_))));
        let one = SynthConfig { num_classes: 1, ..cfg() };
        assert!(matches!(synth_case(&one, 0), Err(Error::Config(_))));
    }

    #[test]
    fn splits_follow_ratios() {
        let r = SplitRatios { train: 0.6, val: 0.2 };
        let n = 2000;
        let counts = (0..n).fold([0usize; 3], |mut c, i| {
            c[split_for(&format!("case_{i:04}"), r) as usize] += 1;
            c
        });
        assert!((counts[0] as f64 / n as f64 - 0.6).abs() < 0.05);
        assert!((counts[1] as f64 / n as f64 - 0.2).abs() < 0.05);
        assert_eq!(split_for("case_0007", r), split_for("case_0007", r));
    }
}
