//! Synthetic OCT-like cross-sections: horizontally layered bands with smooth
//! undulating boundaries, per-layer mean intensity and Gaussian noise.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Minimum thickness, in rows, of every band at every column.
pub const MIN_GAP: usize = 2;

/// Display names of the eight classes (background then seven layers).
pub const CLASS_NAMES: [&str; 8] = ["Background", "ILM", "NFL-IPL", "INL", "OPL", "ONL-ISM", "ISE", "OS-RPE"];

pub fn class_name(k: usize) -> String {
    CLASS_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{k}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Foreground layers; classes are background plus these.
    pub layer_count: usize,
    /// Sinusoids summed into the shared boundary undulation.
    pub boundary_components: usize,
    /// Amplitude range in pixels of each undulation component.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Mean intensity per class, background first.
    pub layer_intensity_means: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 128,
            layer_count: 7,
            boundary_components: 2,
            amplitude_min: 1.0,
            amplitude_max: 3.0,
            layer_intensity_means: vec![0.05, 0.85, 0.55, 0.30, 0.65, 0.20, 0.95, 0.45],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Fraction of the height above the first boundary (range).
const TOP_FRACTION: (f64, f64) = (0.10, 0.20);
/// Relative jitter of each layer's nominal thickness.
const THICKNESS_JITTER: f64 = 0.25;

impl SynthConfig {
    pub fn classes(&self) -> usize {
        self.layer_count + 1
    }

    fn nominal_thickness(&self) -> f64 {
        let top = TOP_FRACTION.1 * self.height as f64;
        (self.height as f64 - top) / (self.layer_count + 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "synthetic image size {}x{} must be positive and divisible by 8",
                self.height, self.width
            )));
        }
        if self.layer_count == 0 || self.layer_count > 255 {
            return Err(Error::Config(format!("layer_count {} must be in 1..=255", self.layer_count)));
        }
        if self.layer_intensity_means.len() != self.classes() {
            return Err(Error::Config(format!(
                "layer_intensity_means needs {} entries (background + {} layers), got {}",
                self.classes(),
                self.layer_count,
                self.layer_intensity_means.len()
            )));
        }
        if self.layer_intensity_means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("layer intensity means must lie in [0, 1]".into()));
        }
        let mut sorted = self.layer_intensity_means.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|p| p[1] - p[0] < 0.05 - 1e-12) {
            return Err(Error::Config(
                "layer intensity means must differ pairwise by at least 0.05".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if !(0.0 <= self.amplitude_min && self.amplitude_min <= self.amplitude_max) {
            return Err(Error::Config(format!(
                "amplitude range [{}, {}] is not a valid interval",
                self.amplitude_min, self.amplitude_max
            )));
        }
        // Each boundary wiggles by up to a quarter of the amplitude on its own;
        // two neighbours moving apart must still leave MIN_GAP rows.
        let thinnest = self.nominal_thickness() * (1.0 - THICKNESS_JITTER);
        if thinnest - self.amplitude_max / 2.0 < MIN_GAP as f64 {
            return Err(Error::Config(format!(
                "height {} with {} layers and amplitude up to {} px cannot keep a {MIN_GAP}-row minimum gap (thinnest layer {:.2} rows)",
                self.height, self.layer_count, self.amplitude_max, thinnest
            )));
        }
        Ok(())
    }
}

struct Wave {
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut impl Rng, amp_min: f64, amp_max: f64) -> Self {
        Wave {
            amplitude: if amp_max > amp_min { rng.gen_range(amp_min..=amp_max) } else { amp_min },
            frequency: rng.gen_range(0.3..2.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, x: f64, width: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * x / width + self.phase).sin()
    }
}

/// Integer boundary rows per column: `rows[i][x]` is the first row of layer `i + 1`.
fn boundaries(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let (h, w) = (cfg.height, cfg.width);
    let top = rng.gen_range(TOP_FRACTION.0..=TOP_FRACTION.1) * h as f64;
    let tau = cfg.nominal_thickness();
    let mut base = Vec::with_capacity(cfg.layer_count);
    let mut pos = top;
    for _ in 0..cfg.layer_count {
        base.push(pos);
        pos += tau * rng.gen_range(1.0 - THICKNESS_JITTER..=1.0 + THICKNESS_JITTER);
    }
    let shared: Vec<Wave> = (0..cfg.boundary_components)
        .map(|_| Wave::random(rng, cfg.amplitude_min, cfg.amplitude_max))
        .collect();
    let own: Vec<Wave> = (0..cfg.layer_count)
        .map(|_| Wave::random(rng, 0.0, cfg.amplitude_max / 4.0))
        .collect();

    let mut rows = vec![vec![0usize; w]; cfg.layer_count];
    let last_allowed = h - MIN_GAP;
    for x in 0..w {
        let xf = x as f64;
        let offset: f64 = shared.iter().map(|s| s.at(xf, w as f64)).sum();
        let mut col: Vec<usize> = base
            .iter()
            .zip(&own)
            .map(|(&b, wave)| (b + offset + wave.at(xf, w as f64)).round().max(1.0) as usize)
            .collect();
        for i in 1..col.len() {
            col[i] = col[i].max(col[i - 1] + MIN_GAP);
        }
        let n = col.len();
        col[n - 1] = col[n - 1].min(last_allowed);
        for i in (0..n - 1).rev() {
            col[i] = col[i].min(col[i + 1] - MIN_GAP);
        }
        for (i, &r) in col.iter().enumerate() {
            rows[i][x] = r;
        }
    }
    rows
}

/// Draws `n` samples; a pure function of `(config, n)`.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let (h, w) = (cfg.height, cfg.width);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = boundaries(cfg, &mut rng);
        let mut labels = vec![0u8; h * w];
        for x in 0..w {
            for (layer, col) in rows.iter().enumerate() {
                for y in col[x]..h {
                    labels[y * w + x] = (layer + 1) as u8;
                }
            }
        }
        let pixels = labels
            .iter()
            .map(|&k| {
                let mean = cfg.layer_intensity_means[k as usize];
                let v = if cfg.noise_sigma > 0.0 { mean + noise.sample(&mut rng) } else { mean };
                v.clamp(0.0, 1.0) as f32
            })
            .collect();
        samples.push(Sample {
            image: Image::new(h, w, pixels)?,
            labels: LabelMap::new(1, h, w, cfg.classes(), labels)?,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            seed: 42,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg, 3).unwrap(), generate(&cfg, 3).unwrap());
        let other = SynthConfig { seed: 43, ..cfg };
        assert_ne!(generate(&other, 1).unwrap()[0].labels, generate(&SynthConfig::default(), 1).unwrap()[0].labels);
    }

    #[test]
    fn noiseless_image_thresholds_back_to_labels() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            seed: 7,
            ..SynthConfig::default()
        };
        for s in generate(&cfg, 4).unwrap() {
            let recovered: Vec<u8> = s
                .image
                .pixels()
                .iter()
                .map(|&v| {
                    cfg.layer_intensity_means
                        .iter()
                        .enumerate()
                        .min_by(|a, b| (a.1 - v as f64).abs().total_cmp(&(b.1 - v as f64).abs()))
                        .unwrap()
                        .0 as u8
                })
                .collect();
            assert_eq!(recovered, s.labels.data());
        }
    }

    #[test]
    fn columns_are_ordered_with_minimum_thickness() {
        let cfg = SynthConfig {
            seed: 3,
            ..SynthConfig::default()
        };
        for s in generate(&cfg, 10).unwrap() {
            let (h, w) = (cfg.height, cfg.width);
            for x in 0..w {
                let col: Vec<u8> = (0..h).map(|y| s.labels.at(0, y, x)).collect();
                assert!(col.windows(2).all(|p| p[1] == p[0] || p[1] == p[0] + 1), "column {x}: {col:?}");
                for k in 1..cfg.classes() as u8 {
                    let rows = col.iter().filter(|&&v| v == k).count();
                    assert!(rows >= MIN_GAP, "layer {k} has {rows} rows in column {x}");
                }
            }
        }
    }

    #[test]
    fn rejects_impossible_gap() {
        let cfg = SynthConfig {
            height: 24,
            amplitude_max: 3.0,
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_close_intensities_and_bad_size() {
        let mut cfg = SynthConfig::default();
        cfg.layer_intensity_means[2] = cfg.layer_intensity_means[1] - 0.01;
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            width: 100,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
