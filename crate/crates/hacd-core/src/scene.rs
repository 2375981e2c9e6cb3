//! Reproducible synthetic bi-temporal hyperspectral scenes with ground-truth
//! anomalous-change masks.
//!
//! Time 1 is a Voronoi mosaic of smooth endmember spectra plus noise. Time 2
//! re-images the same scene through a per-band affine distortion, a smooth
//! spatial illumination field, and fresh noise, after a handful of small
//! disk-shaped anomalies have had their spectra swapped for a different
//! endmember. The mask marks exactly the swapped pixels.

use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::maps::ChangeMask;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub n_endmembers: usize,
    pub segment_count: usize,
    /// Per-band multiplicative distortion interval for time 2.
    pub gain_range: (f64, f64),
    /// Per-band additive distortion interval, in units of the scene's mean
    /// signal level.
    pub bias_range: (f64, f64),
    /// Relative amplitude of the smooth spatial gain field.
    pub illumination_amplitude: f64,
    /// Additive noise standard deviation relative to the mean signal level.
    pub noise_sigma: f64,
    pub anomaly_count: usize,
    pub anomaly_radius: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// Desk-scale scene used throughout the test suite and as the CLI default.
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            bands: 32,
            n_endmembers: 5,
            segment_count: 8,
            gain_range: (0.8, 1.2),
            bias_range: (-0.05, 0.05),
            illumination_amplitude: 0.1,
            noise_sigma: 0.01,
            anomaly_count: 6,
            anomaly_radius: 2,
            seed: 7,
        }
    }
}

/// Offsets of the pixels of a centered disk of the given radius.
fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                out.push((dr, dc));
            }
        }
    }
    out
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("bands", self.bands),
            ("n_endmembers", self.n_endmembers),
            ("segment_count", self.segment_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    message: format!("{} must be >= 1", name),
                });
            }
        }
        if !(0.0..1.0).contains(&self.noise_sigma) {
            return Err(Error::InvalidConfig {
                message: format!("noise_sigma must be in [0, 1), got {}", self.noise_sigma),
            });
        }
        if self.gain_range.0 > self.gain_range.1 || self.bias_range.0 > self.bias_range.1 {
            return Err(Error::InvalidConfig {
                message: "empty gain/bias interval".into(),
            });
        }
        if self.anomaly_count > 0 {
            if self.n_endmembers < 2 {
                return Err(Error::InvalidConfig {
                    message: "anomaly injection needs at least 2 endmembers".into(),
                });
            }
            let diameter = 2 * self.anomaly_radius + 1;
            if diameter > self.height || diameter > self.width {
                return Err(Error::InvalidConfig {
                    message: format!(
                        "anomaly radius {} does not fit a {}x{} image",
                        self.anomaly_radius, self.height, self.width
                    ),
                });
            }
            let blob_pixels = disk_offsets(self.anomaly_radius).len();
            let total = self.height * self.width;
            if self.anomaly_count * blob_pixels * 20 > total {
                return Err(Error::InvalidConfig {
                    message: format!(
                        "anomalies cover {} of {} pixels; the positive fraction must stay <= 5%",
                        self.anomaly_count * blob_pixels,
                        total
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Gaussian bump over the band axis; centers spread across the spectrum so
/// endmembers stay spectrally separable.
fn endmember_spectra(spec: &SceneSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let bands = spec.bands as f64;
    (0..spec.n_endmembers)
        .map(|e| {
            let frac = (e as f64 + 0.5) / spec.n_endmembers as f64;
            let center = frac * (bands - 1.0) + rng.range(-0.05, 0.05) * bands;
            let sigma = (bands / (2.5 * spec.n_endmembers as f64)).max(0.75) * rng.range(0.9, 1.1);
            let amplitude = rng.range(1.5, 3.0);
            (0..spec.bands)
                .map(|b| {
                    let d = (b as f64 - center) / sigma;
                    0.5 + amplitude * (-0.5 * d * d).exp()
                })
                .collect()
        })
        .collect()
}

/// Nearest-seed (Voronoi) labeling; ties resolve to the lowest seed index.
fn voronoi_labels(spec: &SceneSpec, rng: &mut Rng) -> Vec<usize> {
    let seeds: Vec<(f64, f64)> = (0..spec.segment_count)
        .map(|_| {
            (
                rng.range(0.0, spec.height as f64),
                rng.range(0.0, spec.width as f64),
            )
        })
        .collect();
    let mut labels = vec![0usize; spec.height * spec.width];
    for r in 0..spec.height {
        for c in 0..spec.width {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &(sr, sc)) in seeds.iter().enumerate() {
                let d = (r as f64 - sr).powi(2) + (c as f64 - sc).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            labels[r * spec.width + c] = best;
        }
    }
    labels
}

const PLACEMENT_RETRIES: usize = 1000;

/// Generate (time-1 cube, time-2 cube, change mask). Deterministic given the
/// spec, including its seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<(HsiCube, HsiCube, ChangeMask)> {
    spec.validate()?;
    let (h, w, nb) = (spec.height, spec.width, spec.bands);
    let px = h * w;
    let mut rng = Rng::new(spec.seed);

    let spectra = endmember_spectra(spec, &mut rng);
    let labels = voronoi_labels(spec, &mut rng);
    // Each segment takes one endmember, round-robin so all spectra appear.
    let segment_endmember: Vec<usize> = (0..spec.segment_count)
        .map(|s| s % spec.n_endmembers)
        .collect();
    let pixel_endmember: Vec<usize> = labels.iter().map(|&s| segment_endmember[s]).collect();

    // Clean time-1 signal, band-major.
    let mut signal1 = vec![0.0; px * nb];
    for p in 0..px {
        let spectrum = &spectra[pixel_endmember[p]];
        for b in 0..nb {
            signal1[b * px + p] = spectrum[b];
        }
    }
    let signal_mean = signal1.iter().sum::<f64>() / signal1.len() as f64;

    // Anomaly blobs: replace the clean spectrum of disk-shaped regions in the
    // time-2 signal with an endmember that does not occur in the footprint.
    let mut signal2 = signal1.clone();
    let mut mask = vec![false; px];
    let offsets = disk_offsets(spec.anomaly_radius);
    for _ in 0..spec.anomaly_count {
        let mut placed = false;
        for _attempt in 0..PLACEMENT_RETRIES {
            let r0 = spec.anomaly_radius + rng.below(h - 2 * spec.anomaly_radius);
            let c0 = spec.anomaly_radius + rng.below(w - 2 * spec.anomaly_radius);
            let footprint: Vec<usize> = offsets
                .iter()
                .map(|&(dr, dc)| ((r0 as isize + dr) as usize) * w + (c0 as isize + dc) as usize)
                .collect();
            if footprint.iter().any(|&p| mask[p]) {
                continue;
            }
            let used: Vec<usize> = footprint.iter().map(|&p| pixel_endmember[p]).collect();
            let candidates: Vec<usize> = (0..spec.n_endmembers)
                .filter(|e| !used.contains(e))
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let replacement = candidates[rng.below(candidates.len())];
            for &p in &footprint {
                mask[p] = true;
                for b in 0..nb {
                    signal2[b * px + p] = spectra[replacement][b];
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                attempts: PLACEMENT_RETRIES,
            });
        }
    }

    // Per-band affine distortion for time 2.
    let gains: Vec<f64> = (0..nb)
        .map(|_| rng.range(spec.gain_range.0, spec.gain_range.1))
        .collect();
    let biases: Vec<f64> = (0..nb)
        .map(|_| rng.range(spec.bias_range.0, spec.bias_range.1) * signal_mean)
        .collect();

    // Smooth spatial illumination gain in [1 - a, 1 + a].
    let phase_r = rng.range(0.0, std::f64::consts::TAU);
    let phase_c = rng.range(0.0, std::f64::consts::TAU);
    let freq_r = rng.range(1.0, 2.5);
    let freq_c = rng.range(1.0, 2.5);
    let illumination = |r: usize, c: usize| -> f64 {
        let fr = (std::f64::consts::TAU * freq_r * r as f64 / h as f64 + phase_r).sin();
        let fc = (std::f64::consts::TAU * freq_c * c as f64 / w as f64 + phase_c).sin();
        1.0 + spec.illumination_amplitude * 0.5 * (fr + fc)
    };

    let noise_scale = spec.noise_sigma * signal_mean;
    let mut time1 = vec![0.0; px * nb];
    for v in 0..px * nb {
        time1[v] = signal1[v] + noise_scale * rng.normal();
    }
    let mut time2 = vec![0.0; px * nb];
    for b in 0..nb {
        for p in 0..px {
            let (r, c) = (p / w, p % w);
            let distorted = (gains[b] * signal2[b * px + p] + biases[b]) * illumination(r, c);
            time2[b * px + p] = distorted + noise_scale * rng.normal();
        }
    }

    Ok((
        HsiCube::new(h, w, nb, time1)?,
        HsiCube::new(h, w, nb, time2)?,
        ChangeMask::new(h, w, mask)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn identity_distortion_reproduces_time1() {
        let spec = SceneSpec {
            gain_range: (1.0, 1.0),
            bias_range: (0.0, 0.0),
            illumination_amplitude: 0.0,
            noise_sigma: 0.0,
            anomaly_count: 0,
            ..SceneSpec::default()
        };
        let (t1, t2, mask) = generate_scene(&spec).unwrap();
        assert_eq!(t1.values(), t2.values());
        assert_eq!(mask.positives(), 0);
    }

    #[test]
    fn single_blob_matches_disk_rasterization() {
        let spec = SceneSpec {
            anomaly_count: 1,
            anomaly_radius: 2,
            ..SceneSpec::default()
        };
        let (_, _, mask) = generate_scene(&spec).unwrap();
        // Oracle: enumerate a radius-2 disk directly.
        let disk: usize = (-2i32..=2)
            .flat_map(|dr| (-2i32..=2).map(move |dc| (dr, dc)))
            .filter(|(dr, dc)| dr * dr + dc * dc <= 4)
            .count();
        assert_eq!(disk, 13);
        assert_eq!(mask.positives(), disk);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec::default();
        let (a1, a2, am) = generate_scene(&spec).unwrap();
        let (b1, b2, bm) = generate_scene(&spec).unwrap();
        assert_eq!(a1.values(), b1.values());
        assert_eq!(a2.values(), b2.values());
        assert_eq!(am, bm);
    }

    #[test]
    fn different_seed_changes_scene() {
        let a = generate_scene(&SceneSpec::default()).unwrap();
        let b = generate_scene(&SceneSpec {
            seed: 8,
            ..SceneSpec::default()
        })
        .unwrap();
        assert_ne!(a.0.values(), b.0.values());
    }

    #[test]
    fn positive_fraction_is_rare() {
        let (_, _, mask) = generate_scene(&SceneSpec::default()).unwrap();
        let frac = mask.positives() as f64 / (64.0 * 64.0);
        assert!(frac > 0.0 && frac <= 0.05, "positive fraction {}", frac);
    }

    #[test]
    fn mask_honesty_under_zero_noise() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            ..SceneSpec::default()
        };
        let (t1, t2, mask) = generate_scene(&spec).unwrap();
        let mut masked = Vec::new();
        let mut unmasked = Vec::new();
        for r in 0..t1.height() {
            for c in 0..t1.width() {
                let angle = spectral_angle(&t1.spectrum(r, c), &t2.spectrum(r, c));
                if mask.get(r, c) {
                    masked.push(angle);
                } else {
                    unmasked.push(angle);
                }
            }
        }
        unmasked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = unmasked[(unmasked.len() as f64 * 0.99) as usize];
        let min_masked = masked.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            min_masked > p99,
            "masked min angle {} should exceed unmasked 99th percentile {}",
            min_masked,
            p99
        );
    }

    #[test]
    fn impossible_placement_errors() {
        // 6 blobs of radius 2 cannot fit a 5-by-64 strip without overlap
        // given containment margins; the 5% budget check rejects first.
        let spec = SceneSpec {
            height: 8,
            width: 8,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_scene(&spec),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn anomaly_with_single_endmember_is_rejected() {
        let spec = SceneSpec {
            n_endmembers: 1,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_scene(&spec),
            Err(Error::InvalidConfig { .. })
        ));
    }
}
