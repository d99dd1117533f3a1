use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use usfnet_autograd::Tensor;

use super::{write_frame, Manifest, ManifestEntry, Split, Weather};
use crate::error::{Error, Result};

/// Parameters of the advected Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub resolution: usize,
    pub n_blobs: usize,
    /// Blob radius range in pixels.
    pub scale_range: (f64, f64),
    /// Speed range in pixels per frame.
    pub velocity_range: (f64, f64),
    /// Relative amplitude change per frame.
    pub brightness_drift: f64,
    pub frames: usize,
    /// Fraction of sequences (the last ones) assigned to the test split.
    pub test_fraction: f64,
    pub frame_interval_s: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            resolution: 64,
            n_blobs: 6,
            scale_range: (3.0, 12.0),
            velocity_range: (0.5, 2.0),
            brightness_drift: 0.0,
            frames: 20,
            test_fraction: 0.25,
            frame_interval_s: 30.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.resolution == 0 || !self.resolution.is_multiple_of(16) {
            return bad(format!("resolution {} must be a positive multiple of 16", self.resolution));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 < s1) {
            return bad(format!("scale range ({s0}, {s1}) must satisfy 0 < min < max"));
        }
        let (v0, v1) = self.velocity_range;
        if !(v0 >= 0.0 && v0 <= v1) || !v1.is_finite() {
            return bad(format!("velocity range ({v0}, {v1}) must satisfy 0 <= min <= max"));
        }
        if self.frames == 0 {
            return bad("frame count must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad(format!("test fraction {} outside [0, 1]", self.test_fraction));
        }
        if !self.brightness_drift.is_finite() || !(self.frame_interval_s > 0.0) {
            return bad("brightness drift and frame interval must be finite, interval positive".into());
        }
        Ok(())
    }
}

struct Blob {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    amplitude: f64,
}

/// Squared distance on the periodic `n x n` torus.
fn wrapped_sq(dx: f64, dy: f64, n: f64) -> f64 {
    let w = |d: f64| {
        let d = d.rem_euclid(n);
        d.min(n - d)
    };
    w(dx).powi(2) + w(dy).powi(2)
}

fn render(blobs: &[Blob], t: usize, n: usize, drift: f64) -> Tensor {
    let nf = n as f64;
    let tf = t as f64;
    Tensor::from_fn(&[n, n], |i| {
        let (py, px) = ((i / n) as f64, (i % n) as f64);
        let mut v = 0.0;
        for b in blobs {
            let d2 = wrapped_sq(px - (b.x + b.vx * tf), py - (b.y + b.vy * tf), nf);
            v += b.amplitude * (1.0 + drift * tf) * (-d2 / (2.0 * b.radius * b.radius)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Writes `n_sequences` sequences plus `manifest.json` under `root`.
///
/// Every sequence draws its blobs from its own ChaCha stream seeded by
/// `(seed, index)`, so the output does not depend on anything but the spec.
pub fn generate_synthetic(spec: &SynthSpec, n_sequences: usize, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let n_test = ((n_sequences as f64) * spec.test_fraction).round() as usize;
    let mut sequences = Vec::with_capacity(n_sequences);
    for s in 0..n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64);
        let res = spec.resolution as f64;
        let blobs: Vec<Blob> = (0..spec.n_blobs)
            .map(|_| {
                let speed = rng.gen_range(spec.velocity_range.0..=spec.velocity_range.1);
                let angle = rng.gen_range(0.0..2.0 * PI);
                Blob {
                    x: rng.gen_range(0.0..res),
                    y: rng.gen_range(0.0..res),
                    vx: speed * angle.cos(),
                    vy: speed * angle.sin(),
                    radius: rng.gen_range(spec.scale_range.0..spec.scale_range.1),
                    amplitude: rng.gen_range(0.4..0.9),
                }
            })
            .collect();
        let id = format!("seq_{s:05}");
        let dir = root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut frames = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            let rel = format!("{id}/frame_{t:03}.png");
            write_frame(&root.join(&rel), &render(&blobs, t, spec.resolution, spec.brightness_drift))?;
            frames.push(rel);
        }
        let weather = if blobs.len() > 3 { Weather::CloudyRainy } else { Weather::Sunny };
        let split = if s >= n_sequences - n_test { Split::Test } else { Split::Train };
        sequences.push(ManifestEntry { id, split, weather, frames });
    }
    let manifest = Manifest { frame_interval_s: spec.frame_interval_s, sequences };
    manifest.write(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, load_frames};

    fn small() -> SynthSpec {
        SynthSpec { resolution: 32, frames: 4, ..Default::default() }
    }

    #[test]
    fn zero_velocity_gives_static_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { velocity_range: (0.0, 0.0), ..small() };
        generate_synthetic(&spec, 3, dir.path()).unwrap();
        for split in [Split::Train, Split::Test] {
            for rec in load_dataset(dir.path(), split).unwrap() {
                let f = load_frames(&rec).unwrap();
                let first = f.narrow(0, 0, 1).unwrap();
                for t in 1..4 {
                    assert_eq!(f.narrow(0, t, 1).unwrap(), first);
                }
            }
        }
    }

    #[test]
    fn all_test_split() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&SynthSpec { test_fraction: 1.0, ..small() }, 8, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path(), Split::Test).unwrap().len(), 8);
        assert!(load_dataset(dir.path(), Split::Train).unwrap().is_empty());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SynthSpec { resolution: 60, ..small() }.validate().is_err());
        assert!(SynthSpec { scale_range: (4.0, 4.0), ..small() }.validate().is_err());
        assert!(SynthSpec { velocity_range: (2.0, 1.0), ..small() }.validate().is_err());
    }

    #[test]
    fn torus_distance() {
        assert_eq!(wrapped_sq(63.0, 0.0, 64.0), 1.0);
        assert_eq!(wrapped_sq(-2.0, 3.0, 64.0), 13.0);
    }
}
