//! Sequence datasets on disk, the synthetic blob generator, input occlusion
//! and geometric augmentation.

mod augment;
mod occlusion;
mod synth;

pub use augment::{augment_pair, dihedral};
pub use occlusion::{apply_occlusion, occlusion_rate, OcclusionSchedule};
pub use synth::{generate_synthetic, SynthSpec};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use usfnet_autograd::Tensor;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Sunny,
    CloudyRainy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub weather: Weather,
    /// Paths relative to the dataset root, in time order.
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frame_interval_s: f64,
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::Data(format!("manifest not found at {}", path.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub frame_paths: Vec<PathBuf>,
    pub weather: Weather,
    pub split: Split,
    pub frame_interval_s: f64,
    /// `(height, width)` shared by every frame.
    pub resolution: (usize, usize),
}

/// Records of one split, sorted by id, after checking that every frame exists
/// and that frame counts and resolutions agree across the whole manifest.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<SequenceRecord>> {
    let manifest = Manifest::read(root)?;
    if !(manifest.frame_interval_s > 0.0) {
        return Err(Error::Data(format!("frame interval must be positive, got {}", manifest.frame_interval_s)));
    }
    let mut expected: Option<(usize, (usize, usize))> = None;
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for e in &manifest.sequences {
        if !seen.insert(e.id.clone()) {
            return Err(Error::Data(format!("duplicate sequence id `{}`", e.id)));
        }
        if e.frames.is_empty() {
            return Err(Error::Data(format!("sequence `{}` has no frames", e.id)));
        }
        let mut paths = Vec::with_capacity(e.frames.len());
        let mut res = None;
        for f in &e.frames {
            let p = root.join(f);
            if !p.is_file() {
                return Err(Error::Data(format!("sequence `{}`: missing frame {}", e.id, p.display())));
            }
            let (w, h) = image::image_dimensions(&p)
                .map_err(|err| Error::Data(format!("sequence `{}`: {}: {err}", e.id, p.display())))?;
            let r = (h as usize, w as usize);
            if *res.get_or_insert(r) != r {
                return Err(Error::Data(format!("sequence `{}`: resolution mismatch at {}", e.id, p.display())));
            }
            paths.push(p);
        }
        let shape = (paths.len(), res.unwrap_or_default());
        match expected {
            None => expected = Some(shape),
            Some(s) if s.0 != shape.0 => {
                return Err(Error::Data(format!("sequence `{}` has {} frames, expected {}", e.id, shape.0, s.0)));
            }
            Some(s) if s.1 != shape.1 => {
                return Err(Error::Data(format!(
                    "sequence `{}` has resolution {:?}, expected {:?}",
                    e.id, shape.1, s.1
                )));
            }
            _ => {}
        }
        if e.split == split {
            out.push(SequenceRecord {
                id: e.id.clone(),
                frame_paths: paths,
                weather: e.weather,
                split: e.split,
                frame_interval_s: manifest.frame_interval_s,
                resolution: shape.1,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Reads one 8-bit PNG as a `(1, H, W)` tensor scaled to `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Tensor::new(&[1, h as usize, w as usize], data)?)
}

/// Writes a `(H, W)` or `(1, H, W)` tensor as an 8-bit grayscale PNG.
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let s = frame.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if frame.numel() != h * w {
        return Err(Error::Data(format!("expected a single-channel frame, got {s:?}")));
    }
    let buf: Vec<u8> = frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Data("frame buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// All frames of a record, `(F, 1, H, W)`.
pub fn load_frames(rec: &SequenceRecord) -> Result<Tensor> {
    let frames = rec.frame_paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = frames.iter().collect();
    let (h, w) = rec.resolution;
    Ok(Tensor::concat(&refs, 0)?.into_reshape(&[frames.len(), 1, h, w])?)
}

/// A batch of sequences `(B, T, C, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    data: Tensor,
    pub frame_interval_s: f64,
}

impl ImageSequence {
    pub fn new(data: Tensor, frame_interval_s: f64) -> Result<Self> {
        let s = data.shape();
        if s.len() != 5 || s[1] == 0 {
            return Err(Error::Data(format!("image sequence must be (B,T,C,H,W) with T >= 1, got {s:?}")));
        }
        if !s[3].is_multiple_of(16) || !s[4].is_multiple_of(16) {
            return Err(Error::Data(format!("frame size {}x{} is not divisible by 16", s[3], s[4])));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must be finite and within [0, 1]".into()));
        }
        Ok(ImageSequence { data, frame_interval_s })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim(1)
    }
}

/// Sequences held in memory, each `(F, C, H, W)`, with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    pub ids: Vec<String>,
    pub frames: Vec<Tensor>,
    pub frame_interval_s: f64,
}

impl SequenceSet {
    pub fn load(records: &[SequenceRecord]) -> Result<Self> {
        let frames = records.iter().map(load_frames).collect::<Result<Vec<_>>>()?;
        let frame_interval_s = records.first().map_or(30.0, |r| r.frame_interval_s);
        Ok(SequenceSet { ids: records.iter().map(|r| r.id.clone()).collect(), frames, frame_interval_s })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Moves the last `floor(len * fraction)` sequences into a held-out set.
    pub fn split_tail(self, fraction: f64) -> (SequenceSet, SequenceSet) {
        let n_val = ((self.len() as f64) * fraction).floor() as usize;
        let cut = self.len() - n_val;
        let (mut ids, mut frames) = (self.ids, self.frames);
        let val = SequenceSet { ids: ids.split_off(cut), frames: frames.split_off(cut), frame_interval_s: self.frame_interval_s };
        (SequenceSet { ids, frames, frame_interval_s: self.frame_interval_s }, val)
    }

    /// Stacks the selected sequences into `(inputs, targets)`, each `(B, T, C, H, W)`.
    pub fn batch(&self, indices: &[usize], in_frames: usize, out_frames: usize) -> Result<(Tensor, Tensor)> {
        let mut xs = Vec::with_capacity(indices.len());
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            let f = self.frames.get(i).ok_or_else(|| Error::Data(format!("sequence index {i} out of range")))?;
            if f.dim(0) < in_frames + out_frames {
                return Err(Error::Data(format!(
                    "sequence `{}` has {} frames, need {}",
                    self.ids[i],
                    f.dim(0),
                    in_frames + out_frames
                )));
            }
            xs.push(f.narrow(0, 0, in_frames)?);
            ys.push(f.narrow(0, in_frames, out_frames)?);
        }
        let stack = |parts: Vec<Tensor>| -> Result<Tensor> {
            let s = parts[0].shape().to_vec();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let mut shape = vec![parts.len()];
            shape.extend(s);
            Ok(Tensor::concat(&refs, 0)?.into_reshape(&shape)?)
        };
        if xs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        Ok((stack(xs)?, stack(ys)?))
    }
}
