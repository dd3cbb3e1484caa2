//! Synthetic video data: the MovingShapes corpus, clip files and batching.

mod augment;
mod clipfile;
mod moving_shapes;

pub use augment::{augment, AugmentConfig, CropPosition};
pub use clipfile::{load_clip, save_clip};
pub use moving_shapes::{generate_moving_shapes, MOTION_CLASS_NAMES};

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// One video clip: (T, H, W, C) floats in [0, 1] plus its action label.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: usize,
    pub id: u64,
}

impl VideoClip {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Split> {
        match tag {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Data(format!("unknown split tag {other:?}"))),
        }
    }

    pub fn index(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// A split of generated clips. Splits generated from the same seed are
/// disjoint by clip id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<VideoClip>,
    pub split: Split,
    pub seed: u64,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }
}

/// Stack clips (by index) into a (B, T, H, W, C) batch plus labels.
pub fn make_batch(clips: &[VideoClip], idxs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if idxs.is_empty() {
        return Err(CoreError::Data("empty batch".to_string()));
    }
    let shape = clips[idxs[0]].frames.shape().to_vec();
    let per = clips[idxs[0]].frames.len();
    let mut data = Vec::with_capacity(per * idxs.len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let c = &clips[i];
        if c.frames.shape() != shape {
            return Err(CoreError::shape(
                "make_batch",
                format!("{:?} vs {:?}", c.frames.shape(), shape),
            ));
        }
        data.extend_from_slice(c.frames.data());
        labels.push(c.label);
    }
    let mut full = vec![idxs.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::from_vec(&full, data)?, labels))
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// Line-oriented text index: `id <TAB> path <TAB> label <TAB> split`.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            e.path,
            e.label,
            e.split.tag()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        fn parse<'a>(v: Option<&'a str>, what: &str, ln: usize) -> Result<&'a str> {
            v.ok_or_else(|| CoreError::Data(format!("manifest line {}: missing {what}", ln + 1)))
        }
        let id = parse(parts.next(), "id", ln)?
            .parse::<u64>()
            .map_err(|e| CoreError::Data(format!("manifest line {}: {e}", ln + 1)))?;
        let clip_path = parse(parts.next(), "path", ln)?.to_string();
        let label = parse(parts.next(), "label", ln)?
            .parse::<usize>()
            .map_err(|e| CoreError::Data(format!("manifest line {}: {e}", ln + 1)))?;
        let split = Split::from_tag(parse(parts.next(), "split", ln)?)?;
        entries.push(ManifestEntry {
            id,
            path: clip_path,
            label,
            split,
        });
    }
    Ok(entries)
}
