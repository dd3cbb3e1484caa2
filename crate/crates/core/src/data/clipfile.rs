//! Clip file format: magic "AVL1", u32 T/H/W/C, u16 label, raw f32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::VideoClip;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AVL1";

/// Any single dimension beyond this is treated as a corrupt header.
const MAX_DIM: u32 = 1 << 16;

pub fn save_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let (t, h, w, c) = clip.dims();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    for d in [t, h, w, c] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&(clip.label as u16).to_le_bytes())?;
    for &v in clip.frames.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let p = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CoreError::Format {
        path: p.clone(),
        detail: "truncated header".to_string(),
    })?;
    if &magic != MAGIC {
        return Err(CoreError::Format {
            path: p,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut dims = [0u32; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| CoreError::Format {
            path: p.clone(),
            detail: "truncated header".to_string(),
        })?;
        *d = u32::from_le_bytes(b);
        if *d == 0 || *d > MAX_DIM {
            return Err(CoreError::Format {
                path: p.clone(),
                detail: format!("invalid shape dimension {d:?}", d = *d),
            });
        }
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize).filter(|&v| v <= 1 << 31)
    });
    let n = n.ok_or_else(|| CoreError::Format {
        path: p.clone(),
        detail: format!("shape overflow {dims:?}"),
    })?;
    let mut lb = [0u8; 2];
    r.read_exact(&mut lb).map_err(|_| CoreError::Format {
        path: p.clone(),
        detail: "truncated header".to_string(),
    })?;
    let label = u16::from_le_bytes(lb) as usize;
    let mut data = vec![0.0f32; n];
    for v in &mut data {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| CoreError::Format {
            path: p.clone(),
            detail: "truncated payload".to_string(),
        })?;
        *v = f32::from_le_bytes(b);
    }
    let frames = Tensor::from_vec(
        &[dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize],
        data,
    )?;
    Ok(VideoClip {
        frames,
        label,
        id: 0,
    })
}
