//! Versioned binary checkpoint container.
//!
//! Layout (little-endian throughout):
//!   magic "AVCK" | u32 version | u8 arch kind | u32 num_classes |
//!   u32 param_count | per param: u8 ndim, ndim x u32 dims |
//!   raw f32 parameter buffers in declaration order |
//!   u8 has_optimizer | optimizer section (kind, hyperparameters, step count,
//!   moment buffers matching the parameter shapes)

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

use super::optim::{OptimKind, Optimizer};

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u32 = 1;

/// Limit on any single dimension; guards against corrupt headers allocating
/// absurd buffers.
const MAX_DIM: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Classifier = 0,
    Generator = 1,
    Discriminator = 2,
}

impl ArchKind {
    fn from_u8(v: u8, path: &str) -> Result<ArchKind> {
        match v {
            0 => Ok(ArchKind::Classifier),
            1 => Ok(ArchKind::Generator),
            2 => Ok(ArchKind::Discriminator),
            other => Err(CoreError::Format {
                path: path.to_string(),
                detail: format!("unknown architecture kind {other}"),
            }),
        }
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: ArchKind,
    pub num_classes: usize,
    pub params: Vec<Tensor>,
    pub optimizer: Option<Optimizer>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: ArchKind,
    num_classes: usize,
    params: &[&Tensor],
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind as u8])?;
    w.write_all(&(num_classes as u32).to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        w.write_all(&[p.shape().len() as u8])?;
        for &d in p.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for p in params {
        for &v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match optimizer {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            let (kind_tag, h1, h2, h3) = match opt.kind {
                OptimKind::SgdMomentum { momentum } => (0u8, momentum, 0.0, 0.0),
                OptimKind::Adam { beta1, beta2, eps } => (1u8, beta1, beta2, eps),
            };
            w.write_all(&[kind_tag])?;
            for v in [opt.lr, opt.weight_decay, h1, h2, h3] {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&opt.step_count.to_le_bytes())?;
            for m in &opt.m1 {
                for &v in m.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            if kind_tag == 1 {
                for m in &opt.m2 {
                    for &v in m.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a str,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| CoreError::Format {
            path: self.path.to_string(),
            detail: "truncated file".to_string(),
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes::<4>()?))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; n];
        for v in &mut data {
            *v = self.f32()?;
        }
        Tensor::from_vec(shape, data)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path_str = path.display().to_string();
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        path: &path_str,
    };
    let magic = r.bytes::<4>()?;
    if &magic != MAGIC {
        return Err(CoreError::Format {
            path: path_str.clone(),
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CoreError::Format {
            path: path_str.clone(),
            detail: format!("unsupported version {version}"),
        });
    }
    let kind = ArchKind::from_u8(r.u8()?, &path_str)?;
    let num_classes = r.u32()? as usize;
    let param_count = r.u32()? as usize;
    if param_count > 4096 {
        return Err(CoreError::Format {
            path: path_str.clone(),
            detail: format!("implausible parameter count {param_count}"),
        });
    }
    let mut shapes = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u32()?;
            if d == 0 || d > MAX_DIM {
                return Err(CoreError::Format {
                    path: path_str.clone(),
                    detail: format!("invalid dimension {d}"),
                });
            }
            shape.push(d as usize);
        }
        shapes.push(shape);
    }
    let mut params = Vec::with_capacity(param_count);
    for shape in &shapes {
        params.push(r.tensor(shape)?);
    }
    let optimizer = if r.u8()? == 1 {
        let kind_tag = r.u8()?;
        let lr = r.f32()?;
        let weight_decay = r.f32()?;
        let h1 = r.f32()?;
        let h2 = r.f32()?;
        let h3 = r.f32()?;
        let step_count = r.u64()?;
        let mut m1 = Vec::with_capacity(param_count);
        for shape in &shapes {
            m1.push(r.tensor(shape)?);
        }
        let (kind, m2) = match kind_tag {
            0 => (OptimKind::SgdMomentum { momentum: h1 }, Vec::new()),
            1 => {
                let mut m2 = Vec::with_capacity(param_count);
                for shape in &shapes {
                    m2.push(r.tensor(shape)?);
                }
                (
                    OptimKind::Adam {
                        beta1: h1,
                        beta2: h2,
                        eps: h3,
                    },
                    m2,
                )
            }
            other => {
                return Err(CoreError::Format {
                    path: path_str.clone(),
                    detail: format!("unknown optimizer kind {other}"),
                })
            }
        };
        Some(Optimizer {
            kind,
            lr,
            weight_decay,
            step_count,
            m1,
            m2,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        kind,
        num_classes,
        params,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::models::ClassifierF;
    use crate::rng::StreamRng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let mut rng = StreamRng::new(1, 0);
        let f = ClassifierF::new(10, 3, &mut rng);
        save_checkpoint(&path, ArchKind::Classifier, 10, &f.params(), None).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, ArchKind::Classifier);
        assert_eq!(ck.num_classes, 10);
        for (a, b) in ck.params.iter().zip(f.params()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
        assert!(ck.optimizer.is_none());
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let mut rng = StreamRng::new(2, 0);
        let mut f = ClassifierF::new(4, 3, &mut rng);
        let shapes = f.param_shapes();
        let mut opt = Optimizer::adam(2e-4, 0.5, 0.999, 0.0, &shapes);
        let grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::full(s, 0.1)).collect();
        opt.step(&mut f.params_mut(), &grads).unwrap();
        save_checkpoint(&path, ArchKind::Classifier, 4, &f.params(), Some(&opt)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let loaded = ck.optimizer.unwrap();
        assert_eq!(loaded.step_count, 1);
        assert_eq!(loaded.kind, opt.kind);
        for (a, b) in loaded.m1.iter().zip(&opt.m1) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE0000000").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let mut rng = StreamRng::new(3, 0);
        let f = ClassifierF::new(4, 3, &mut rng);
        save_checkpoint(&path, ArchKind::Classifier, 4, &f.params(), None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
