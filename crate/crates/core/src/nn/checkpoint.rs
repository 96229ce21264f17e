//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "LDMC" | version: u32 | count: u32 | count x tensor
//! optimizer section: count: u32 | (if count > 0) step: u64, lr, beta1, beta2, eps: f32 | count x tensor
//! tensor: name_len: u16 | name bytes | rank: u8 | dims: u32 x rank | f32 x prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamConfig, NnError, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub config: AdamConfig,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn io_err(e: std::io::Error) -> NnError {
    NnError::Checkpoint(e.to_string())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<(), NnError> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| NnError::Checkpoint(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| NnError::Checkpoint(format!("rank too large for {name}")))?;
    w.write_all(&name_len.to_le_bytes()).map_err(io_err)?;
    w.write_all(name.as_bytes()).map_err(io_err)?;
    w.write_all(&[rank]).map_err(io_err)?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| NnError::Checkpoint(format!("dimension too large in {name}")))?;
        w.write_all(&d.to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], NnError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor), NnError> {
    let name_len = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(io_err)?;
    let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = read_exact::<1>(r)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes).map_err(io_err)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>) -> Self {
        Self {
            tensors,
            optimizer: None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
        for (name, t) in &self.tensors {
            write_tensor(w, name, t)?;
        }
        match &self.optimizer {
            None => w.write_all(&0u32.to_le_bytes()).map_err(io_err)?,
            Some(opt) => {
                w.write_all(&(opt.tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
                w.write_all(&opt.step.to_le_bytes()).map_err(io_err)?;
                for v in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.eps] {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
                for (name, t) in &opt.tensors {
                    write_tensor(w, name, t)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        if &read_exact::<4>(r)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic, not an LDMC checkpoint".into()));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(read_exact(r)?);
        let tensors = (0..count).map(|_| read_tensor(r)).collect::<Result<Vec<_>, _>>()?;
        let opt_count = u32::from_le_bytes(read_exact(r)?);
        let optimizer = if opt_count == 0 {
            None
        } else {
            let step = u64::from_le_bytes(read_exact(r)?);
            let mut cfg = [0f32; 4];
            for v in &mut cfg {
                *v = f32::from_le_bytes(read_exact(r)?);
            }
            let tensors = (0..opt_count).map(|_| read_tensor(r)).collect::<Result<Vec<_>, _>>()?;
            Some(OptimizerSnapshot {
                step,
                config: AdamConfig {
                    lr: cfg[0],
                    beta1: cfg[1],
                    beta2: cfg[2],
                    eps: cfg[3],
                },
                tensors,
            })
        };
        Ok(Self { tensors, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let f = std::fs::File::create(path).map_err(io_err)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let f = std::fs::File::open(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn write_read_identity(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in 0u32..1000,
            with_opt in any::<bool>(),
        ) {
            let n: usize = dims.iter().product();
            let t = Tensor::new(dims.clone(), (0..n).map(|i| (i as f32 + seed as f32) * 0.37).collect()).unwrap();
            let mut ck = Checkpoint::new(vec![("layer.w".into(), t.clone()), ("b".into(), Tensor::scalar(-1.5))]);
            if with_opt {
                ck.optimizer = Some(OptimizerSnapshot {
                    step: seed as u64,
                    config: AdamConfig::default(),
                    tensors: vec![("m/layer.w".into(), t)],
                });
            }
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::new(vec![("ab".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LDMC");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 2);
        assert_eq!(&buf[14..16], b"ab");
        assert_eq!(buf[16], 1);
        assert_eq!(u32::from_le_bytes(buf[17..21].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[21..25].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 29 + 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
