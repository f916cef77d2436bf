//! The RVPT tensor archive.
//!
//! ```text
//! "RVPT"  u32 version=1  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 dim, f32 payload }
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RVPT";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_len(self.entries.len(), "tensor count")?.to_le_bytes())?;
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("name too long: {name}")))?;
            w.write_all(&nlen.to_le_bytes())?;
            w.write_all(nb)?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank too large for `{name}`")))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                w.write_all(&u32_len(d, "dimension")?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, "tensor count")?;
        let mut entries = Vec::new();
        for idx in 0..count {
            let mut b2 = [0u8; 2];
            read_exact(&mut r, &mut b2, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format(format!("tensor {idx}: name is not UTF-8")))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, "rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, "dimension")? as usize);
            }
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            read_exact(&mut r, &mut raw, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice()).map_err(|e| match e {
            Error::Format(msg) => Error::Data {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
