//! Binary checkpoint format.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "CKPT" | version | config length | config text (UTF-8 key=value lines)
//! | record count | records...
//! record: name length | name (UTF-8) | rank | extents[rank] | f64 LE payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Flat `key=value` text describing the model configuration.
    pub config: String,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        put_u32(&mut w, len_u32(self.config.len())?)?;
        w.write_all(self.config.as_bytes())?;
        put_u32(&mut w, len_u32(self.records.len())?)?;
        for (name, t) in &self.records {
            put_u32(&mut w, len_u32(name.len())?)?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, len_u32(t.rank())?)?;
            for &e in t.shape() {
                put_u32(&mut w, len_u32(e)?)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let config = get_string(&mut r)?;
        let count = get_u32(&mut r)?;
        let mut records = Vec::new();
        for _ in 0..count {
            let name = get_string(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::format("checkpoint", format!("rank {rank} of {name}")));
            }
            let shape = (0..rank)
                .map(|_| get_u32(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
            records.push((name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::create_write(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(crate::io::open_read(path)?)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("checkpoint", "truncated file")
    } else {
        Error::Io(e)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid("length exceeds u32"))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::format("checkpoint", "string length out of range"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
}
