//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes  "CLSUMCKP"
//! version    u32
//! component  u8       0 = encoder, 1 = decoder
//! header     u32 length + UTF-8 JSON {"config": ModelConfig, "meta": {..}}
//! count      u32
//! count × {
//!   name     u32 length + UTF-8
//!   rank     u32
//!   dims     rank × u32
//!   values   product(dims) × f32, row-major
//! }
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CLSUMCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Decoder,
}

impl Component {
    fn tag(self) -> u8 {
        match self {
            Component::Encoder => 0,
            Component::Decoder => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Component::Encoder),
            1 => Some(Component::Decoder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub component: Component,
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::read_from(&mut BufReader::new(file)).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(self.component.tag())?;
        let header = serde_json::to_vec(&Header {
            config: self.config,
            meta: self.meta.clone(),
        })?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (_, name, t) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let e = |err: std::io::Error| err.to_string();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(e)?;
        if &magic != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = r.read_u32::<LittleEndian>().map_err(e)?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let tag = r.read_u8().map_err(e)?;
        let component =
            Component::from_tag(tag).ok_or_else(|| format!("unknown component tag {tag}"))?;
        let header_len = r.read_u32::<LittleEndian>().map_err(e)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(e)?;
        let header: Header = serde_json::from_slice(&header).map_err(|err| err.to_string())?;

        let count = r.read_u32::<LittleEndian>().map_err(e)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(e)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(e)?;
            let name = String::from_utf8(name).map_err(|err| err.to_string())?;
            let rank = r.read_u32::<LittleEndian>().map_err(e)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(e)?;
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(e)?;
            let t = Tensor::new(shape, data).map_err(|err| format!("{name}: {err}"))?;
            params.add(name, t).map_err(|err| err.to_string())?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(e)? != 0 {
            return Err("trailing bytes after the last tensor".into());
        }
        Ok(Checkpoint {
            component,
            config: header.config,
            meta: header.meta,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut params = ParamStore::new();
        params
            .add(
                "a.weight",
                Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.0]).unwrap(),
            )
            .unwrap();
        params.add("a.bias", Tensor::filled(&[3], 0.25)).unwrap();
        let ckpt = Checkpoint {
            component: Component::Decoder,
            config: ModelConfig::desk(17),
            meta: BTreeMap::from([("config_hash".to_string(), "abc".to_string())]),
            params,
        };
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.component, Component::Decoder);
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.params.digest(), ckpt.params.digest());

        // Payload layout: the very last value is the final bias entry.
        assert_eq!(&bytes[bytes.len() - 4..], &0.25f32.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT"[..]).is_err());
        let mut bytes = Vec::new();
        Checkpoint {
            component: Component::Encoder,
            config: ModelConfig::desk(8),
            meta: BTreeMap::new(),
            params: ParamStore::new(),
        }
        .write_to(&mut bytes)
        .unwrap();
        bytes.push(0);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
