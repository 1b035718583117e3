//! Checkpoint files: a format tag, the model configuration, then every
//! named parameter as a `CTT1` tensor.
//!
//! ```text
//! "CRW1" | base_width u32 | cpb u8 | seed u64 | count u32
//! count x ( name_len u16 | name utf-8 | kind u8 | CTT1 tensor )
//! ```

use std::path::Path;

use super::{ModelConfig, ModelParams, Param, ParamKind};
use crate::data_io::format::{decode_tensor_at, encode_tensor, DType};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CRW1";

pub fn encode_weights(params: &ModelParams) -> Result<Vec<u8>> {
    let cfg = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&(cfg.base_width as u32).to_le_bytes());
    out.push(u8::from(cfg.cpb_enabled));
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Parameter(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.kind.code());
        out.extend_from_slice(&encode_tensor(&p.tensor, DType::F32)?);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format {
            offset: self.bytes.len().min(self.pos),
            reason: format!("truncated {what}"),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not a weight file (expected \"CRW1\")".into(),
        });
    }
    let config = ModelConfig {
        base_width: r.u32("base_width")? as usize,
        cpb_enabled: r.u8("cpb flag")? != 0,
        seed: r.u64("seed")?,
    };
    let count = r.u32("parameter count")?;
    let mut params = ModelParams::empty(config);
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_at,
                reason: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let kind_at = r.pos;
        let code = r.u8("parameter kind")?;
        let kind = ParamKind::from_code(code).ok_or_else(|| Error::Format {
            offset: kind_at,
            reason: format!("unknown parameter kind {code}"),
        })?;
        let (tensor, used) = decode_tensor_at(bytes, r.pos)?;
        r.pos += used;
        params.insert_named(name, Param { kind, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            reason: "trailing bytes after last parameter".into(),
        });
    }
    Ok(params)
}

pub fn save_weights(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
