//! `.nsm` model container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4   "NSM1"
//! version      u16 = 1
//! task         u8  0 = classification, 1 = denoising
//! reserved     u8  0
//! input shape  3 x u32 (channels, height, width)
//! layer count  u32
//! layers       tag u8, then per tag:
//!                1 conv        5 x u32 (filters, channels, kernel, stride, pad)
//!                2 dense       2 x u32 (in, out)   -- head adapters use this tag too
//!                3 max-pool    -
//!                4 flatten     -
//!                5 activation  u8 (0 = relu, 1 = identity)
//! param count  u64
//! params       f32 x count, canonical order, raw IEEE-754 bits
//! checksum     u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::crc::crc32;
use crate::error::{FormatError, Result};
use crate::model::{Activation, ConvSpec, LayerSpec, ModelGraph, Task};

pub const MAGIC: [u8; 4] = *b"NSM1";
pub const VERSION: u16 = 1;

const TAG_CONV: u8 = 1;
const TAG_DENSE: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_ACTIVATION: u8 = 5;

pub fn serialize(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(task_tag(model.task()));
    out.push(0);
    for d in model.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.layers().len());
    for layer in model.layers() {
        match layer.wire_form() {
            LayerSpec::Conv(c) => {
                out.push(TAG_CONV);
                for v in [c.filters, c.channels, c.kernel, c.stride, c.pad] {
                    put_u32(&mut out, v);
                }
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                out.push(TAG_DENSE);
                put_u32(&mut out, in_dim);
                put_u32(&mut out, out_dim);
            }
            LayerSpec::MaxPool => out.push(TAG_POOL),
            LayerSpec::Flatten => out.push(TAG_FLATTEN),
            LayerSpec::Activation(a) => {
                out.push(TAG_ACTIVATION);
                out.push(match a {
                    Activation::Relu => 0,
                    Activation::Identity => 1,
                });
            }
            LayerSpec::HeadAdapter { .. } => unreachable!("wire_form maps adapters to dense"),
        }
    }
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_bits().to_le_bytes());
    }
    let sum = crc32(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn deserialize(bytes: &[u8]) -> std::result::Result<ModelGraph, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let task = match r.u8()? {
        0 => Task::Classification,
        1 => Task::Denoising,
        t => return Err(FormatError::Malformed(format!("unknown task tag {t}"))),
    };
    let _reserved = r.u8()?;
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let layer = match r.u8()? {
            TAG_CONV => LayerSpec::Conv(ConvSpec {
                filters: r.u32()?,
                channels: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                pad: r.u32()?,
            }),
            TAG_DENSE => LayerSpec::Dense { in_dim: r.u32()?, out_dim: r.u32()? },
            TAG_POOL => LayerSpec::MaxPool,
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_ACTIVATION => LayerSpec::Activation(match r.u8()? {
                0 => Activation::Relu,
                1 => Activation::Identity,
                a => return Err(FormatError::Malformed(format!("unknown activation {a}"))),
            }),
            t => return Err(FormatError::Malformed(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let n_params = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let remaining = (bytes.len() - r.pos) as u64;
    let needed = n_params.checked_mul(4).and_then(|n| n.checked_add(4));
    match needed {
        Some(n) if n == remaining => {}
        Some(n) if n > remaining => return Err(FormatError::Truncated),
        None => return Err(FormatError::Truncated),
        Some(_) => return Err(FormatError::Malformed("trailing bytes after checksum".into())),
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let params: Vec<f32> = bytes[r.pos..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    ModelGraph::new(input_shape, task, layers, params)
        .map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn save(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serialize(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let bytes = std::fs::read(path)?;
    Ok(deserialize(&bytes)?)
}

fn task_tag(task: Task) -> u8 {
    match task {
        Task::Classification => 0,
        Task::Denoising => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn sample() -> ModelGraph {
        let layers = vec![
            LayerSpec::Conv(ConvSpec::new(3, 1, 3)),
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::HeadAdapter { in_dim: 3 * 4 * 4, out_dim: 2 },
        ];
        ModelGraph::with_random_params([1, 8, 8], Task::Classification, layers, 11).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = sample();
        let bytes = serialize(&m);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(serialize(&back), bytes);
        // The adapter role does not survive the wire.
        assert_eq!(back.layers()[4], LayerSpec::Dense { in_dim: 48, out_dim: 2 });
    }

    #[test]
    fn negative_zero_and_nan_payloads_survive() {
        let mut m = sample();
        let specials = [0x8000_0000u32, 0x7FC0_1234, 0xFF80_0001, 0x7F7F_FFFF, 0x0000_0001, 0x7F80_0000];
        for (i, bits) in specials.iter().enumerate() {
            m.params_mut()[i] = f32::from_bits(*bits);
        }
        let back = deserialize(&serialize(&m)).unwrap();
        for (i, bits) in specials.iter().enumerate() {
            assert_eq!(back.params()[i].to_bits(), *bits);
        }
    }

    #[test]
    fn corrupted_payload_byte_fails_checksum() {
        let mut bytes = serialize(&sample());
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(deserialize(&bytes), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn distinct_errors() {
        let bytes = serialize(&sample());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(deserialize(&bad_magic), Err(FormatError::BadMagic { .. })));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert_eq!(deserialize(&bad_version), Err(FormatError::UnsupportedVersion(9)));
        assert_eq!(deserialize(&bytes[..bytes.len() - 5]), Err(FormatError::Truncated));
        assert_eq!(deserialize(&bytes[..3]), Err(FormatError::Truncated));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(deserialize(&trailing), Err(FormatError::Malformed(_))));
    }
}
