//! Side information hiding.
//!
//! The position bitmap is framed, encrypted with a keyed stream and written
//! into the low mantissa bits of one extra "side" filter whose location is
//! derived from the key.
//!
//! Keystream: block `i` is `HMAC-SHA256(key, label || 0x00 || i as u64 BE)`;
//! blocks are concatenated and read most significant bit first.
//!
//! Plaintext frame, bits most significant first:
//!
//! ```text
//! version      u8   = 1
//! flags        u8   bit 0: head adapter present, bit 1: secret task is denoising
//! adapter at   u16  index of the first adapter layer (0 if absent)
//! bitmap len   u32  number of bitmap bits that follow
//! bitmap       len bits, conv layers in order, 1 = original filter
//! crc          u32  CRC-32 of the preceding bits packed MSB-first into
//!                   bytes, last byte zero padded
//! ```
//!
//! The frame is zero padded to the side filter's full capacity and the whole
//! region is XORed with the `side-payload` keystream before embedding, so
//! unused capacity looks like the rest of the payload.

use std::fmt;
use std::path::Path;

use hmac::{Hmac, KeyInit, Mac};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::Sha256;

use crate::crc::crc32;
use crate::error::{invalid, Error, Result};
use crate::model::{ModelGraph, Task};
use crate::surgery::insert_filters;

pub const FRAME_VERSION: u8 = 1;
pub const HEADER_BITS: usize = 64;
pub const CRC_BITS: usize = 32;
pub const DEFAULT_LSB_BITS: u32 = 8;

const LABEL_POSITION: &[u8] = b"side-pos";
const LABEL_PAYLOAD: &[u8] = b"side-payload";

#[derive(Clone, PartialEq, Eq)]
pub struct StegoKey([u8; 32]);

impl fmt::Debug for StegoKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("StegoKey(..)")
    }
}

impl StegoKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.random())
    }

    /// Parses exactly 64 hex digits, ignoring surrounding whitespace.
    pub fn from_hex(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.len() != 64 || !text.is_ascii() {
            return Err(invalid("a key is exactly 64 hex digits"));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&text[2 * i..2 * i + 2], 16)
                .map_err(|_| invalid("key contains a non-hex character"))?;
        }
        Ok(Self(out))
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_hex(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_hex() + "\n")?)
    }
}

fn keystream_bytes(key: &StegoKey, label: &[u8], n_bytes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n_bytes + 32);
    let mut counter = 0u64;
    while out.len() < n_bytes {
        let mut mac = <Hmac<Sha256>>::new_from_slice(&key.0).expect("any key length");
        mac.update(label);
        mac.update(&[0]);
        mac.update(&counter.to_be_bytes());
        out.extend_from_slice(&mac.finalize().into_bytes());
        counter += 1;
    }
    out.truncate(n_bytes);
    out
}

/// `n_bits` keyed pseudorandom bits for `label`.
pub fn derive_keystream(key: &StegoKey, n_bits: usize, label: &[u8]) -> Vec<bool> {
    let bytes = keystream_bytes(key, label, n_bits.div_ceil(8));
    (0..n_bits).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect()
}

pub fn xor_bits(data: &[bool], stream: &[bool]) -> Vec<bool> {
    data.iter().zip(stream).map(|(a, b)| a ^ b).collect()
}

/// First 64 keystream bits of the position label, big-endian.
pub fn position_prf(key: &StegoKey) -> u64 {
    let b = keystream_bytes(key, LABEL_POSITION, 8);
    u64::from_be_bytes(b.try_into().unwrap())
}

pub fn side_index(prf: u64, insertable_filters: usize) -> usize {
    (prf % insertable_filters as u64) as usize
}

/// Filters across all insertable conv layers.
pub fn insertable_filter_count(model: &ModelGraph) -> usize {
    model.insertable_layers().iter().map(|&l| model.conv_spec(l).unwrap().filters).sum()
}

/// What the receiver needs besides the model itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideInfo {
    pub bitmap: Vec<bool>,
    pub adapter_start: Option<usize>,
    pub secret_task: Task,
}

impl SideInfo {
    pub fn frame_bits(&self) -> usize {
        HEADER_BITS + self.bitmap.len() + CRC_BITS
    }
}

fn push_bits(out: &mut Vec<bool>, value: u64, width: usize) {
    out.extend((0..width).rev().map(|i| value >> i & 1 == 1));
}

fn read_bits(bits: &[bool]) -> u64 {
    bits.iter().fold(0, |acc, &b| acc << 1 | b as u64)
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8).map(|c| c.iter().enumerate().fold(0u8, |a, (i, &b)| a | (b as u8) << (7 - i))).collect()
}

pub fn encode_payload(info: &SideInfo) -> Result<Vec<bool>> {
    let adapter = match info.adapter_start {
        Some(a) => u16::try_from(a).map_err(|_| invalid("adapter layer index exceeds 16 bits"))?,
        None => 0,
    };
    let len = u32::try_from(info.bitmap.len()).map_err(|_| invalid("bitmap exceeds 32-bit length"))?;
    let flags = info.adapter_start.is_some() as u64 | ((info.secret_task == Task::Denoising) as u64) << 1;
    let mut bits = Vec::with_capacity(info.frame_bits());
    push_bits(&mut bits, FRAME_VERSION as u64, 8);
    push_bits(&mut bits, flags, 8);
    push_bits(&mut bits, adapter as u64, 16);
    push_bits(&mut bits, len as u64, 32);
    bits.extend_from_slice(&info.bitmap);
    let crc = crc32(&pack_bits(&bits));
    push_bits(&mut bits, crc as u64, 32);
    Ok(bits)
}

/// Decodes a frame from the start of `bits`; trailing bits are ignored.
/// Anything that does not check out is reported as [`Error::Integrity`].
pub fn decode_payload(bits: &[bool]) -> Result<SideInfo> {
    if bits.len() < HEADER_BITS + CRC_BITS {
        return Err(Error::Integrity);
    }
    let len = read_bits(&bits[32..64]) as usize;
    let end = HEADER_BITS + len;
    if end + CRC_BITS > bits.len() {
        return Err(Error::Integrity);
    }
    if read_bits(&bits[end..end + CRC_BITS]) as u32 != crc32(&pack_bits(&bits[..end])) {
        return Err(Error::Integrity);
    }
    let version = read_bits(&bits[..8]) as u8;
    if version != FRAME_VERSION {
        return Err(Error::CorruptStego(format!("unsupported payload version {version}")));
    }
    let flags = read_bits(&bits[8..16]);
    if flags & !0b11 != 0 {
        return Err(Error::CorruptStego(format!("unknown payload flags {flags:#04x}")));
    }
    Ok(SideInfo {
        bitmap: bits[HEADER_BITS..end].to_vec(),
        adapter_start: (flags & 1 == 1).then(|| read_bits(&bits[16..32]) as usize),
        secret_task: if flags & 2 == 2 { Task::Denoising } else { Task::Classification },
    })
}

fn check_k(k: u32) -> Result<()> {
    if !(1..=23).contains(&k) {
        return Err(invalid(format!("LSB width {k} outside 1..=23")));
    }
    Ok(())
}

/// Writes `bits` into the `k` low bits of each scalar in order, most
/// significant payload bit first within each group; the tail is zero padded.
pub fn embed_lsb(params: &mut [f32], bits: &[bool], k: u32) -> Result<()> {
    check_k(k)?;
    let available = params.len() * k as usize;
    if bits.len() > available {
        return Err(Error::Capacity { required: bits.len(), available });
    }
    let low = (1u32 << k) - 1;
    for (i, p) in params.iter_mut().enumerate() {
        let start = (i * k as usize).min(bits.len());
        let end = ((i + 1) * k as usize).min(bits.len());
        let mut group = read_bits(&bits[start..end]) as u32;
        group <<= k as usize - (end - start);
        let mut enc = p.to_bits();
        if enc & 0x7F80_0000 == 0x7F80_0000 {
            enc &= !0x0080_0000;
        }
        *p = f32::from_bits(enc & !low | group);
    }
    Ok(())
}

pub fn extract_lsb(params: &[f32], n_bits: usize, k: u32) -> Result<Vec<bool>> {
    check_k(k)?;
    let available = params.len() * k as usize;
    if n_bits > available {
        return Err(Error::Capacity { required: n_bits, available });
    }
    let mut out = Vec::with_capacity(available);
    for p in params {
        push_bits(&mut out, (p.to_bits() & ((1u32 << k) - 1)) as u64, k as usize);
    }
    out.truncate(n_bits);
    Ok(out)
}

/// Where the side filter sits in a stego model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SideLocator {
    /// Canonical index among the filters of insertable layers.
    pub index: usize,
    pub layer: usize,
    pub filter: usize,
}

impl SideLocator {
    /// Flat parameter slots of the filter's weights, then its bias.
    pub fn slots(&self, model: &ModelGraph) -> Result<Vec<usize>> {
        let spec = model
            .conv_spec(self.layer)
            .filter(|s| self.filter < s.filters)
            .ok_or_else(|| Error::CorruptStego("side filter outside the model".into()))?;
        let r = model.param_range(self.layer).unwrap();
        let n = spec.filter_len();
        let w0 = r.weights.start + self.filter * n;
        Ok((w0..w0 + n).chain([r.bias.start + self.filter]).collect())
    }

    pub fn capacity(&self, model: &ModelGraph, k: u32) -> Result<usize> {
        Ok(self.slots(model)?.len() * k as usize)
    }
}

/// Receiver side: the filter at the key's canonical index.
pub fn locate_side_filter(key: &StegoKey, stego: &ModelGraph) -> Result<SideLocator> {
    let total = insertable_filter_count(stego);
    if total == 0 {
        return Err(invalid("model has no insertable conv layer"));
    }
    let index = side_index(position_prf(key), total);
    let mut before = 0;
    for l in stego.insertable_layers() {
        let d = stego.conv_spec(l).unwrap().filters;
        if index < before + d {
            return Ok(SideLocator { index, layer: l, filter: index - before });
        }
        before += d;
    }
    unreachable!("index is below the filter total")
}

/// Sender side: the insertable layer and position at which a new filter
/// ends up at the key's canonical index. The lowest layer wins when the
/// index falls between two layers.
pub fn plan_side_position(key: &StegoKey, skeleton: &ModelGraph) -> Result<SideLocator> {
    let layers = skeleton.insertable_layers();
    if layers.is_empty() {
        return Err(invalid("model has no insertable conv layer"));
    }
    let index = side_index(position_prf(key), insertable_filter_count(skeleton) + 1);
    let mut before = 0;
    for l in layers {
        let d = skeleton.conv_spec(l).unwrap().filters;
        if index <= before + d {
            return Ok(SideLocator { index, layer: l, filter: index - before });
        }
        before += d;
    }
    unreachable!("index is at most the filter total")
}

/// Encrypts the frame over the side filter's whole capacity and embeds it.
pub fn write_payload(
    stego: &mut ModelGraph,
    locator: &SideLocator,
    key: &StegoKey,
    info: &SideInfo,
    k: u32,
) -> Result<()> {
    check_k(k)?;
    let slots = locator.slots(stego)?;
    let capacity = slots.len() * k as usize;
    let mut frame = encode_payload(info)?;
    if frame.len() > capacity {
        return Err(Error::Capacity { required: frame.len(), available: capacity });
    }
    frame.resize(capacity, false);
    let cipher = xor_bits(&frame, &derive_keystream(key, capacity, LABEL_PAYLOAD));
    let mut scalars: Vec<f32> = slots.iter().map(|&s| stego.params()[s]).collect();
    embed_lsb(&mut scalars, &cipher, k)?;
    let params = stego.params_mut();
    for (&s, v) in slots.iter().zip(scalars) {
        params[s] = v;
    }
    Ok(())
}

/// Locates the side filter with `key` and decodes its payload.
pub fn read_payload(stego: &ModelGraph, key: &StegoKey, k: u32) -> Result<(SideLocator, SideInfo)> {
    check_k(k)?;
    let locator = locate_side_filter(key, stego)?;
    let scalars: Vec<f32> = locator.slots(stego)?.iter().map(|&s| stego.params()[s]).collect();
    let capacity = scalars.len() * k as usize;
    let cipher = extract_lsb(&scalars, capacity, k)?;
    let plain = xor_bits(&cipher, &derive_keystream(key, capacity, LABEL_PAYLOAD));
    Ok((locator, decode_payload(&plain)?))
}

/// Inserts a random side filter at the key's position and embeds `info`.
/// Fails with [`Error::Capacity`] before touching anything if the frame
/// does not fit the filter chosen by the key.
pub fn insert_side_filter(
    skeleton: &ModelGraph,
    key: &StegoKey,
    info: &SideInfo,
    k: u32,
    seed: u64,
) -> Result<(ModelGraph, SideLocator)> {
    check_k(k)?;
    let locator = plan_side_position(key, skeleton)?;
    let per_scalar = skeleton.conv_spec(locator.layer).unwrap().filter_len() + 1;
    let available = per_scalar * k as usize;
    if info.frame_bits() > available {
        return Err(Error::Capacity { required: info.frame_bits(), available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = [(locator.layer, vec![locator.filter])].into_iter().collect();
    let (mut stego, _) = insert_filters(skeleton, &positions, &mut rng)?;
    write_payload(&mut stego, &locator, key, info, k)?;
    Ok((stego, locator))
}
