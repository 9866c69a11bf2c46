//! Receiver-side recovery of the secret model.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gfi::PositionBitmap;
use crate::model::{LayerSpec, ModelGraph};
use crate::sih::{read_payload, SideInfo, SideLocator, StegoKey};
use crate::surgery::remove_filters;

/// Everything the key unlocks, before any surgery on the secret.
#[derive(Clone, Debug, PartialEq)]
pub struct Recovered {
    pub side: SideLocator,
    pub info: SideInfo,
    /// Split per conv layer of the stego model without its side filter.
    pub bitmap: PositionBitmap,
    /// The stego model with the side filter and its channels removed.
    pub skeleton: ModelGraph,
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::CorruptStego(m),
        other => other,
    }
}

/// Reads and checks the payload, then strips the side filter.
pub fn recover(stego: &ModelGraph, key: &StegoKey, k: u32) -> Result<Recovered> {
    let (side, info) = read_payload(stego, key, k)?;
    let d = stego.conv_spec(side.layer).unwrap().filters;
    let keep: Vec<bool> = (0..d).map(|f| f != side.filter).collect();
    let skeleton = remove_filters(stego, &BTreeMap::from([(side.layer, keep)])).map_err(corrupt)?;
    let mut layers = BTreeMap::new();
    let mut rest = info.bitmap.as_slice();
    for l in skeleton.conv_layers() {
        let d = skeleton.conv_spec(l).unwrap().filters;
        if rest.len() < d {
            return Err(Error::CorruptStego("position bitmap shorter than the conv layers".into()));
        }
        let (head, tail) = rest.split_at(d);
        layers.insert(l, head.to_vec());
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(Error::CorruptStego("position bitmap longer than the conv layers".into()));
    }
    Ok(Recovered { side, info, bitmap: PositionBitmap::new(layers), skeleton })
}

/// Rebuilds the secret model. Never modifies `stego`.
pub fn extract_secret(stego: &ModelGraph, key: &StegoKey, k: u32) -> Result<ModelGraph> {
    let r = recover(stego, key, k)?;
    let mut secret = remove_filters(&r.skeleton, r.bitmap.layers()).map_err(corrupt)?;
    if let Some(start) = r.info.adapter_start {
        let head = secret.layers().get(start..).unwrap_or(&[]);
        let is_head = matches!(
            head,
            [LayerSpec::Dense { .. } | LayerSpec::HeadAdapter { .. }]
                | [LayerSpec::Flatten, LayerSpec::Dense { .. } | LayerSpec::HeadAdapter { .. }]
        );
        if !is_head {
            return Err(Error::CorruptStego(format!("no head adapter at layer {start}")));
        }
        secret = secret.truncated(start).map_err(corrupt)?;
    }
    secret.set_task(r.info.secret_task);
    Ok(secret)
}
