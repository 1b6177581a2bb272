//! JSON wire types for the reward service.
//!
//! An item is either a file path string (raw `f32` tensor with a shape
//! sidecar) or an inline tensor `{shape, data, latent}` where `data` is
//! base64 of little-endian `f32` values.

use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use uuid::Uuid;
use worldflow_core::rewardsvc::Item;
use worldflow_core::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: String,
    /// Latent tensors are decoded by the service before scoring.
    #[serde(default)]
    pub latent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireItem {
    Path(String),
    Tensor(WireTensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub items: Vec<WireItem>,
    pub reward_types: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCreated {
    pub uuid: Uuid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn encode_tensor(t: &Tensor, latent: bool) -> WireTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    WireTensor {
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
        latent,
    }
}

pub fn decode_tensor(w: &WireTensor) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&w.data)
        .map_err(|e| Error::InvalidArgument(format!("bad base64 tensor: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidArgument("tensor byte length is not a multiple of 4".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(w.shape.clone(), data)
}

impl WireItem {
    pub fn from_item(item: &Item) -> Self {
        match item {
            Item::Video(v) => WireItem::Tensor(encode_tensor(v, false)),
            Item::Latent(l) => WireItem::Tensor(encode_tensor(l, true)),
            Item::Path(p) => WireItem::Path(p.display().to_string()),
        }
    }

    pub fn into_item(self) -> Result<Item> {
        match self {
            WireItem::Path(p) => Ok(Item::Path(PathBuf::from(p))),
            WireItem::Tensor(w) => {
                let t = decode_tensor(&w)?;
                Ok(if w.latent { Item::Latent(t) } else { Item::Video(t) })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_f32_exact() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![0.25, -1.0, 3.5, 0.1]).unwrap();
        let back = decode_tensor(&encode_tensor(&t, false)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data()[..3], t.data()[..3]);
        assert_eq!(back.data()[3], 0.1f32 as f64);
    }

    #[test]
    fn items_parse_from_json() {
        let req: TaskRequest =
            serde_json::from_str(r#"{"items":["clip.f32",{"shape":[1],"data":"AACAPw=="}],"reward_types":["brightness"]}"#).unwrap();
        assert_eq!(req.items[0], WireItem::Path("clip.f32".into()));
        match req.items[1].clone().into_item().unwrap() {
            Item::Video(v) => assert_eq!(v.data(), &[1.0]),
            other => panic!("unexpected item {other:?}"),
        }
    }
}
