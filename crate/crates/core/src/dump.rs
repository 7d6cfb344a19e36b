//! In-memory KV dump: every layer's K/V tensors plus token modality tags.
//!
//! All arithmetic runs on f32 regardless of the storage dtype; the dtype is
//! kept so byte accounting and round-trips reflect what is actually on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LayerKv;

/// Storage element type for serialized tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f16" => Ok(DType::F16),
            _ => Err(Error::InvalidConfig(format!(
                "unknown dtype {s:?}; expected f32 or f16"
            ))),
        }
    }
}

/// Modality of the token that produced a cache position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenTag {
    Text,
    Vision,
}

impl TokenTag {
    pub fn code(self) -> u8 {
        match self {
            TokenTag::Text => 0,
            TokenTag::Vision => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<TokenTag> {
        match code {
            0 => Some(TokenTag::Text),
            1 => Some(TokenTag::Vision),
            _ => None,
        }
    }
}

/// Shared geometry of a dump; also embedded in retention plans so a plan can
/// be checked against the dump it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpMeta {
    pub num_layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub dtype: DType,
}

/// A full KV dump. Construction enforces the invariants the rest of the
/// engine assumes: at least one layer, identical shapes everywhere,
/// `layers[i].layer_index == i`, and one tag per position.
#[derive(Debug, Clone)]
pub struct KvDump {
    meta: DumpMeta,
    layers: Vec<LayerKv>,
    token_tags: Vec<TokenTag>,
}

impl KvDump {
    pub fn new(layers: Vec<LayerKv>, token_tags: Vec<TokenTag>, dtype: DType) -> Result<KvDump> {
        let first = layers.first().ok_or(Error::Empty("dump layers"))?;
        let (heads, seq, dim) = (first.keys.heads(), first.keys.seq(), first.keys.dim());
        if heads == 0 || seq == 0 || dim == 0 {
            return Err(Error::Shape { context: format!(
                "degenerate dump geometry {heads}x{seq}x{dim}; every axis must be positive"
            ) });
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.layer_index != i {
                return Err(Error::Shape { context: format!(
                    "layer at slot {i} reports layer_index {}",
                    layer.layer_index
                ) });
            }
            if layer.keys.heads() != heads || layer.keys.seq() != seq || layer.keys.dim() != dim {
                return Err(Error::Shape { context: format!(
                    "layer {i} is {}x{}x{}, layer 0 is {heads}x{seq}x{dim}",
                    layer.keys.heads(),
                    layer.keys.seq(),
                    layer.keys.dim(),
                ) });
            }
        }
        if token_tags.len() != seq {
            return Err(Error::Shape { context: format!(
                "{} token tags for sequence length {seq}",
                token_tags.len()
            ) });
        }
        Ok(KvDump {
            meta: DumpMeta {
                num_layers: layers.len(),
                kv_heads: heads,
                head_dim: dim,
                seq_len: seq,
                dtype,
            },
            layers,
            token_tags,
        })
    }

    pub fn meta(&self) -> DumpMeta {
        self.meta
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&LayerKv> {
        self.layers.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.layers.len(),
            what: "layer",
        })
    }

    pub fn token_tags(&self) -> &[TokenTag] {
        &self.token_tags
    }

    /// Positions carrying the given tag, ascending.
    pub fn positions_tagged(&self, tag: TokenTag) -> Vec<usize> {
        self.token_tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(p, _)| p)
            .collect()
    }

    /// Records that the dump should be stored at a different precision.
    /// In-memory values are untouched; only serialization and byte
    /// accounting change.
    pub fn set_dtype(&mut self, dtype: DType) {
        self.meta.dtype = dtype;
    }

    /// Serialized size of the K/V payload at the dump's dtype, excluding
    /// headers and tags.
    pub fn kv_bytes(&self) -> u64 {
        let m = self.meta;
        2 * (m.num_layers as u64)
            * (m.kv_heads as u64)
            * (m.seq_len as u64)
            * (m.head_dim as u64)
            * (m.dtype.bytes() as u64)
    }

    pub fn validate_finite(&self) -> Result<()> {
        for layer in &self.layers {
            layer.validate_finite()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;

    fn layer(i: usize, heads: usize, seq: usize, dim: usize) -> LayerKv {
        LayerKv::new(i, Tensor3::zeros(heads, seq, dim), Tensor3::zeros(heads, seq, dim))
            .unwrap()
    }

    fn tags(n: usize) -> Vec<TokenTag> {
        vec![TokenTag::Text; n]
    }

    #[test]
    fn well_formed_dump_reports_its_geometry() {
        let dump = KvDump::new(
            vec![layer(0, 2, 5, 3), layer(1, 2, 5, 3)],
            tags(5),
            DType::F32,
        )
        .unwrap();
        let m = dump.meta();
        assert_eq!(
            (m.num_layers, m.kv_heads, m.seq_len, m.head_dim),
            (2, 2, 5, 3)
        );
        assert_eq!(dump.kv_bytes(), 2 * 2 * 2 * 5 * 3 * 4);
    }

    #[test]
    fn f16_halves_the_payload_bytes() {
        let mut dump = KvDump::new(vec![layer(0, 1, 4, 2)], tags(4), DType::F32).unwrap();
        let full = dump.kv_bytes();
        dump.set_dtype(DType::F16);
        assert_eq!(dump.kv_bytes() * 2, full);
    }

    #[test]
    fn mismatched_layer_shape_is_rejected() {
        let err = KvDump::new(
            vec![layer(0, 2, 5, 3), layer(1, 2, 6, 3)],
            tags(5),
            DType::F32,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn out_of_order_layer_index_is_rejected() {
        let err = KvDump::new(
            vec![layer(1, 2, 5, 3), layer(0, 2, 5, 3)],
            tags(5),
            DType::F32,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn tag_count_must_match_sequence_length() {
        let err = KvDump::new(vec![layer(0, 1, 5, 2)], tags(4), DType::F32).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn empty_dump_is_rejected() {
        assert!(matches!(
            KvDump::new(vec![], vec![], DType::F32),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn zero_length_axes_are_rejected() {
        for (h, s, d) in [(0, 4, 2), (1, 0, 2), (1, 4, 0)] {
            let err = KvDump::new(vec![layer(0, h, s, d)], tags(s), DType::F32).unwrap_err();
            assert!(matches!(err, Error::Shape { .. }), "{h}x{s}x{d} accepted");
        }
    }

    #[test]
    fn tagged_positions_are_ascending() {
        let mut t = tags(6);
        t[1] = TokenTag::Vision;
        t[4] = TokenTag::Vision;
        let dump = KvDump::new(vec![layer(0, 1, 6, 2)], t, DType::F32).unwrap();
        assert_eq!(dump.positions_tagged(TokenTag::Vision), vec![1, 4]);
        assert_eq!(dump.positions_tagged(TokenTag::Text), vec![0, 2, 3, 5]);
    }

    #[test]
    fn dtype_codes_round_trip() {
        for d in [DType::F32, DType::F16] {
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
        assert_eq!(DType::from_code(7), None);
        for t in [TokenTag::Text, TokenTag::Vision] {
            assert_eq!(TokenTag::from_code(t.code()), Some(t));
        }
        assert_eq!(TokenTag::from_code(2), None);
    }
}
