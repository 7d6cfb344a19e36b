//! Flat row-major `[head][position][channel]` tensors and per-layer KV pairs.

use crate::error::{Error, Result};

/// Dense 3-D tensor over (kv head, sequence position, channel).
///
/// The flat layout matches the on-disk payload order, so serialization is a
/// straight memcpy of `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    heads: usize,
    seq: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(heads: usize, seq: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let expected = heads * seq * dim;
        if data.len() != expected {
            return Err(Error::Shape {
                context: format!(
                    "tensor [{heads}, {seq}, {dim}] needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor3 {
            heads,
            seq,
            dim,
            data,
        })
    }

    pub fn zeros(heads: usize, seq: usize, dim: usize) -> Self {
        Tensor3 {
            heads,
            seq,
            dim,
            data: vec![0.0; heads * seq * dim],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, head: usize, pos: usize, channel: usize) -> usize {
        (head * self.seq + pos) * self.dim + channel
    }

    #[inline]
    pub fn at(&self, head: usize, pos: usize, channel: usize) -> f32 {
        self.data[self.offset(head, pos, channel)]
    }

    #[inline]
    pub fn set(&mut self, head: usize, pos: usize, channel: usize, value: f32) {
        let i = self.offset(head, pos, channel);
        self.data[i] = value;
    }

    /// All channels of one position under one head.
    #[inline]
    pub fn row(&self, head: usize, pos: usize) -> &[f32] {
        let start = self.offset(head, pos, 0);
        &self.data[start..start + self.dim]
    }

    /// Copies the sequence running along one (head, channel) pair into `out`.
    pub fn copy_channel(&self, head: usize, channel: usize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.seq);
        for (pos, slot) in out.iter_mut().enumerate() {
            *slot = self.data[self.offset(head, pos, channel)];
        }
    }

    pub fn set_channel(&mut self, head: usize, channel: usize, src: &[f32]) {
        debug_assert_eq!(src.len(), self.seq);
        for (pos, &value) in src.iter().enumerate() {
            let i = self.offset(head, pos, channel);
            self.data[i] = value;
        }
    }

    /// Gathers `keep` positions (given in the order to emit) from every head.
    pub fn select_positions(&self, keep: &[usize]) -> Tensor3 {
        debug_assert!(keep.iter().all(|&p| p < self.seq));
        let mut data = Vec::with_capacity(self.heads * keep.len() * self.dim);
        for head in 0..self.heads {
            for &pos in keep {
                data.extend_from_slice(self.row(head, pos));
            }
        }
        Tensor3 {
            heads: self.heads,
            seq: keep.len(),
            dim: self.dim,
            data,
        }
    }

    /// Appends one position across all heads; `row` is `[head][channel]`.
    pub fn append_position(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.heads * self.dim {
            return Err(Error::Shape {
                context: format!(
                    "appended row needs {} values ({} heads x {} channels), got {}",
                    self.heads * self.dim,
                    self.heads,
                    self.dim,
                    row.len()
                ),
            });
        }
        let new_seq = self.seq + 1;
        let mut data = Vec::with_capacity(self.heads * new_seq * self.dim);
        for head in 0..self.heads {
            let start = head * self.seq * self.dim;
            data.extend_from_slice(&self.data[start..start + self.seq * self.dim]);
            data.extend_from_slice(&row[head * self.dim..(head + 1) * self.dim]);
        }
        self.seq = new_seq;
        self.data = data;
        Ok(())
    }

    /// First non-finite entry as (head, position, channel), if any.
    pub fn first_non_finite(&self) -> Option<(usize, usize, usize)> {
        let flat = self.data.iter().position(|v| !v.is_finite())?;
        let head = flat / (self.seq * self.dim);
        let rest = flat % (self.seq * self.dim);
        Some((head, rest / self.dim, rest % self.dim))
    }
}

/// Key and value tensors for one layer. Both share [heads, seq, dim].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub layer_index: usize,
    pub keys: Tensor3,
    pub values: Tensor3,
}

impl LayerKv {
    pub fn new(layer_index: usize, keys: Tensor3, values: Tensor3) -> Result<Self> {
        if keys.heads() != values.heads()
            || keys.seq() != values.seq()
            || keys.dim() != values.dim()
        {
            return Err(Error::Shape {
                context: format!(
                    "layer {layer_index}: keys [{}, {}, {}] vs values [{}, {}, {}]",
                    keys.heads(),
                    keys.seq(),
                    keys.dim(),
                    values.heads(),
                    values.seq(),
                    values.dim()
                ),
            });
        }
        Ok(LayerKv {
            layer_index,
            keys,
            values,
        })
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, tensor) in [("keys", &self.keys), ("values", &self.values)] {
            if let Some((h, p, d)) = tensor.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "layer {} {name} head {h} position {p} channel {d}",
                        self.layer_index
                    ),
                });
            }
        }
        Ok(())
    }
}
