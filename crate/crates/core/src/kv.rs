//! Per-layer key/value state and dense attention masks.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::rope::RotationFrequencies;

/// Keys and values of one layer, token-major: `(tokens x heads x head_dim)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Full K/V state of a sequence across all layers, plus the RoPE position
/// every cached key was rotated to.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredKV {
    layers: Vec<LayerKv>,
    positions: Vec<u32>,
    heads: usize,
    head_dim: usize,
}

impl LayeredKV {
    pub fn empty(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); layers],
            positions: Vec::new(),
            heads,
            head_dim,
        }
    }

    /// Build from raw per-layer buffers; every buffer must hold
    /// `positions.len() * heads * head_dim` values.
    pub fn from_parts(
        layers: Vec<LayerKv>,
        positions: Vec<u32>,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let want = positions.len() * heads * head_dim;
        for l in &layers {
            if l.k.len() != want {
                return Err(Error::Dimension { expected: want, got: l.k.len() });
            }
            if l.v.len() != want {
                return Err(Error::Dimension { expected: want, got: l.v.len() });
            }
        }
        Ok(Self { layers, positions, heads, head_dim })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn row_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn k_row(&self, layer: usize, token: usize) -> &[f32] {
        let w = self.row_width();
        &self.layers[layer].k[token * w..(token + 1) * w]
    }

    pub fn v_row(&self, layer: usize, token: usize) -> &[f32] {
        let w = self.row_width();
        &self.layers[layer].v[token * w..(token + 1) * w]
    }

    /// Slot holding `position`, if any.
    pub fn slot_of(&self, position: u32) -> Option<usize> {
        self.positions.iter().position(|&p| p == position)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.positions.windows(2).all(|w| w[0] < w[1])
    }

    /// Tokens `range` of every layer.
    pub fn slice(&self, range: Range<usize>) -> LayeredKV {
        let w = self.row_width();
        let layers = self
            .layers
            .iter()
            .map(|l| LayerKv {
                k: l.k[range.start * w..range.end * w].to_vec(),
                v: l.v[range.start * w..range.end * w].to_vec(),
            })
            .collect();
        LayeredKV {
            layers,
            positions: self.positions[range].to_vec(),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    /// Append all entries of `other` (same geometry required).
    pub fn extend_from(&mut self, other: &LayeredKV) -> Result<()> {
        self.check_geometry(other)?;
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.k.extend_from_slice(&src.k);
            dst.v.extend_from_slice(&src.v);
        }
        self.positions.extend_from_slice(&other.positions);
        Ok(())
    }

    /// Copy whose keys are re-rotated so the first token sits at `new_start`
    /// and the rest follow consecutively. Values are position-free.
    pub fn relocated(&self, new_start: u32, freqs: &RotationFrequencies) -> Result<LayeredKV> {
        let mut out = self.clone();
        let w = self.row_width();
        for (t, pos) in out.positions.iter_mut().enumerate() {
            let target = new_start + t as u32;
            let delta = target as i64 - *pos as i64;
            if delta != 0 {
                for layer in out.layers.iter_mut() {
                    freqs.rotate_heads(&mut layer.k[t * w..(t + 1) * w], delta)?;
                }
            }
            *pos = target;
        }
        Ok(out)
    }

    pub(crate) fn push_layer_rows(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        self.layers[layer].k.extend_from_slice(k);
        self.layers[layer].v.extend_from_slice(v);
    }

    pub(crate) fn push_positions(&mut self, positions: &[u32]) {
        self.positions.extend_from_slice(positions);
    }

    pub(crate) fn overwrite_row(&mut self, layer: usize, token: usize, k: &[f32], v: &[f32]) {
        let w = self.row_width();
        let l = &mut self.layers[layer];
        l.k[token * w..(token + 1) * w].copy_from_slice(k);
        l.v[token * w..(token + 1) * w].copy_from_slice(v);
    }

    /// Keep only the first `n` layers.
    pub fn truncate_layers(&mut self, n: usize) {
        self.layers.truncate(n);
    }

    /// Little-endian byte image of every tensor and the positions, for
    /// bit-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.positions {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for l in &self.layers {
            for x in l.k.iter().chain(&l.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Largest elementwise difference over all layers, K and V.
    pub fn max_abs_diff(&self, other: &LayeredKV) -> f32 {
        let mut worst = 0.0f32;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.k.iter().zip(&b.k).chain(a.v.iter().zip(&b.v)) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    fn check_geometry(&self, other: &LayeredKV) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Dimension {
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        if self.row_width() != other.row_width() {
            return Err(Error::Dimension {
                expected: self.row_width(),
                got: other.row_width(),
            });
        }
        Ok(())
    }
}

/// Dense boolean visibility matrix, `true` = attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Self { rows, cols, data: vec![fill; rows * cols] }
    }

    /// Causal mask keyed on position values: query `i` sees key `j` iff
    /// `key_pos[j] <= query_pos[i]`.
    pub fn causal_by_position(query_pos: &[u32], key_pos: &[u32]) -> Self {
        let mut m = Self::new(query_pos.len(), key_pos.len(), false);
        for (i, &qp) in query_pos.iter().enumerate() {
            for (j, &kp) in key_pos.iter().enumerate() {
                m.set(i, j, kp <= qp);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// First row with no visible key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| !self.row(r).iter().any(|&b| b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> LayeredKV {
        let w = 2 * 4;
        let layers = (0..3)
            .map(|l| LayerKv {
                k: (0..n * w).map(|i| (i + 100 * l) as f32 * 0.01).collect(),
                v: (0..n * w).map(|i| -((i + 100 * l) as f32) * 0.01).collect(),
            })
            .collect();
        LayeredKV::from_parts(layers, (10..10 + n as u32).collect(), 2, 4).unwrap()
    }

    #[test]
    fn slice_and_extend_round_trip() {
        let kv = toy(6);
        let mut a = kv.slice(0..2);
        a.extend_from(&kv.slice(2..6)).unwrap();
        assert_eq!(a, kv);
    }

    #[test]
    fn relocation_round_trip_restores_keys() {
        let freqs = RotationFrequencies::with_default_base(4).unwrap();
        let kv = toy(5);
        let moved = kv.relocated(500, &freqs).unwrap();
        assert_eq!(moved.positions(), &[500, 501, 502, 503, 504]);
        assert_eq!(moved.layer(1).v, kv.layer(1).v);
        let back = moved.relocated(10, &freqs).unwrap();
        assert!(back.max_abs_diff(&kv) <= 1e-6);
    }

    #[test]
    fn relocation_to_native_start_is_bit_exact() {
        let freqs = RotationFrequencies::with_default_base(4).unwrap();
        let kv = toy(4);
        assert_eq!(kv.relocated(10, &freqs).unwrap().to_bytes(), kv.to_bytes());
    }

    #[test]
    fn from_parts_checks_sizes() {
        let bad = vec![LayerKv { k: vec![0.0; 3], v: vec![0.0; 3] }];
        assert!(LayeredKV::from_parts(bad, vec![1], 1, 4).is_err());
    }

    #[test]
    fn causal_mask_uses_position_values() {
        let m = AttnMask::causal_by_position(&[5, 2], &[1, 2, 3, 9]);
        assert_eq!(m.row(0), &[true, true, true, false]);
        assert_eq!(m.row(1), &[true, true, false, false]);
        assert_eq!(m.first_empty_row(), None);
        let empty = AttnMask::causal_by_position(&[0], &[1]);
        assert_eq!(empty.first_empty_row(), Some(0));
    }
}
