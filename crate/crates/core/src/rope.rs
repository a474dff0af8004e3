//! Rotary position embedding in the interleaved-pair layout.
//!
//! A vector `k` at position `s` becomes `k * cos(s*theta) + rotate(k) * sin(s*theta)`
//! with `rotate(k) = [-k2, k1, -k4, k3, ...]`. Rotations compose additively, so a
//! key cached at one position is moved to another by rotating with the delta.
//!
//! Stored values are `f32`. Angles and the per-pair products are evaluated in
//! `f64` and rounded once: an `f32` angle at position 8192 already carries an
//! error near 1e-4, far above the 1e-6 additivity budget.

use crate::error::{Error, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Elementwise tolerance used wherever RoPE round-trips are compared.
pub const ROPE_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationFrequencies {
    /// One entry per dimension, duplicated per pair: `[t1, t1, t2, t2, ...]`.
    theta: Vec<f64>,
    base: f64,
}

impl RotationFrequencies {
    /// `theta_i = base^(-2i/d)` for `i = 1..=d/2`.
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Config(format!("rotary base must be positive, got {base}")));
        }
        let d = head_dim as f64;
        let mut theta = Vec::with_capacity(head_dim);
        for i in 1..=head_dim / 2 {
            let t = base.powf(-2.0 * i as f64 / d);
            theta.push(t);
            theta.push(t);
        }
        Ok(Self { theta, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Rotate `values` (one head) by `delta` positions in place.
    pub fn rotate_in_place(&self, values: &mut [f32], delta: i64) -> Result<()> {
        if values.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.theta.len(),
                got: values.len(),
            });
        }
        if delta == 0 {
            return Ok(());
        }
        let s = delta as f64;
        for (pair, t) in values.chunks_exact_mut(2).zip(self.theta.iter().step_by(2)) {
            let (sin, cos) = (s * t).sin_cos();
            let a = pair[0] as f64;
            let b = pair[1] as f64;
            pair[0] = (a * cos - b * sin) as f32;
            pair[1] = (b * cos + a * sin) as f32;
        }
        Ok(())
    }

    /// Rotate every head of a `(heads x head_dim)` row by `delta`.
    pub fn rotate_heads(&self, row: &mut [f32], delta: i64) -> Result<()> {
        let d = self.theta.len();
        if row.len() % d != 0 {
            return Err(Error::Dimension {
                expected: d * (row.len() / d + 1),
                got: row.len(),
            });
        }
        for head in row.chunks_exact_mut(d) {
            self.rotate_in_place(head, delta)?;
        }
        Ok(())
    }
}

/// A head vector tagged with the token position it is to be embedded at.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionedVector {
    pub values: Vec<f32>,
    pub position: u32,
}

impl PositionedVector {
    pub fn new(values: Vec<f32>, position: u32) -> Self {
        Self { values, position }
    }
}

pub fn apply_rope(v: &PositionedVector, freqs: &RotationFrequencies) -> Result<Vec<f32>> {
    let mut out = v.values.clone();
    freqs.rotate_in_place(&mut out, v.position as i64)?;
    Ok(out)
}

/// Move an already-rotated vector from `old_pos` to `new_pos`.
pub fn shift_rope(
    v: &[f32],
    old_pos: u32,
    new_pos: u32,
    freqs: &RotationFrequencies,
) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    freqs.rotate_in_place(&mut out, new_pos as i64 - old_pos as i64)?;
    Ok(out)
}
