//! Q-index sparse attention.
//!
//! Only the tokens listed in a plan's Q index are computed: recomputed
//! critical tokens of reused chunks and the new input tokens. The shared
//! chunk cache is read-only; the stale entries of critical tokens are
//! skipped and their fresh K/V are read from a per-request exclusive page
//! that sits logically after the shared region. Visibility is decided by
//! RoPE position values, never by storage order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kv::{AttnMask, LayerKv, LayeredKV};
use crate::model::attend_row;

/// Which tokens to compute, which shared entries they invalidate and where
/// their fresh K/V live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QIndexPlan {
    q_indices: Vec<u32>,
    stale_positions: Vec<u32>,
    exclusive_page: BTreeMap<u32, usize>,
}

impl QIndexPlan {
    /// Plan for recomputing `critical` cached positions and computing the
    /// `new_tokens`. Critical tokens get exclusive-page slots in ascending
    /// position order.
    pub fn new(critical: &[u32], new_tokens: &[u32]) -> Result<Self> {
        let mut crit = critical.to_vec();
        crit.sort_unstable();
        let page = crit.iter().enumerate().map(|(slot, &p)| (p, slot)).collect();
        let mut q: Vec<u32> = crit.iter().chain(new_tokens).copied().collect();
        q.sort_unstable();
        Self::from_parts(q, crit, page)
    }

    pub fn from_parts(
        q_indices: Vec<u32>,
        stale_positions: Vec<u32>,
        exclusive_page: BTreeMap<u32, usize>,
    ) -> Result<Self> {
        if q_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPlan("q indices must be strictly increasing".into()));
        }
        let mut stale = stale_positions;
        stale.sort_unstable();
        if stale.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPlan("duplicate stale position".into()));
        }
        if let Some(p) = stale.iter().find(|p| q_indices.binary_search(p).is_err()) {
            return Err(Error::InvalidPlan(format!("stale position {p} is not in the q index")));
        }
        if exclusive_page.len() != stale.len()
            || exclusive_page.keys().zip(&stale).any(|(a, b)| a != b)
        {
            return Err(Error::InvalidPlan(
                "exclusive page keys must equal the critical tokens".into(),
            ));
        }
        let mut slots: Vec<usize> = exclusive_page.values().copied().collect();
        slots.sort_unstable();
        if slots.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPlan("overlapping exclusive-page slots".into()));
        }
        if slots.last().is_some_and(|&s| s >= stale.len()) {
            return Err(Error::InvalidPlan("exclusive-page slot out of range".into()));
        }
        Ok(Self { q_indices, stale_positions: stale, exclusive_page })
    }

    pub fn q_indices(&self) -> &[u32] {
        &self.q_indices
    }

    pub fn stale_positions(&self) -> &[u32] {
        &self.stale_positions
    }

    pub fn exclusive_page(&self) -> &BTreeMap<u32, usize> {
        &self.exclusive_page
    }

    pub fn num_critical(&self) -> usize {
        self.stale_positions.len()
    }

    /// Q-index entries that are not critical, in order.
    pub fn new_tokens(&self) -> Vec<u32> {
        self.q_indices
            .iter()
            .copied()
            .filter(|p| self.stale_positions.binary_search(p).is_err())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.q_indices.is_empty()
    }

    /// Exclusive-page slot each Q-index row writes to: critical tokens use
    /// their assigned slot, new tokens follow in order.
    fn page_slots(&self) -> Vec<usize> {
        let mut next_new = self.num_critical();
        self.q_indices
            .iter()
            .map(|p| match self.exclusive_page.get(p) {
                Some(&s) => s,
                None => {
                    next_new += 1;
                    next_new - 1
                }
            })
            .collect()
    }

    /// RoPE position held by each exclusive-page slot.
    pub fn page_positions(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.q_indices.len()];
        for (p, s) in self.q_indices.iter().zip(self.page_slots()) {
            out[s] = *p;
        }
        out
    }

    /// Checks the plan against the shared cache it will run over.
    pub fn validate_against(&self, shared_positions: &[u32]) -> Result<()> {
        for &p in &self.q_indices {
            let cached = shared_positions.contains(&p);
            let stale = self.stale_positions.binary_search(&p).is_ok();
            match (cached, stale) {
                (false, true) => {
                    return Err(Error::InvalidPlan(format!(
                        "critical position {p} is not in the shared cache"
                    )))
                }
                (true, false) => {
                    return Err(Error::InvalidPlan(format!(
                        "new token position {p} collides with the shared cache"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-request private K/V region: one slot per critical token, then new
/// tokens, then anything appended while decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ExclusivePage {
    layers: Vec<LayerKv>,
    positions: Vec<u32>,
    heads: usize,
    head_dim: usize,
}

impl ExclusivePage {
    pub fn for_plan(plan: &QIndexPlan, layers: usize, heads: usize, head_dim: usize) -> Self {
        let n = plan.q_indices.len() * heads * head_dim;
        Self {
            layers: vec![LayerKv { k: vec![0.0; n], v: vec![0.0; n] }; layers],
            positions: plan.page_positions(),
            heads,
            head_dim,
        }
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

    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// K and V rows of `slot` at `layer`.
    pub fn row(&self, layer: usize, slot: usize) -> (&[f32], &[f32]) {
        let w = self.width();
        let l = &self.layers[layer];
        (&l.k[slot * w..(slot + 1) * w], &l.v[slot * w..(slot + 1) * w])
    }

    fn write(&mut self, layer: usize, slot: usize, k: &[f32], v: &[f32]) {
        let w = self.width();
        self.layers[layer].k[slot * w..(slot + 1) * w].copy_from_slice(k);
        self.layers[layer].v[slot * w..(slot + 1) * w].copy_from_slice(v);
    }

    /// Reserve one more slot (all layers) for a decoded token.
    pub(crate) fn push_slot(&mut self, position: u32) -> usize {
        let w = self.width();
        for l in &mut self.layers {
            l.k.extend(std::iter::repeat_n(0.0, w));
            l.v.extend(std::iter::repeat_n(0.0, w));
        }
        self.positions.push(position);
        self.positions.len() - 1
    }

    pub(crate) fn write_slot(&mut self, layer: usize, slot: usize, k: &[f32], v: &[f32]) {
        self.write(layer, slot, k, v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseAttnOutput {
    /// `(|q| x heads x head_dim)` in Q-index order.
    pub out: Vec<f32>,
    /// Multiply-adds of the QK and AV products, times two.
    pub flops: u64,
}

/// Sparse attention for one layer.
///
/// `q`, `fresh_k` and `fresh_v` hold one row per Q-index entry. Fresh K/V
/// are first written to `page`; every query then attends to the non-stale
/// shared entries and the page entries whose position does not exceed its
/// own. `shared` is never modified.
#[allow(clippy::too_many_arguments)]
pub fn q_sparse_attn(
    q: &[f32],
    fresh_k: &[f32],
    fresh_v: &[f32],
    shared: &LayeredKV,
    layer: usize,
    page: &mut ExclusivePage,
    plan: &QIndexPlan,
) -> Result<SparseAttnOutput> {
    let w = shared.row_width();
    let n = plan.q_indices.len();
    for (name, buf) in [("q", q), ("k", fresh_k), ("v", fresh_v)] {
        if buf.len() != n * w {
            return Err(Error::Contract(format!(
                "{name} has {} values, plan needs {}",
                buf.len(),
                n * w
            )));
        }
    }
    if page.width() != w || page.len() < n {
        return Err(Error::InvalidPlan("exclusive page does not fit the plan".into()));
    }
    plan.validate_against(shared.positions())?;
    for (row, slot) in plan.page_slots().into_iter().enumerate() {
        page.write(layer, slot, &fresh_k[row * w..(row + 1) * w], &fresh_v[row * w..(row + 1) * w]);
    }
    Ok(attend_sparse(q, &plan.q_indices, shared, layer, &plan.stale_positions, page))
}

/// Queries at `q_positions` against `shared` minus `stale` plus `page`.
pub(crate) fn attend_sparse(
    q: &[f32],
    q_positions: &[u32],
    shared: &LayeredKV,
    layer: usize,
    stale: &[u32],
    page: &ExclusivePage,
) -> SparseAttnOutput {
    let heads = shared.heads();
    let hd = shared.head_dim();
    let w = heads * hd;
    let sp = shared.positions();
    let n_shared = sp.len();
    let sorted = shared.is_strictly_increasing();
    let sl = shared.layer(layer);
    let pl = page.layer(layer);
    // keys 0..n_shared are shared entries, the rest are page slots
    let key = |j: usize| -> &[f32] {
        if j < n_shared {
            &sl.k[j * w..(j + 1) * w]
        } else {
            &pl.k[(j - n_shared) * w..(j - n_shared + 1) * w]
        }
    };
    let value = |j: usize| -> &[f32] {
        if j < n_shared {
            &sl.v[j * w..(j + 1) * w]
        } else {
            &pl.v[(j - n_shared) * w..(j - n_shared + 1) * w]
        }
    };
    let mut out = vec![0.0f32; q_positions.len() * w];
    let mut flops = 0u64;
    let mut visible: Vec<usize> = Vec::new();
    let mut scores: Vec<f32> = Vec::new();
    for (i, &p) in q_positions.iter().enumerate() {
        visible.clear();
        let upto = if sorted { sp.partition_point(|&x| x <= p) } else { n_shared };
        for (j, &kp) in sp[..upto].iter().enumerate() {
            if kp <= p && stale.binary_search(&kp).is_err() {
                visible.push(j);
            }
        }
        for (s, &kp) in page.positions.iter().enumerate() {
            if kp <= p {
                visible.push(n_shared + s);
            }
        }
        flops += 4 * (visible.len() * w) as u64;
        attend_row(
            &q[i * w..(i + 1) * w],
            heads,
            hd,
            &visible,
            key,
            value,
            &mut scores,
            &mut out[i * w..(i + 1) * w],
        );
    }
    SparseAttnOutput { out, flops }
}

/// Dense mask reproducing the kernel's visibility over the key layout
/// `[shared entries..., exclusive-page slots...]`: stale shared entries are
/// hidden and every other key is visible iff its position is not after the
/// query's.
pub fn build_equivalent_mask(plan: &QIndexPlan, shared_positions: &[u32]) -> AttnMask {
    let page_pos = plan.page_positions();
    let cols = shared_positions.len() + page_pos.len();
    let mut m = AttnMask::new(plan.q_indices.len(), cols, false);
    for (r, &p) in plan.q_indices.iter().enumerate() {
        for (j, &kp) in shared_positions.iter().enumerate() {
            let stale = plan.stale_positions.binary_search(&kp).is_ok();
            m.set(r, j, kp <= p && !stale);
        }
        for (s, &kp) in page_pos.iter().enumerate() {
            m.set(r, shared_positions.len() + s, kp <= p);
        }
    }
    m
}
