//! Block selection: turns a score map into a compacted list of key blocks per
//! query block.
//!
//! The production rule keeps block `j` of row `i` when
//! `Score_{i,j} >= α · max_{j' <= i} Score_{i,j'}`, found with one max-reduction
//! and one comparison pass. Sink blocks (`j < sink_blocks`) and the local
//! window (`0 <= i − j < window_blocks`) are always kept, and everything is
//! clipped to `j <= i`. Top-k and top-p baselines apply the same structural
//! retention so that only the scoring rule differs.
//!
//! Masks and plans are laid out `batch × query block × key block × head`;
//! counts are `batch × query block × head`.

use std::cmp::Ordering;

use crate::config::PipelineConfig;
use crate::discovery::BlockScoreMap;
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::par;
use crate::tensor::RawTensor;

/// Dimensions shared by [`ActiveMask`] and [`SparseBlockPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlanShape {
    pub batch: usize,
    pub num_blocks: usize,
    pub heads: usize,
}

impl PlanShape {
    pub fn new(batch: usize, num_blocks: usize, heads: usize) -> Self {
        PlanShape {
            batch,
            num_blocks,
            heads,
        }
    }

    /// `[batch, M, N, heads]`
    pub fn index_dims(&self) -> [usize; 4] {
        [self.batch, self.num_blocks, self.num_blocks, self.heads]
    }

    /// `[batch, M, heads]`
    pub fn count_dims(&self) -> [usize; 3] {
        [self.batch, self.num_blocks, self.heads]
    }

    pub fn numel(&self) -> usize {
        self.batch * self.num_blocks * self.num_blocks * self.heads
    }

    pub fn rows(&self) -> usize {
        self.batch * self.num_blocks * self.heads
    }

    #[inline]
    pub fn index(&self, batch: usize, query_block: usize, key_block: usize, head: usize) -> usize {
        ((batch * self.num_blocks + query_block) * self.num_blocks + key_block) * self.heads + head
    }

    #[inline]
    pub fn count_index(&self, batch: usize, query_block: usize, head: usize) -> usize {
        (batch * self.num_blocks + query_block) * self.heads + head
    }

    /// `row -> (batch, query_block, head)` in count order.
    pub fn split_row(&self, row: usize) -> (usize, usize, usize) {
        let h = row % self.heads;
        let zi = row / self.heads;
        (zi / self.num_blocks, zi % self.num_blocks, h)
    }

    /// Σ over rows of the number of causal key blocks.
    pub fn causal_pairs(&self) -> usize {
        self.batch * self.heads * self.num_blocks * (self.num_blocks + 1) / 2
    }
}

/// Which key blocks each query block attends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveMask {
    shape: PlanShape,
    active: Vec<bool>,
}

impl ActiveMask {
    /// Builds a mask, checking causality and diagonal retention.
    pub fn new(shape: PlanShape, active: Vec<bool>) -> Result<Self> {
        if active.len() != shape.numel() {
            return Err(Error::validation(format!(
                "mask {:?} needs {} entries, got {}",
                shape.index_dims(),
                shape.numel(),
                active.len()
            )));
        }
        let mask = ActiveMask { shape, active };
        for row in 0..shape.rows() {
            let (z, i, h) = shape.split_row(row);
            if !mask.get(z, i, i, h) {
                return Err(Error::validation(format!(
                    "diagonal block missing at (batch {z}, query block {i}, head {h})"
                )));
            }
            if let Some(j) = (i + 1..shape.num_blocks).find(|&j| mask.get(z, i, j, h)) {
                return Err(Error::validation(format!(
                    "non-causal block {j} active for query block {i}"
                )));
            }
        }
        Ok(mask)
    }

    pub fn from_fn(shape: PlanShape, f: impl Fn(usize, usize, usize, usize) -> bool) -> Result<Self> {
        let mut active = vec![false; shape.numel()];
        for z in 0..shape.batch {
            for i in 0..shape.num_blocks {
                for j in 0..shape.num_blocks {
                    for h in 0..shape.heads {
                        active[shape.index(z, i, j, h)] = f(z, i, j, h);
                    }
                }
            }
        }
        Self::new(shape, active)
    }

    pub fn full_causal(shape: PlanShape) -> Self {
        Self::from_fn(shape, |_, i, j, _| j <= i).expect("full causal mask is valid")
    }

    pub fn diagonal(shape: PlanShape) -> Self {
        Self::from_fn(shape, |_, i, j, _| i == j).expect("diagonal mask is valid")
    }

    pub fn shape(&self) -> PlanShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    #[inline]
    pub fn get(&self, batch: usize, query_block: usize, key_block: usize, head: usize) -> bool {
        self.active[self.shape.index(batch, query_block, key_block, head)]
    }

    /// Active key blocks of one row in ascending order.
    pub fn row_blocks(&self, batch: usize, query_block: usize, head: usize) -> Vec<usize> {
        (0..self.shape.num_blocks)
            .filter(|&j| self.get(batch, query_block, j, head))
            .collect()
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Mask as 0/1 integers in container layout.
    pub fn to_raw(&self) -> RawTensor {
        RawTensor::i32(
            self.shape.index_dims().to_vec(),
            self.active.iter().map(|&a| a as i32).collect(),
        )
        .expect("mask dims match payload")
    }

    pub fn from_raw(raw: RawTensor) -> Result<Self> {
        let (dims, data) = raw.into_i32()?;
        let shape = plan_shape_from_index_dims(&dims)?;
        let active = data
            .into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::validation(format!("mask entries must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, active)
    }
}

fn plan_shape_from_index_dims(dims: &[usize]) -> Result<PlanShape> {
    if dims.len() != 4 || dims[1] != dims[2] {
        return Err(Error::format(format!(
            "block index tensors are [batch, M, M, heads], got {dims:?}"
        )));
    }
    Ok(PlanShape::new(dims[0], dims[1], dims[3]))
}

/// Compacted active block indices and counts per row.
///
/// Row `(z, i, h)` lists its `C` active key blocks in ascending order
/// followed by the fill value `N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBlockPlan {
    shape: PlanShape,
    indices: Vec<i32>,
    counts: Vec<i32>,
}

impl SparseBlockPlan {
    /// Wraps raw arrays without semantic checks; see [`Self::validate`].
    pub fn from_parts(shape: PlanShape, indices: Vec<i32>, counts: Vec<i32>) -> Result<Self> {
        if indices.len() != shape.numel() || counts.len() != shape.rows() {
            return Err(Error::validation(format!(
                "plan {:?} needs {} indices and {} counts, got {} and {}",
                shape.index_dims(),
                shape.numel(),
                shape.rows(),
                indices.len(),
                counts.len()
            )));
        }
        Ok(SparseBlockPlan {
            shape,
            indices,
            counts,
        })
    }

    pub fn from_raw(indices: RawTensor, counts: RawTensor) -> Result<Self> {
        let (idims, idata) = indices.into_i32()?;
        let (cdims, cdata) = counts.into_i32()?;
        let shape = plan_shape_from_index_dims(&idims)?;
        if cdims != shape.count_dims() {
            return Err(Error::format(format!(
                "count tensor dims {cdims:?} do not match index dims {idims:?}"
            )));
        }
        Self::from_parts(shape, idata, cdata)
    }

    pub fn to_raw(&self) -> (RawTensor, RawTensor) {
        (
            RawTensor::i32(self.shape.index_dims().to_vec(), self.indices.clone())
                .expect("index dims match payload"),
            RawTensor::i32(self.shape.count_dims().to_vec(), self.counts.clone())
                .expect("count dims match payload"),
        )
    }

    pub fn shape(&self) -> PlanShape {
        self.shape
    }

    pub fn indices(&self) -> &[i32] {
        &self.indices
    }

    pub fn counts(&self) -> &[i32] {
        &self.counts
    }

    pub fn count(&self, batch: usize, query_block: usize, head: usize) -> i32 {
        self.counts[self.shape.count_index(batch, query_block, head)]
    }

    pub fn index(&self, batch: usize, query_block: usize, slot: usize, head: usize) -> i32 {
        self.indices[self.shape.index(batch, query_block, slot, head)]
    }

    /// The first `C` entries of a row, as stored (not re-sorted).
    pub fn listed_blocks(&self, batch: usize, query_block: usize, head: usize) -> Vec<i32> {
        let c = self.count(batch, query_block, head).clamp(0, self.shape.num_blocks as i32);
        (0..c as usize)
            .map(|k| self.index(batch, query_block, k, head))
            .collect()
    }

    /// Mutable access to one index entry, for constructing permuted or
    /// deliberately corrupted plans.
    pub fn set_index(&mut self, batch: usize, query_block: usize, slot: usize, head: usize, value: i32) {
        let idx = self.shape.index(batch, query_block, slot, head);
        self.indices[idx] = value;
    }

    pub fn set_count(&mut self, batch: usize, query_block: usize, head: usize, value: i32) {
        let idx = self.shape.count_index(batch, query_block, head);
        self.counts[idx] = value;
    }

    /// Checks every structural invariant: counts in `1..=i+1`, listed blocks
    /// strictly increasing and causal, the diagonal present, fill value `N`
    /// in every remaining slot.
    pub fn validate(&self) -> Result<()> {
        let n = self.shape.num_blocks as i32;
        for row in 0..self.shape.rows() {
            let (z, i, h) = self.shape.split_row(row);
            let corrupt = |reason: String| Error::PlanCorruption {
                batch: z,
                query_block: i,
                head: h,
                reason,
            };
            let c = self.count(z, i, h);
            if c < 1 || c as usize > i + 1 {
                return Err(corrupt(format!("count {c} outside 1..={}", i + 1)));
            }
            let listed = self.listed_blocks(z, i, h);
            if let Some(&bad) = listed.iter().find(|&&j| j < 0 || j > i as i32) {
                return Err(corrupt(format!("listed block {bad} is not causal")));
            }
            if listed.windows(2).any(|w| w[0] >= w[1]) {
                return Err(corrupt(format!("listed blocks {listed:?} not strictly increasing")));
            }
            if listed.last() != Some(&(i as i32)) {
                return Err(corrupt("diagonal block missing".into()));
            }
            if let Some(k) = (c as usize..self.shape.num_blocks).find(|&k| self.index(z, i, k, h) != n) {
                return Err(corrupt(format!(
                    "slot {k} holds {} instead of the fill value {n}",
                    self.index(z, i, k, h)
                )));
            }
        }
        Ok(())
    }

    /// Recovers the mask the plan was compressed from.
    pub fn to_mask(&self) -> Result<ActiveMask> {
        self.validate()?;
        let mut active = vec![false; self.shape.numel()];
        for row in 0..self.shape.rows() {
            let (z, i, h) = self.shape.split_row(row);
            for j in self.listed_blocks(z, i, h) {
                active[self.shape.index(z, i, j as usize, h)] = true;
            }
        }
        ActiveMask::new(self.shape, active)
    }

    /// Σ C: the number of (query tile, key block) visits an evaluator makes.
    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c.max(0) as u64).sum()
    }
}

/// Fill-and-sort compaction of a mask into a plan.
pub fn compress_indices(mask: &ActiveMask) -> SparseBlockPlan {
    let shape = mask.shape();
    let n = shape.num_blocks;
    let mut indices = vec![n as i32; shape.numel()];
    let mut counts = vec![0i32; shape.rows()];
    for (row, count) in counts.iter_mut().enumerate() {
        let (z, i, h) = shape.split_row(row);
        // Ascending scan followed by fill equals a stable sort of
        // {j if active else N}.
        let mut c = 0;
        for j in 0..n {
            if mask.get(z, i, j, h) {
                indices[shape.index(z, i, c, h)] = j as i32;
                c += 1;
            }
        }
        *count = c as i32;
    }
    SparseBlockPlan {
        shape,
        indices,
        counts,
    }
}

/// Structural blocks retained regardless of score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Retention {
    pub sink_blocks: usize,
    pub window_blocks: usize,
}

impl Retention {
    /// No structural retention; isolates the scoring rule.
    pub const NONE: Retention = Retention {
        sink_blocks: 0,
        window_blocks: 0,
    };

    pub fn from_config(config: &PipelineConfig) -> Self {
        Retention {
            sink_blocks: config.sink_blocks(),
            window_blocks: config.window_blocks(),
        }
    }

    #[inline]
    pub fn keeps(&self, query_block: usize, key_block: usize) -> bool {
        key_block < self.sink_blocks || query_block - key_block < self.window_blocks
    }
}

/// Counts score comparisons made by the threshold rule.
pub trait ComparisonCounter {
    fn tick(&mut self);
}

impl ComparisonCounter for () {
    #[inline]
    fn tick(&mut self) {}
}

impl ComparisonCounter for usize {
    #[inline]
    fn tick(&mut self) {
        *self += 1;
    }
}

/// Max-threshold selection for one causal row `scores[0..=i]`.
///
/// One max-reduction plus one comparison per block; no sorting.
pub fn max_threshold_row<C: ComparisonCounter>(
    scores: &[f32],
    alpha: f32,
    retention: Retention,
    counter: &mut C,
) -> Vec<bool> {
    let i = scores.len() - 1;
    let mut max_val = f32::NEG_INFINITY;
    for &s in scores {
        counter.tick();
        if s > max_val {
            max_val = s;
        }
    }
    let thresh = max_val * alpha;
    scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            counter.tick();
            s >= thresh || retention.keeps(i, j)
        })
        .collect()
}

/// Causal block indices sorted by descending score, ties to the lower index.
fn ranked(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Keeps the `min(k, i+1)` highest-scoring blocks of `scores[0..=i]`.
pub fn topk_row(scores: &[f32], k: usize, retention: Retention) -> Vec<bool> {
    let i = scores.len() - 1;
    let mut active: Vec<bool> = (0..scores.len()).map(|j| retention.keeps(i, j)).collect();
    for j in ranked(scores).into_iter().take(k) {
        active[j] = true;
    }
    active
}

/// Keeps the shortest descending-score prefix whose renormalized mass
/// reaches `p`. Zero-score blocks are never added by the score rule.
pub fn topp_row(scores: &[f32], p: f32, retention: Retention) -> Vec<bool> {
    const SLACK: f64 = 1e-9;
    let i = scores.len() - 1;
    let mut active: Vec<bool> = (0..scores.len()).map(|j| retention.keeps(i, j)).collect();
    let total: f64 = scores.iter().map(|&s| s as f64).sum();
    if total <= 0.0 {
        return active;
    }
    let mut cum = 0.0f64;
    for j in ranked(scores) {
        if scores[j] <= 0.0 || cum >= p as f64 - SLACK {
            break;
        }
        active[j] = true;
        cum += scores[j] as f64 / total;
    }
    active
}

/// A scoring rule for block selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    MaxThreshold { alpha: f32 },
    TopK { k: usize },
    TopP { p: f32 },
}

impl SelectionRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionRule::MaxThreshold { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => {
                Err(Error::config(format!("alpha must be >= 0, got {alpha}")))
            }
            SelectionRule::TopK { k: 0 } => Err(Error::config("k must be >= 1")),
            SelectionRule::TopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::config(format!("p must lie in (0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }

    /// Applies the rule to one causal row.
    pub fn select_row(&self, scores: &[f32], retention: Retention) -> Vec<bool> {
        match *self {
            SelectionRule::MaxThreshold { alpha } => max_threshold_row(scores, alpha, retention, &mut ()),
            SelectionRule::TopK { k } => topk_row(scores, k, retention),
            SelectionRule::TopP { p } => topp_row(scores, p, retention),
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            SelectionRule::MaxThreshold { .. } => "max",
            SelectionRule::TopK { .. } => "topk",
            SelectionRule::TopP { .. } => "topp",
        }
    }

    /// The rule's parameter as the nearest f64 to its shortest decimal
    /// form, so `0.12f32` reports as `0.12`.
    pub fn parameter(&self) -> f64 {
        let widen = |x: f32| x.to_string().parse().unwrap_or(x as f64);
        match *self {
            SelectionRule::MaxThreshold { alpha } => widen(alpha),
            SelectionRule::TopK { k } => k as f64,
            SelectionRule::TopP { p } => widen(p),
        }
    }
}

/// Score-rule selections in score-map layout (`batch × heads × M × N`),
/// without structural retention. Used for recall measurements.
pub fn score_selection(scores: &BlockScoreMap, rule: SelectionRule) -> Vec<bool> {
    let ms = scores.shape();
    let rows = par::map_range(ms.rows(), |row| {
        let (z, h, i) = ms.split_row(row);
        rule.select_row(scores.causal_row(z, h, i), Retention::NONE)
    });
    let mut out = vec![false; ms.numel()];
    for (row, sel) in rows.into_iter().enumerate() {
        let base = row * ms.num_blocks;
        out[base..base + sel.len()].copy_from_slice(&sel);
    }
    out
}

/// Applies `rule` plus structural retention to every row of a score map.
pub fn select(scores: &BlockScoreMap, rule: SelectionRule, retention: Retention) -> Result<ActiveMask> {
    rule.validate()?;
    if retention.window_blocks == 0 {
        return Err(Error::config("window must retain at least the diagonal block"));
    }
    let ms = scores.shape();
    let shape = PlanShape::new(ms.batch, ms.num_blocks, ms.heads);
    let rows = par::map_range(ms.rows(), |row| {
        let (z, h, i) = ms.split_row(row);
        rule.select_row(scores.causal_row(z, h, i), retention)
    });
    let mut active = vec![false; shape.numel()];
    for (row, sel) in rows.into_iter().enumerate() {
        let (z, h, i) = ms.split_row(row);
        for (j, on) in sel.into_iter().enumerate() {
            active[shape.index(z, i, j, h)] = on;
        }
    }
    ActiveMask::new(shape, active)
}

pub fn max_threshold_mask(scores: &BlockScoreMap, config: &PipelineConfig) -> Result<ActiveMask> {
    config.validate()?;
    select(
        scores,
        SelectionRule::MaxThreshold { alpha: config.alpha },
        Retention::from_config(config),
    )
}

pub fn topk_select(scores: &BlockScoreMap, k: usize, config: &PipelineConfig) -> Result<ActiveMask> {
    config.validate()?;
    select(scores, SelectionRule::TopK { k }, Retention::from_config(config))
}

pub fn topp_select(scores: &BlockScoreMap, p: f32, config: &PipelineConfig) -> Result<ActiveMask> {
    config.validate()?;
    select(scores, SelectionRule::TopP { p }, Retention::from_config(config))
}

/// Fraction of causal block pairs the plan computes.
pub fn density(plan: &SparseBlockPlan, grid: &BlockGrid) -> Result<f64> {
    let shape = plan.shape();
    if shape.num_blocks != grid.num_blocks() {
        return Err(Error::validation(format!(
            "plan has {} blocks, grid has {}",
            shape.num_blocks,
            grid.num_blocks()
        )));
    }
    Ok(plan.total_count() as f64 / shape.causal_pairs() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::MapShape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NO_SINK_ONE_WINDOW: Retention = Retention {
        sink_blocks: 0,
        window_blocks: 1,
    };

    fn selected(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect()
    }

    #[test]
    fn threshold_row_hand_enumeration() {
        let row = [0.50, 0.30, 0.05, 0.15];
        let sel = max_threshold_row(&row, 0.5, NO_SINK_ONE_WINDOW, &mut ());
        assert_eq!(selected(&sel), vec![0, 1, 3]);
    }

    #[test]
    fn zero_alpha_keeps_everything() {
        let row = [0.0, 0.7, 0.0, 0.3, 0.0];
        let sel = max_threshold_row(&row, 0.0, NO_SINK_ONE_WINDOW, &mut ());
        assert!(sel.iter().all(|&a| a));
    }

    #[test]
    fn unit_alpha_keeps_argmax_and_diagonal() {
        let row = [0.1, 0.2, 0.6, 0.05, 0.05];
        let sel = max_threshold_row(&row, 1.0, NO_SINK_ONE_WINDOW, &mut ());
        assert_eq!(selected(&sel), vec![2, 4]);
    }

    #[test]
    fn threshold_is_linear_in_comparisons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 17, 256] {
            let row: Vec<f32> = (0..n).map(|_| rng.random()).collect();
            let mut count = 0usize;
            max_threshold_row(&row, 0.3, NO_SINK_ONE_WINDOW, &mut count);
            assert_eq!(count, 2 * n);
        }
    }

    #[test]
    fn sink_and_window_always_kept() {
        let r = Retention {
            sink_blocks: 2,
            window_blocks: 3,
        };
        let mut row = vec![0.01f32; 10];
        row[5] = 1.0;
        let sel = max_threshold_row(&row, 1.0, r, &mut ());
        assert_eq!(selected(&sel), vec![0, 1, 5, 7, 8, 9]);
    }

    #[test]
    fn compress_direct_fill() {
        let shape = PlanShape::new(1, 4, 1);
        let mask = ActiveMask::from_fn(shape, |_, i, j, _| i == 3 && (j == 0 || j == 3) || i == j).unwrap();
        let plan = compress_indices(&mask);
        assert_eq!(plan.count(0, 3, 0), 2);
        assert_eq!((0..4).map(|k| plan.index(0, 3, k, 0)).collect::<Vec<_>>(), vec![0, 3, 4, 4]);
        plan.validate().unwrap();
    }

    #[test]
    fn compress_all_active() {
        let shape = PlanShape::new(1, 3, 1);
        let plan = compress_indices(&ActiveMask::full_causal(shape));
        assert_eq!(plan.count(0, 2, 0), 3);
        assert_eq!((0..3).map(|k| plan.index(0, 2, k, 0)).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn compaction_equals_stable_sort() {
        let shape = PlanShape::new(2, 9, 3);
        let mask = ActiveMask::from_fn(shape, |_, i, j, _| j == i || (j < i && rng_bit(i, j))).unwrap();
        let plan = compress_indices(&mask);
        for row in 0..shape.rows() {
            let (z, i, h) = shape.split_row(row);
            let mut keyed: Vec<i32> = (0..9).map(|j| if mask.get(z, i, j, h) { j as i32 } else { 9 }).collect();
            keyed.sort();
            let got: Vec<i32> = (0..9).map(|k| plan.index(z, i, k, h)).collect();
            assert_eq!(got, keyed);
        }
    }

    fn rng_bit(i: usize, j: usize) -> bool {
        (i * 31 + j * 17).is_multiple_of(3)
    }

    #[test]
    fn validate_catches_corruption() {
        let shape = PlanShape::new(1, 4, 1);
        let good = compress_indices(&ActiveMask::diagonal(shape));
        good.validate().unwrap();

        let mut p = good.clone();
        p.set_count(0, 2, 0, 2); // fill value now inside the listed prefix
        assert!(matches!(p.validate(), Err(Error::PlanCorruption { .. })));

        let mut p = good.clone();
        p.set_index(0, 1, 2, 0, 0); // garbage past the count
        assert!(matches!(p.validate(), Err(Error::PlanCorruption { .. })));

        let mut p = good.clone();
        p.set_index(0, 1, 0, 0, 0); // diagonal missing
        assert!(matches!(p.validate(), Err(Error::PlanCorruption { .. })));

        let mut p = good;
        p.set_count(0, 0, 0, 0);
        assert!(matches!(p.validate(), Err(Error::PlanCorruption { .. })));
    }

    #[test]
    fn mask_constructor_rejects_invalid_masks() {
        let shape = PlanShape::new(1, 3, 1);
        assert!(ActiveMask::from_fn(shape, |_, i, j, _| j <= i + 1).is_err());
        assert!(ActiveMask::from_fn(shape, |_, i, j, _| j < i).is_err());
    }

    #[test]
    fn topk_picks_two_largest() {
        let sel = topk_row(&[0.50, 0.30, 0.05, 0.15], 2, Retention::NONE);
        assert_eq!(selected(&sel), vec![0, 1]);
    }

    #[test]
    fn topk_saturates() {
        let sel = topk_row(&[0.2, 0.3, 0.5], 7, Retention::NONE);
        assert!(sel.iter().all(|&a| a));
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let sel = topk_row(&[0.25, 0.25, 0.25, 0.25], 2, Retention::NONE);
        assert_eq!(selected(&sel), vec![0, 1]);
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let k = rng.random_range(1..12);
            // Coarse values force ties.
            let row: Vec<f32> = (0..n).map(|_| rng.random_range(0..6) as f32 / 10.0).collect();
            let mut pairs: Vec<(f32, usize)> = row.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = pairs.iter().take(k).map(|p| p.1).collect();
            want.sort();
            assert_eq!(selected(&topk_row(&row, k, Retention::NONE)), want);
        }
    }

    #[test]
    fn topp_hand_cumulative_sum() {
        let sel = topp_row(&[0.5, 0.3, 0.15, 0.05], 0.9, Retention::NONE);
        assert_eq!(selected(&sel), vec![0, 1, 2]);
        // Renormalization: same row scaled by 0.99 selects the same blocks.
        let sel = topp_row(&[0.495, 0.297, 0.1485, 0.0495], 0.9, Retention::NONE);
        assert_eq!(selected(&sel), vec![0, 1, 2]);
    }

    #[test]
    fn topp_full_mass_keeps_nonzero_blocks() {
        let sel = topp_row(&[0.3, 0.0, 0.2, 0.5, 0.0], 1.0, Retention::NONE);
        assert_eq!(selected(&sel), vec![0, 2, 3]);
    }

    #[test]
    fn single_block_row_always_selected() {
        for p in [0.01, 0.5, 1.0] {
            assert_eq!(selected(&topp_row(&[1.0], p, Retention::NONE)), vec![0]);
        }
        assert_eq!(selected(&topk_row(&[1.0], 1, Retention::NONE)), vec![0]);
        assert_eq!(selected(&max_threshold_row(&[1.0], 1.0, Retention::NONE, &mut ())), vec![0]);
    }

    #[test]
    fn rule_validation() {
        assert!(SelectionRule::TopK { k: 0 }.validate().is_err());
        assert!(SelectionRule::TopP { p: 0.0 }.validate().is_err());
        assert!(SelectionRule::TopP { p: 1.5 }.validate().is_err());
        assert!(SelectionRule::MaxThreshold { alpha: -1.0 }.validate().is_err());
        assert!(SelectionRule::TopP { p: 1.0 }.validate().is_ok());
    }

    fn map_from_rows(rows: &[Vec<f32>]) -> BlockScoreMap {
        let n = rows.len();
        let mut score = vec![0.0; n * n];
        for (i, r) in rows.iter().enumerate() {
            score[i * n..i * n + r.len()].copy_from_slice(r);
        }
        BlockScoreMap::from_scores(MapShape::new(1, 1, n), score).unwrap()
    }

    #[test]
    fn map_level_selection_and_density() {
        let map = map_from_rows(&[
            vec![1.0],
            vec![0.9, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.50, 0.30, 0.05, 0.15],
        ]);
        let cfg = PipelineConfig {
            block_size: 1,
            alpha: 0.5,
            sink_tokens: 0,
            window_tokens: 1,
            ..Default::default()
        };
        let mask = max_threshold_mask(&map, &cfg).unwrap();
        assert_eq!(mask.row_blocks(0, 3, 0), vec![0, 1, 3]);
        assert_eq!(mask.row_blocks(0, 2, 0), vec![2]);
        let plan = compress_indices(&mask);
        let grid = BlockGrid::new(4, 1).unwrap();
        // 1 + 2 + 1 + 3 active of 10 causal pairs.
        assert!((density(&plan, &grid).unwrap() - 0.7).abs() < 1e-12);

        let full = compress_indices(&ActiveMask::full_causal(plan.shape()));
        assert_eq!(density(&full, &grid).unwrap(), 1.0);
        let diag = compress_indices(&ActiveMask::diagonal(plan.shape()));
        assert!((density(&diag, &grid).unwrap() - 2.0 / 5.0).abs() < 1e-12);

        let k = topk_select(&map, 1, &cfg).unwrap();
        assert_eq!(k.row_blocks(0, 3, 0), vec![0, 3]);
        let p = topp_select(&map, 0.75, &cfg).unwrap();
        assert_eq!(p.row_blocks(0, 3, 0), vec![0, 1, 3]);
    }

    #[test]
    fn zero_window_rejected() {
        let map = map_from_rows(&[vec![1.0]]);
        assert!(select(&map, SelectionRule::TopK { k: 1 }, Retention::NONE).is_err());
    }

    fn arb_row() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f32..1.0, 1..48)
    }

    proptest! {
        #[test]
        fn larger_alpha_selects_subset(row in arb_row(), a in 0.0f32..1.0, b in 0.0f32..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = Retention { sink_blocks: 1, window_blocks: 2 };
            let s_lo = max_threshold_row(&row, lo, r, &mut ());
            let s_hi = max_threshold_row(&row, hi, r, &mut ());
            for (x, y) in s_lo.iter().zip(&s_hi) {
                prop_assert!(!*y || *x);
            }
        }

        #[test]
        fn row_max_survives(row in arb_row(), alpha in 0.0f32..=1.0) {
            let sel = max_threshold_row(&row, alpha, Retention::NONE, &mut ());
            prop_assert!(sel[crate::metrics::argmax(&row).unwrap()]);
        }

        #[test]
        fn compress_round_trips(bits in prop::collection::vec(any::<bool>(), 2 * 7 * 7 * 2)) {
            let shape = PlanShape::new(2, 7, 2);
            let mask = ActiveMask::from_fn(shape, |z, i, j, h| {
                j == i || (j < i && bits[shape.index(z, i, j, h)])
            }).unwrap();
            let plan = compress_indices(&mask);
            plan.validate().unwrap();
            prop_assert_eq!(plan.to_mask().unwrap(), mask);
        }
    }
}
