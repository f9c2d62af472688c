//! Block-sparse causal attention driven by a compacted block plan, plus the
//! dense reference.
//!
//! The sparse evaluator walks only the `C` blocks listed for each query tile
//! and keeps a per-query running maximum `m`, normalizer `ℓ`, and
//! accumulator in base 2:
//!
//! ```text
//! m'  = max(m, max_s x_s)
//! ℓ'  = ℓ · 2^(m − m') + Σ_s 2^(x_s − m')
//! acc = acc · 2^(m − m') + Σ_s 2^(x_s − m') · v_s
//! ```
//!
//! with `x_s = (q · k_s) · τ · log₂e`. Finalization stores `O = acc / ℓ` and
//! `lse = m + log₂ ℓ`. Inside the diagonal block keys after the query token
//! are masked to `−∞` before the max-reduction.

use std::f32::consts::{LN_2, LOG2_E};

use crate::discovery::dot;
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::par;
use crate::selection::SparseBlockPlan;
use crate::tensor::{check_compatible, BatchShape, RawTensor, SequenceBatch};

/// Attention result `O` (`batch × heads × seq_len × head_dim`) and per-row
/// base-2 log-sum-exp (`batch × heads × seq_len`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    shape: BatchShape,
    output: Vec<f32>,
    lse: Vec<f32>,
}

impl AttentionOutput {
    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    pub fn output(&self) -> &[f32] {
        &self.output
    }

    /// Base-2 log-sum-exp of the scaled logits per query row.
    pub fn lse(&self) -> &[f32] {
        &self.lse
    }

    pub fn lse_natural(&self) -> Vec<f32> {
        self.lse.iter().map(|x| x * LN_2).collect()
    }

    pub fn output_row(&self, batch: usize, head: usize, token: usize) -> &[f32] {
        let s = self.shape;
        let d = s.head_dim;
        let start = ((batch * s.heads + head) * s.seq_len + token) * d;
        &self.output[start..start + d]
    }

    pub fn lse_at(&self, batch: usize, head: usize, token: usize) -> f32 {
        let s = self.shape;
        self.lse[(batch * s.heads + head) * s.seq_len + token]
    }

    /// `(O, lse)` as container tensors; `natural_log` converts lse to base e.
    pub fn to_raw(&self, natural_log: bool) -> (RawTensor, RawTensor) {
        let s = self.shape;
        let lse = if natural_log { self.lse_natural() } else { self.lse.clone() };
        (
            RawTensor::f32(s.dims().to_vec(), self.output.clone()).expect("output dims match"),
            RawTensor::f32(vec![s.batch, s.heads, s.seq_len], lse).expect("lse dims match"),
        )
    }
}

/// Σ C over every row: the exact number of block visits the sparse evaluator
/// performs.
pub fn visit_count(plan: &SparseBlockPlan) -> u64 {
    plan.total_count()
}

/// Checks the parts of a plan the evaluator relies on. Listed blocks may be
/// in any order but must be distinct, causal, and include the diagonal.
fn check_plan(plan: &SparseBlockPlan, shape: BatchShape, grid: &BlockGrid) -> Result<()> {
    let ps = plan.shape();
    if (ps.batch, ps.heads, ps.num_blocks) != (shape.batch, shape.heads, grid.num_blocks()) {
        return Err(Error::validation(format!(
            "plan {:?} does not match batch {}, heads {}, {} blocks",
            ps.index_dims(),
            shape.batch,
            shape.heads,
            grid.num_blocks()
        )));
    }
    let n = ps.num_blocks;
    let mut seen = vec![false; n];
    for row in 0..ps.rows() {
        let (z, i, h) = ps.split_row(row);
        let corrupt = |reason: String| Error::PlanCorruption {
            batch: z,
            query_block: i,
            head: h,
            reason,
        };
        let c = plan.count(z, i, h);
        if c < 1 || c as usize > i + 1 {
            return Err(corrupt(format!("count {c} outside 1..={}", i + 1)));
        }
        seen.iter_mut().for_each(|s| *s = false);
        for k in 0..c as usize {
            let j = plan.index(z, i, k, h);
            if j < 0 || j as usize >= n {
                return Err(corrupt(format!("slot {k} holds out-of-range block {j}")));
            }
            let j = j as usize;
            if j > i {
                return Err(corrupt(format!("slot {k} lists non-causal block {j}")));
            }
            if seen[j] {
                return Err(corrupt(format!("block {j} listed twice")));
            }
            seen[j] = true;
        }
        if !seen[i] {
            return Err(corrupt("diagonal block not listed".into()));
        }
    }
    Ok(())
}

/// Evaluates attention over the plan's listed blocks only.
pub fn block_sparse_attention(
    queries: &SequenceBatch,
    keys: &SequenceBatch,
    values: &SequenceBatch,
    plan: &SparseBlockPlan,
    grid: &BlockGrid,
    scale: f32,
) -> Result<AttentionOutput> {
    block_sparse_attention_counted(queries, keys, values, plan, grid, scale).map(|(out, _)| out)
}

/// Like [`block_sparse_attention`], also returning the number of key blocks
/// actually visited.
pub fn block_sparse_attention_counted(
    queries: &SequenceBatch,
    keys: &SequenceBatch,
    values: &SequenceBatch,
    plan: &SparseBlockPlan,
    grid: &BlockGrid,
    scale: f32,
) -> Result<(AttentionOutput, u64)> {
    let shape = check_compatible(&[queries, keys, values])?;
    if shape.seq_len != grid.seq_len() {
        return Err(Error::validation(format!(
            "tensors have {} tokens, grid covers {}",
            shape.seq_len,
            grid.seq_len()
        )));
    }
    check_plan(plan, shape, grid)?;

    let d = shape.head_dim;
    let l = shape.seq_len;
    let b = grid.block_size();
    let m_blocks = grid.num_blocks();
    let logit_scale = scale * LOG2_E;
    let mut output = vec![0.0f32; shape.numel()];
    let mut lse = vec![0.0f32; shape.slabs() * l];

    // One work item per (batch, head, query tile).
    let mut items = Vec::with_capacity(shape.slabs() * m_blocks);
    for (zh, (o_slab, lse_slab)) in output.chunks_mut(l * d).zip(lse.chunks_mut(l)).enumerate() {
        for (i, (o_tile, lse_tile)) in o_slab.chunks_mut(b * d).zip(lse_slab.chunks_mut(b)).enumerate() {
            items.push((zh, i, o_tile, lse_tile));
        }
    }

    let visits = par::map(items, |(zh, i, acc, lse_tile)| {
        let (z, h) = (zh / shape.heads, zh % shape.heads);
        let (qs, ks, vs) = (queries.slab(z, h), keys.slab(z, h), values.slab(z, h));
        let tile = grid.block_range(i);
        let rows = tile.len();
        let mut run_max = vec![f32::NEG_INFINITY; rows];
        let mut run_sum = vec![0.0f32; rows];
        let mut logits = Vec::with_capacity(b);
        let listed = plan.count(z, i, h) as usize;

        for slot in 0..listed {
            let j = plan.index(z, i, slot, h) as usize;
            let is_diag = j == i;
            let key_range = grid.block_range(j);
            for r in 0..rows {
                let t = tile.start + r;
                let q = &qs[t * d..(t + 1) * d];
                logits.clear();
                logits.extend(key_range.clone().map(|s| {
                    if is_diag && s > t {
                        f32::NEG_INFINITY
                    } else {
                        dot(q, &ks[s * d..(s + 1) * d]) * logit_scale
                    }
                }));
                let block_max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let m_new = run_max[r].max(block_max);
                if m_new == f32::NEG_INFINITY {
                    continue;
                }
                // 2^(−∞ − m_new) = 0 resets the empty initial state.
                let rescale = (run_max[r] - m_new).exp2();
                let acc_row = &mut acc[r * d..(r + 1) * d];
                acc_row.iter_mut().for_each(|a| *a *= rescale);
                let mut block_sum = 0.0f32;
                for (x, s) in logits.iter().zip(key_range.clone()) {
                    let p = (x - m_new).exp2();
                    if p == 0.0 {
                        continue;
                    }
                    block_sum += p;
                    for (a, v) in acc_row.iter_mut().zip(&vs[s * d..(s + 1) * d]) {
                        *a += p * v;
                    }
                }
                run_sum[r] = run_sum[r] * rescale + block_sum;
                run_max[r] = m_new;
            }
        }

        for r in 0..rows {
            let inv = 1.0 / run_sum[r];
            acc[r * d..(r + 1) * d].iter_mut().for_each(|a| *a *= inv);
            lse_tile[r] = run_max[r] + run_sum[r].log2();
        }
        listed as u64
    });

    Ok((AttentionOutput { shape, output, lse }, visits.into_iter().sum()))
}

/// Exact causal softmax attention, materializing each query's logit row.
pub fn dense_attention(
    queries: &SequenceBatch,
    keys: &SequenceBatch,
    values: &SequenceBatch,
    scale: f32,
) -> Result<AttentionOutput> {
    let shape = check_compatible(&[queries, keys, values])?;
    let d = shape.head_dim;
    let l = shape.seq_len;
    let logit_scale = scale * LOG2_E;
    let mut output = vec![0.0f32; shape.numel()];
    let mut lse = vec![0.0f32; shape.slabs() * l];

    let items: Vec<_> = output.chunks_mut(d).zip(lse.iter_mut()).enumerate().collect();
    par::for_each(items, |(row, (out, lse_out))| {
        let (zh, t) = (row / l, row % l);
        let (z, h) = (zh / shape.heads, zh % shape.heads);
        let (qs, ks, vs) = (queries.slab(z, h), keys.slab(z, h), values.slab(z, h));
        let q = &qs[t * d..(t + 1) * d];
        let mut logits: Vec<f32> = (0..=t).map(|s| dot(q, &ks[s * d..(s + 1) * d]) * logit_scale).collect();
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for x in logits.iter_mut() {
            *x = (*x - max).exp2();
            total += *x;
        }
        for (s, p) in logits.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&vs[s * d..(s + 1) * d]) {
                *o += p * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        *lse_out = max + total.log2();
    });

    Ok(AttentionOutput { shape, output, lse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{compress_indices, ActiveMask, PlanShape};
    use crate::tensor::Role;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(role: Role, shape: BatchShape, seed: u64) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        SequenceBatch::new(role, shape, data).unwrap()
    }

    fn qkv(shape: BatchShape, seed: u64) -> (SequenceBatch, SequenceBatch, SequenceBatch) {
        (
            random(Role::Query, shape, seed),
            random(Role::Key, shape, seed + 1),
            random(Role::Value, shape, seed + 2),
        )
    }

    fn full_plan(shape: BatchShape, grid: &BlockGrid) -> SparseBlockPlan {
        compress_indices(&ActiveMask::full_causal(PlanShape::new(
            shape.batch,
            grid.num_blocks(),
            shape.heads,
        )))
    }

    /// Triple loop in f64 with natural exponentials; lse converted to base 2.
    fn naive(q: &SequenceBatch, k: &SequenceBatch, v: &SequenceBatch, scale: f64) -> (Vec<f64>, Vec<f64>) {
        let s = q.shape();
        let mut out = Vec::new();
        let mut lse = Vec::new();
        for z in 0..s.batch {
            for h in 0..s.heads {
                for t in 0..s.seq_len {
                    let w: Vec<f64> = (0..=t)
                        .map(|j| {
                            let (a, b) = (q.row(z, h, t), k.row(z, h, j));
                            (0..s.head_dim).map(|c| a[c] as f64 * b[c] as f64).sum::<f64>() * scale
                        })
                        .collect();
                    let total: f64 = w.iter().map(|x| x.exp()).sum();
                    for c in 0..s.head_dim {
                        out.push((0..=t).map(|j| w[j].exp() * v.row(z, h, j)[c] as f64).sum::<f64>() / total);
                    }
                    lse.push(total.ln() / std::f64::consts::LN_2);
                }
            }
        }
        (out, lse)
    }

    #[test]
    fn uniform_pair_averages_values() {
        let s = BatchShape::new(1, 1, 2, 2);
        let q = SequenceBatch::new(Role::Query, s, vec![0.0; 4]).unwrap();
        let k = SequenceBatch::new(Role::Key, s, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let v = SequenceBatch::new(Role::Value, s, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = BlockGrid::new(2, 2).unwrap();
        let out = block_sparse_attention(&q, &k, &v, &full_plan(s, &g), &g, 1.0).unwrap();
        assert_eq!(out.output_row(0, 0, 1), &[0.5, 0.5]);
        assert!((out.lse_at(0, 0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_key_lse_is_its_logit() {
        let s = BatchShape::new(1, 1, 1, 3);
        let q = SequenceBatch::new(Role::Query, s, vec![0.5, -1.0, 2.0]).unwrap();
        let k = SequenceBatch::new(Role::Key, s, vec![1.0, 1.0, 1.0]).unwrap();
        let v = SequenceBatch::new(Role::Value, s, vec![7.0, 8.0, 9.0]).unwrap();
        let g = BlockGrid::new(1, 4).unwrap();
        for out in [
            block_sparse_attention(&q, &k, &v, &full_plan(s, &g), &g, 0.5).unwrap(),
            dense_attention(&q, &k, &v, 0.5).unwrap(),
        ] {
            assert!((out.lse_at(0, 0, 0) - 1.5 * 0.5 * LOG2_E).abs() < 1e-6);
            assert_eq!(out.output_row(0, 0, 0), v.row(0, 0, 0));
        }
    }

    #[test]
    fn dense_first_token_ignores_future() {
        let s = BatchShape::new(1, 1, 5, 2);
        let (q, k, v) = qkv(s, 10);
        let out = dense_attention(&q, &k, &v, 1.0).unwrap();
        assert_eq!(out.output_row(0, 0, 0), v.row(0, 0, 0));
        let k2 = SequenceBatch::new(Role::Key, s, {
            let mut d = k.data().to_vec();
            d[2..].iter_mut().for_each(|x| *x = 50.0);
            d
        })
        .unwrap();
        assert_eq!(dense_attention(&q, &k2, &v, 1.0).unwrap().output_row(0, 0, 0), v.row(0, 0, 0));
    }

    #[test]
    fn dense_matches_triple_loop() {
        let s = BatchShape::new(1, 1, 8, 4);
        let (q, k, v) = qkv(s, 20);
        let out = dense_attention(&q, &k, &v, 0.5).unwrap();
        let (o, lse) = naive(&q, &k, &v, 0.5);
        for (a, b) in out.output().iter().zip(&o) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        for (a, b) in out.lse().iter().zip(&lse) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_plan_matches_dense_on_ragged_grid() {
        let s = BatchShape::new(2, 2, 37, 5);
        let (q, k, v) = qkv(s, 30);
        let g = BlockGrid::new(37, 8).unwrap();
        let (sparse, visits) = block_sparse_attention_counted(&q, &k, &v, &full_plan(s, &g), &g, 0.4).unwrap();
        let dense = dense_attention(&q, &k, &v, 0.4).unwrap();
        assert_eq!(visits, 2 * 2 * 5 * 6 / 2);
        for (a, b) in sparse.output().iter().zip(dense.output()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in sparse.lse().iter().zip(dense.lse()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn visit_count_closed_forms() {
        let ps = PlanShape::new(2, 6, 3);
        assert_eq!(visit_count(&compress_indices(&ActiveMask::full_causal(ps))), 2 * 3 * 6 * 7 / 2);
        assert_eq!(visit_count(&compress_indices(&ActiveMask::diagonal(ps))), 2 * 3 * 6);
    }

    #[test]
    fn diagonal_only_plan_is_local_attention() {
        let s = BatchShape::new(1, 1, 12, 3);
        let (q, k, v) = qkv(s, 40);
        let g = BlockGrid::new(12, 4).unwrap();
        let plan = compress_indices(&ActiveMask::diagonal(PlanShape::new(1, 3, 1)));
        let out = block_sparse_attention(&q, &k, &v, &plan, &g, 1.0).unwrap();
        // Token 4 starts block 1 and so only sees itself.
        assert_eq!(out.output_row(0, 0, 4), v.row(0, 0, 4));
    }

    #[test]
    fn corrupted_plans_rejected() {
        let s = BatchShape::new(1, 1, 12, 3);
        let (q, k, v) = qkv(s, 50);
        let g = BlockGrid::new(12, 4).unwrap();
        let good = full_plan(s, &g);

        let mut p = compress_indices(&ActiveMask::diagonal(PlanShape::new(1, 3, 1)));
        p.set_count(0, 2, 0, 2); // fill value 3 now listed
        let err = block_sparse_attention(&q, &k, &v, &p, &g, 1.0).unwrap_err();
        assert!(matches!(err, Error::PlanCorruption { query_block: 2, .. }), "{err}");

        let mut p = good.clone();
        p.set_index(0, 2, 1, 0, 2); // duplicate
        assert!(matches!(block_sparse_attention(&q, &k, &v, &p, &g, 1.0), Err(Error::PlanCorruption { .. })));

        let mut p = good.clone();
        p.set_count(0, 1, 0, 1); // diagonal dropped
        assert!(matches!(block_sparse_attention(&q, &k, &v, &p, &g, 1.0), Err(Error::PlanCorruption { .. })));

        let mut p = good;
        p.set_index(0, 0, 0, 0, -1);
        assert!(matches!(block_sparse_attention(&q, &k, &v, &p, &g, 1.0), Err(Error::PlanCorruption { .. })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (q, k, _) = qkv(BatchShape::new(1, 1, 8, 2), 60);
        let v = random(Role::Value, BatchShape::new(1, 1, 8, 3), 63);
        let g = BlockGrid::new(8, 4).unwrap();
        assert!(matches!(dense_attention(&q, &k, &v, 1.0), Err(Error::Validation(_))));
        let plan = compress_indices(&ActiveMask::full_causal(PlanShape::new(1, 2, 1)));
        assert!(matches!(block_sparse_attention(&q, &k, &v, &plan, &g, 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn natural_log_conversion() {
        let s = BatchShape::new(1, 1, 3, 2);
        let (q, k, v) = qkv(s, 70);
        let out = dense_attention(&q, &k, &v, 1.0).unwrap();
        let (_, raw) = out.to_raw(true);
        let (_, nat) = raw.into_f32().unwrap();
        for (n, b2) in nat.iter().zip(out.lse()) {
            assert!((n - b2 * LN_2).abs() < 1e-7);
        }
    }
}
