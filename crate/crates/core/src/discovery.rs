//! Block-level attention-importance estimation.
//!
//! Every key block is summarized by the arithmetic mean of its key vectors.
//! For query tile `I` and pooled key `k̄_J` the per-query logits
//! `x_i = (q_i · k̄_J) · τ · log₂e` are reduced along the query axis into a
//! local maximum `m_{I,J}` and an energy `S_{I,J} = Σ_i 2^(x_i − m_{I,J})`.
//! A second pass rescales each row to its global maximum
//! `M_I = max_J m_{I,J}` and normalizes:
//!
//! ```text
//! S'_{I,J}    = S_{I,J} · 2^(m_{I,J} − M_I)
//! Score_{I,J} = S'_{I,J} / (Σ_K S'_{I,K} + ε)
//! ```
//!
//! Only `J <= I` is populated. Non-causal entries hold `S = 0`,
//! `m = −∞`, `Score = 0`.
//!
//! Because `q · k̄ = mean_i(q · k_i)`, the pooled probe `2^(q·k̄)` is the
//! geometric mean of the per-key exponentials and therefore lower-bounds
//! their arithmetic mean (see [`proxy_energy`]).
//!
//! Two comparison estimators share the same output scale:
//! [`discover_pool_both`] pools queries as well (one logit per block pair),
//! and [`discover_exact`] materializes a full per-query softmax over pooled
//! keys before averaging it over each query tile.

use std::f32::consts::LOG2_E;

use crate::config::DEFAULT_EPSILON;
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::par;
use crate::tensor::{BatchShape, RawTensor, Role, SequenceBatch};

/// Dimensions of a block map: `batch × heads × blocks × blocks`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapShape {
    pub batch: usize,
    pub heads: usize,
    pub num_blocks: usize,
}

impl MapShape {
    pub fn new(batch: usize, heads: usize, num_blocks: usize) -> Self {
        MapShape {
            batch,
            heads,
            num_blocks,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.heads * self.num_blocks * self.num_blocks
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.heads, self.num_blocks, self.num_blocks]
    }

    /// Number of `(batch, head, query block)` rows.
    pub fn rows(&self) -> usize {
        self.batch * self.heads * self.num_blocks
    }

    pub fn row_offset(&self, batch: usize, head: usize, query_block: usize) -> usize {
        ((batch * self.heads + head) * self.num_blocks + query_block) * self.num_blocks
    }

    /// Inverse of the row enumeration: `row -> (batch, head, query_block)`.
    pub fn split_row(&self, row: usize) -> (usize, usize, usize) {
        let i = row % self.num_blocks;
        let zh = row / self.num_blocks;
        (zh / self.heads, zh % self.heads, i)
    }
}

/// Per-block mean key vectors, `batch × heads × blocks × head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledKeys {
    shape: BatchShape,
    data: Vec<f32>,
}

impl PooledKeys {
    /// Shape with `seq_len` standing for the number of blocks.
    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, batch: usize, head: usize, block: usize) -> &[f32] {
        let d = self.shape.head_dim;
        let start = ((batch * self.shape.heads + head) * self.shape.seq_len + block) * d;
        &self.data[start..start + d]
    }
}

/// Raw fused-reduction output before global normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEnergies {
    pub shape: MapShape,
    pub energy: Vec<f32>,
    pub local_max: Vec<f32>,
}

/// Energies, local maxima, and normalized importance scores for every block
/// pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScoreMap {
    shape: MapShape,
    energy: Vec<f32>,
    local_max: Vec<f32>,
    score: Vec<f32>,
}

impl BlockScoreMap {
    /// Wraps externally produced scores. Energies mirror the scores and local
    /// maxima are zero on causal entries.
    pub fn from_scores(shape: MapShape, score: Vec<f32>) -> Result<Self> {
        if score.len() != shape.numel() {
            return Err(Error::validation(format!(
                "score map {:?} needs {} values, got {}",
                shape.dims(),
                shape.numel(),
                score.len()
            )));
        }
        let n = shape.num_blocks;
        let mut local_max = vec![f32::NEG_INFINITY; score.len()];
        for row in 0..shape.rows() {
            let (_, _, i) = shape.split_row(row);
            let base = row * n;
            for j in 0..n {
                let s = score[base + j];
                if !(s.is_finite() && s >= 0.0) {
                    return Err(Error::validation(format!(
                        "score {s} at row {row}, block {j} is not a finite non-negative value"
                    )));
                }
                if j > i && s != 0.0 {
                    return Err(Error::validation(format!(
                        "non-causal score {s} at query block {i}, key block {j}"
                    )));
                }
                if j <= i {
                    local_max[base + j] = 0.0;
                }
            }
        }
        Ok(BlockScoreMap {
            shape,
            energy: score.clone(),
            local_max,
            score,
        })
    }

    pub fn shape(&self) -> MapShape {
        self.shape
    }

    pub fn energy(&self) -> &[f32] {
        &self.energy
    }

    pub fn local_max(&self) -> &[f32] {
        &self.local_max
    }

    pub fn scores(&self) -> &[f32] {
        &self.score
    }

    /// Full score row of length `num_blocks`; entries past `query_block` are 0.
    pub fn score_row(&self, batch: usize, head: usize, query_block: usize) -> &[f32] {
        let off = self.shape.row_offset(batch, head, query_block);
        &self.score[off..off + self.shape.num_blocks]
    }

    /// The causal prefix `0..=query_block` of a score row.
    pub fn causal_row(&self, batch: usize, head: usize, query_block: usize) -> &[f32] {
        &self.score_row(batch, head, query_block)[..=query_block]
    }

    pub fn score_at(&self, batch: usize, head: usize, query_block: usize, key_block: usize) -> f32 {
        self.score[self.shape.row_offset(batch, head, query_block) + key_block]
    }

    /// Total bytes held by the three maps.
    pub fn byte_size(&self) -> usize {
        3 * self.shape.numel() * std::mem::size_of::<f32>()
    }

    /// The normalized scores as a `batch × heads × blocks × blocks` tensor.
    pub fn to_raw(&self) -> RawTensor {
        RawTensor::f32(self.shape.dims().to_vec(), self.score.clone()).expect("score dims match")
    }

    /// Rebuilds a map from a saved score tensor. Energies are not stored, so
    /// they mirror the scores as in [`BlockScoreMap::from_scores`].
    pub fn from_raw(raw: RawTensor) -> Result<Self> {
        let (dims, score) = raw.into_f32()?;
        match dims[..] {
            [z, h, m, n] if m == n && z > 0 && h > 0 && m > 0 => Self::from_scores(MapShape::new(z, h, m), score),
            _ => Err(Error::validation(format!("score map must be batch x heads x M x M, got {dims:?}"))),
        }
    }
}

/// Arithmetic mean of each block's rows; the ragged last block divides by its
/// true length.
fn block_means(seq: &SequenceBatch, grid: &BlockGrid) -> PooledKeys {
    let shape = seq.shape();
    let d = shape.head_dim;
    let n = grid.num_blocks();
    let mut data = vec![0.0f32; shape.slabs() * n * d];
    let items: Vec<(usize, &mut [f32])> = data.chunks_mut(d).enumerate().collect();
    par::for_each(items, |(row, out)| {
        let block = row % n;
        let zh = row / n;
        let slab = seq.slab(zh / shape.heads, zh % shape.heads);
        let range = grid.block_range(block);
        let count = range.len() as f32;
        for t in range {
            for (o, x) in out.iter_mut().zip(&slab[t * d..(t + 1) * d]) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= count;
        }
    });
    PooledKeys {
        shape: BatchShape::new(shape.batch, shape.heads, n, d),
        data,
    }
}

fn check_grid(seq: &SequenceBatch, grid: &BlockGrid) -> Result<()> {
    if seq.shape().seq_len != grid.seq_len() {
        return Err(Error::validation(format!(
            "{:?} tensor has {} tokens but the grid covers {}",
            seq.role(),
            seq.shape().seq_len,
            grid.seq_len()
        )));
    }
    Ok(())
}

pub fn pool_keys(keys: &SequenceBatch, grid: &BlockGrid) -> Result<PooledKeys> {
    if keys.role() != Role::Key {
        return Err(Error::validation(format!(
            "pool_keys expects a key tensor, got {:?}",
            keys.role()
        )));
    }
    check_grid(keys, grid)?;
    Ok(block_means(keys, grid))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fused query-tile × pooled-key reduction producing `(S, m)` for every
/// causal block pair.
pub fn approx_block_scores(
    queries: &SequenceBatch,
    pooled: &PooledKeys,
    grid: &BlockGrid,
    scale: f32,
) -> Result<BlockEnergies> {
    check_grid(queries, grid)?;
    let qs = queries.shape();
    let ps = pooled.shape();
    if (ps.batch, ps.heads, ps.seq_len, ps.head_dim)
        != (qs.batch, qs.heads, grid.num_blocks(), qs.head_dim)
    {
        return Err(Error::validation(format!(
            "pooled keys {:?} do not match queries {:?} on grid of {} blocks",
            ps.dims(),
            qs.dims(),
            grid.num_blocks()
        )));
    }

    let shape = MapShape::new(qs.batch, qs.heads, grid.num_blocks());
    let n = shape.num_blocks;
    let d = qs.head_dim;
    let mut energy = vec![0.0f32; shape.numel()];
    let mut local_max = vec![f32::NEG_INFINITY; shape.numel()];
    let logit_scale = scale * LOG2_E;

    let items: Vec<_> = energy
        .chunks_mut(n)
        .zip(local_max.chunks_mut(n))
        .enumerate()
        .collect();
    par::for_each(items, |(row, (s_row, m_row))| {
        let (z, h, i) = shape.split_row(row);
        let slab = queries.slab(z, h);
        let tile = grid.block_range(i);
        let mut logits = Vec::with_capacity(tile.len());
        for j in 0..=i {
            let k_bar = pooled.row(z, h, j);
            // A pooled block is visible to query t once it starts at or
            // before t.
            let first_visible = grid.block_start(j);
            logits.clear();
            logits.extend(
                tile.clone()
                    .filter(|&t| t >= first_visible)
                    .map(|t| dot(&slab[t * d..(t + 1) * d], k_bar) * logit_scale),
            );
            let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            m_row[j] = m;
            s_row[j] = logits.iter().map(|&x| (x - m).exp2()).sum();
        }
    });

    Ok(BlockEnergies {
        shape,
        energy,
        local_max,
    })
}

/// Rescales every row to its global maximum and normalizes to scores.
pub fn normalize_block_scores(
    energies: BlockEnergies,
    grid: &BlockGrid,
    epsilon: f32,
) -> Result<BlockScoreMap> {
    let BlockEnergies {
        shape,
        energy,
        local_max,
    } = energies;
    if shape.num_blocks != grid.num_blocks() {
        return Err(Error::validation(format!(
            "energy map has {} blocks, grid has {}",
            shape.num_blocks,
            grid.num_blocks()
        )));
    }
    let n = shape.num_blocks;
    let mut score = vec![0.0f32; shape.numel()];
    let items: Vec<_> = score.chunks_mut(n).enumerate().collect();
    par::for_each(items, |(row, out)| {
        let (_, _, i) = shape.split_row(row);
        let base = row * n;
        let m = &local_max[base..=base + i];
        let s = &energy[base..=base + i];
        let row_max = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for j in 0..=i {
            let rescaled = s[j] * (m[j] - row_max).exp2();
            out[j] = rescaled;
            total += rescaled;
        }
        let denom = total + epsilon;
        for x in &mut out[..=i] {
            *x /= denom;
        }
    });
    Ok(BlockScoreMap {
        shape,
        energy,
        local_max,
        score,
    })
}

fn check_qk(queries: &SequenceBatch, keys: &SequenceBatch, grid: &BlockGrid) -> Result<()> {
    if queries.shape() != keys.shape() {
        return Err(Error::validation(format!(
            "query shape {:?} differs from key shape {:?}",
            queries.shape().dims(),
            keys.shape().dims()
        )));
    }
    check_grid(queries, grid)
}

/// Pools keys, runs the fused block approximation, and normalizes.
pub fn discover(
    queries: &SequenceBatch,
    keys: &SequenceBatch,
    grid: &BlockGrid,
    scale: f32,
) -> Result<BlockScoreMap> {
    check_qk(queries, keys, grid)?;
    let pooled = pool_keys(keys, grid)?;
    let energies = approx_block_scores(queries, &pooled, grid, scale)?;
    drop(pooled);
    normalize_block_scores(energies, grid, DEFAULT_EPSILON)
}

/// Comparison method: pooled queries against pooled keys, one logit per
/// block pair, row softmax over causal entries.
pub fn discover_pool_both(
    queries: &SequenceBatch,
    keys: &SequenceBatch,
    grid: &BlockGrid,
    scale: f32,
) -> Result<BlockScoreMap> {
    check_qk(queries, keys, grid)?;
    let pooled_k = pool_keys(keys, grid)?;
    let pooled_q = block_means(queries, grid);
    let shape = MapShape::new(queries.shape().batch, queries.shape().heads, grid.num_blocks());
    let n = shape.num_blocks;
    let logit_scale = scale * LOG2_E;
    let mut energy = vec![0.0f32; shape.numel()];
    let mut local_max = vec![f32::NEG_INFINITY; shape.numel()];
    let items: Vec<_> = energy
        .chunks_mut(n)
        .zip(local_max.chunks_mut(n))
        .enumerate()
        .collect();
    par::for_each(items, |(row, (s_row, m_row))| {
        let (z, h, i) = shape.split_row(row);
        let q_bar = pooled_q.row(z, h, i);
        for j in 0..=i {
            m_row[j] = dot(q_bar, pooled_k.row(z, h, j)) * logit_scale;
            s_row[j] = 1.0;
        }
    });
    normalize_block_scores(
        BlockEnergies {
            shape,
            energy,
            local_max,
        },
        grid,
        DEFAULT_EPSILON,
    )
}

/// Comparison method: exact per-query softmax over pooled keys, then averaged
/// over each query tile.
///
/// This materializes a `seq_len × num_blocks` probability matrix per
/// (batch, head), the intermediate the fused reduction avoids.
pub fn discover_exact(
    queries: &SequenceBatch,
    keys: &SequenceBatch,
    grid: &BlockGrid,
    scale: f32,
) -> Result<BlockScoreMap> {
    check_qk(queries, keys, grid)?;
    let pooled = pool_keys(keys, grid)?;
    let qs = queries.shape();
    let shape = MapShape::new(qs.batch, qs.heads, grid.num_blocks());
    let n = shape.num_blocks;
    let d = qs.head_dim;
    let l = qs.seq_len;
    let logit_scale = scale * LOG2_E;

    let mut energy = vec![0.0f32; shape.numel()];
    let mut local_max = vec![f32::NEG_INFINITY; shape.numel()];
    let slab_len = n * n;
    let items: Vec<_> = energy
        .chunks_mut(slab_len)
        .zip(local_max.chunks_mut(slab_len))
        .enumerate()
        .collect();
    par::for_each(items, |(zh, (s_slab, m_slab))| {
        let (z, h) = (zh / qs.heads, zh % qs.heads);
        let slab = queries.slab(z, h);
        let mut probs = vec![0.0f32; l * n];
        for t in 0..l {
            let q = &slab[t * d..(t + 1) * d];
            let row = &mut probs[t * n..(t + 1) * n];
            let own = grid.block_of(t);
            let visible = (0..=own).take_while(|&j| grid.block_start(j) <= t);
            let mut row_max = f32::NEG_INFINITY;
            let mut last = 0;
            for j in visible {
                row[j] = dot(q, pooled.row(z, h, j)) * logit_scale;
                row_max = row_max.max(row[j]);
                last = j;
            }
            let mut total = 0.0f32;
            for x in &mut row[..=last] {
                *x = (*x - row_max).exp2();
                total += *x;
            }
            for x in &mut row[..=last] {
                *x /= total;
            }
        }
        for i in 0..n {
            for j in 0..=i {
                m_slab[i * n + j] = 0.0;
                s_slab[i * n + j] = grid.block_range(i).map(|t| probs[t * n + j]).sum();
            }
        }
    });
    normalize_block_scores(
        BlockEnergies {
            shape,
            energy,
            local_max,
        },
        grid,
        DEFAULT_EPSILON,
    )
}

/// Selects one of the three estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiscoveryMethod {
    /// Fused block approximation (the production path).
    Approx,
    PoolBoth,
    Exact,
}

impl DiscoveryMethod {
    pub fn run(
        self,
        queries: &SequenceBatch,
        keys: &SequenceBatch,
        grid: &BlockGrid,
        scale: f32,
    ) -> Result<BlockScoreMap> {
        match self {
            DiscoveryMethod::Approx => discover(queries, keys, grid, scale),
            DiscoveryMethod::PoolBoth => discover_pool_both(queries, keys, grid, scale),
            DiscoveryMethod::Exact => discover_exact(queries, keys, grid, scale),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscoveryMethod::Approx => "approx",
            DiscoveryMethod::PoolBoth => "pool-both",
            DiscoveryMethod::Exact => "exact",
        }
    }
}

impl std::str::FromStr for DiscoveryMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approx" => Ok(DiscoveryMethod::Approx),
            "pool-both" => Ok(DiscoveryMethod::PoolBoth),
            "exact" => Ok(DiscoveryMethod::Exact),
            other => Err(Error::config(format!("unknown discovery method {other:?}"))),
        }
    }
}

/// Pooled-probe versus exact block energy for one query against `n` keys.
///
/// Both values are expressed relative to `e^max(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyEnergy {
    /// `n · e^mean(x)`: `n` times the geometric mean of the exponentials.
    pub pooled: f64,
    /// `Σ e^x_i`: `n` times their arithmetic mean.
    pub total: f64,
}

/// Evaluates both sides of the pooled-probe bound `n · GM(e^x) ≤ Σ e^x`.
pub fn proxy_energy(logits: &[f32]) -> ProxyEnergy {
    let n = logits.len() as f64;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mean = logits.iter().map(|&x| x as f64).sum::<f64>() / n;
    ProxyEnergy {
        pooled: n * (mean - max).exp(),
        total: logits.iter().map(|&x| (x as f64 - max).exp()).sum(),
    }
}
