//! Seeded synthetic inputs with planted attention structure.
//!
//! Background query and key entries are Gaussian with standard deviation
//! `base_noise`. Structure is planted in logit geometry: a query component
//! `a·u` and a key component `b·u` along a shared unit direction `u`, with
//! `a·b = strength·√d`, so the scaled logit `q·k/√d` of a planted pair rises
//! by about `strength`. Separate directions are used per structure so planted
//! pairs do not leak into each other while `d` allows orthogonality.
//!
//! Every query tile also gets a weaker local direction shared with its own
//! key block (`local_bias · strength`). Without it, rows that carry no planted
//! block have flat scores and any threshold keeps them dense.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::discovery::BlockScoreMap;
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::selection::{ActiveMask, PlanShape};
use crate::tensor::{BatchShape, Role, SequenceBatch};

/// Where the planted structure sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// One key block salient for every query that can see it.
    Vertical { block: usize },
    /// Query token `t` aligned with key token `t − offset`.
    Slash { offset: usize },
    /// One query tile aligned with one key block.
    Block { row: usize, col: usize },
    /// A single salient key token.
    Needle { token: usize },
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Vertical { .. } => "vertical",
            Pattern::Slash { .. } => "slash",
            Pattern::Block { .. } => "block",
            Pattern::Needle { .. } => "needle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSpec {
    pub pattern: Pattern,
    /// Scaled-logit boost of planted pairs.
    pub strength: f32,
    pub base_noise: f32,
    /// Diagonal-block boost as a fraction of `strength`.
    pub local_bias: f32,
    /// Flip the planted query component on every other token so that the
    /// tile mean cancels it.
    pub alternating_queries: bool,
    pub rng_seed: u64,
}

impl PlantedSpec {
    pub const DEFAULT_LOCAL_BIAS: f32 = 0.6;

    pub fn new(pattern: Pattern, strength: f32, rng_seed: u64) -> Self {
        PlantedSpec {
            pattern,
            strength,
            base_noise: 1.0,
            local_bias: Self::DEFAULT_LOCAL_BIAS,
            alternating_queries: false,
            rng_seed,
        }
    }

    fn validate(&self, grid: &BlockGrid) -> Result<()> {
        for (name, v) in [
            ("strength", self.strength),
            ("base_noise", self.base_noise),
            ("local_bias", self.local_bias),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let (l, m) = (grid.seq_len(), grid.num_blocks());
        let bounds = |what: String| Err(Error::Bounds(what));
        match self.pattern {
            Pattern::Vertical { block } if block >= m => bounds(format!("vertical block {block} >= {m} blocks")),
            Pattern::Slash { offset } if offset >= l => bounds(format!("slash offset {offset} >= {l} tokens")),
            Pattern::Block { row, col } if row >= m || col > row => {
                bounds(format!("block target ({row}, {col}) outside the causal {m}x{m} grid"))
            }
            Pattern::Needle { token } if token >= l => bounds(format!("needle token {token} >= {l} tokens")),
            _ => Ok(()),
        }
    }
}

/// Generated tensors plus the blocks the generator planted.
#[derive(Debug, Clone)]
pub struct PlantedWorkload {
    pub queries: SequenceBatch,
    pub keys: SequenceBatch,
    pub values: SequenceBatch,
    /// Planted causal blocks plus the diagonal, identical for every batch and head.
    pub ground_truth: ActiveMask,
    /// Sorted `(query_block, key_block)` pairs that received a planted boost.
    pub planted: Vec<(usize, usize)>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
}

/// `count` unit vectors in `R^d`: orthonormal for the first `min(count, d)`,
/// random unit vectors after that.
fn directions(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if out.len() < d {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * *b as f64).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * *b as f64);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        out.push(v.iter().map(|x| (x / norm) as f32).collect());
    }
    out
}

fn add_scaled(row: &mut [f32], dir: &[f32], scale: f32) {
    row.iter_mut().zip(dir).for_each(|(r, u)| *r += scale * u);
}

fn planted_pairs(pattern: Pattern, grid: &BlockGrid) -> Vec<(usize, usize)> {
    let m = grid.num_blocks();
    let mut pairs = match pattern {
        Pattern::Vertical { block } => (block..m).map(|i| (i, block)).collect(),
        Pattern::Needle { token } => {
            let j = grid.block_of(token);
            (j..m).map(|i| (i, j)).collect()
        }
        Pattern::Block { row, col } => vec![(row, col)],
        Pattern::Slash { offset } => (offset..grid.seq_len())
            .map(|t| (grid.block_of(t), grid.block_of(t - offset)))
            .collect::<Vec<_>>(),
    };
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Builds `Q`, `K`, `V` of shape `batch × heads × seq_len × head_dim` with
/// `spec.pattern` planted in every head.
pub fn generate_planted(
    spec: &PlantedSpec,
    batch: usize,
    heads: usize,
    seq_len: usize,
    head_dim: usize,
    block_size: usize,
) -> Result<PlantedWorkload> {
    let grid = BlockGrid::new(seq_len, block_size)?;
    if batch == 0 || heads == 0 || head_dim == 0 {
        return Err(Error::config("batch, heads and head_dim must be >= 1"));
    }
    spec.validate(&grid)?;
    let shape = BatchShape::new(batch, heads, seq_len, head_dim);
    let (l, d, m) = (seq_len, head_dim, grid.num_blocks());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let active = spec.strength > 0.0;
    let amp = |boost: f32| (boost * (d as f32).sqrt()).sqrt();
    let planted_amp = amp(spec.strength);
    let local_amp = amp(spec.strength * spec.local_bias);
    let structure_dirs = match spec.pattern {
        Pattern::Slash { .. } => m,
        _ => 1,
    };

    let mut q = Vec::with_capacity(shape.numel());
    let mut k = Vec::with_capacity(shape.numel());
    let mut v = Vec::with_capacity(shape.numel());
    for _ in 0..shape.slabs() {
        let mut qs = gaussian(&mut rng, l * d, spec.base_noise);
        let mut ks = gaussian(&mut rng, l * d, spec.base_noise);
        v.extend(gaussian(&mut rng, l * d, spec.base_noise));
        if active {
            let dirs = directions(&mut rng, structure_dirs + m, d);
            let (planted_dirs, local_dirs) = dirs.split_at(structure_dirs);
            let q_sign = |t: usize| {
                if spec.alternating_queries && t % 2 == 1 {
                    -planted_amp
                } else {
                    planted_amp
                }
            };
            for t in 0..l {
                add_scaled(&mut qs[t * d..(t + 1) * d], &local_dirs[grid.block_of(t)], local_amp);
                add_scaled(&mut ks[t * d..(t + 1) * d], &local_dirs[grid.block_of(t)], local_amp);
            }
            match spec.pattern {
                Pattern::Vertical { block } => {
                    for t in 0..l {
                        add_scaled(&mut qs[t * d..(t + 1) * d], &planted_dirs[0], q_sign(t));
                    }
                    for s in grid.block_range(block) {
                        add_scaled(&mut ks[s * d..(s + 1) * d], &planted_dirs[0], planted_amp);
                    }
                }
                Pattern::Needle { token } => {
                    for t in 0..l {
                        add_scaled(&mut qs[t * d..(t + 1) * d], &planted_dirs[0], q_sign(t));
                    }
                    add_scaled(&mut ks[token * d..(token + 1) * d], &planted_dirs[0], planted_amp);
                }
                Pattern::Block { row, col } => {
                    for t in grid.block_range(row) {
                        add_scaled(&mut qs[t * d..(t + 1) * d], &planted_dirs[0], q_sign(t));
                    }
                    for s in grid.block_range(col) {
                        add_scaled(&mut ks[s * d..(s + 1) * d], &planted_dirs[0], planted_amp);
                    }
                }
                Pattern::Slash { offset } => {
                    for t in offset..l {
                        let u = &planted_dirs[grid.block_of(t)];
                        add_scaled(&mut qs[t * d..(t + 1) * d], u, q_sign(t));
                        let s = t - offset;
                        add_scaled(&mut ks[s * d..(s + 1) * d], u, planted_amp);
                    }
                }
            }
        }
        q.extend(qs);
        k.extend(ks);
    }

    let planted = if active { planted_pairs(spec.pattern, &grid) } else { Vec::new() };
    let plan_shape = PlanShape::new(batch, m, heads);
    let mut row_mask = vec![false; m * m];
    for &(i, j) in &planted {
        row_mask[i * m + j] = true;
    }
    let ground_truth = ActiveMask::from_fn(plan_shape, |_, i, j, _| i == j || row_mask[i * m + j])?;

    Ok(PlantedWorkload {
        queries: SequenceBatch::new(Role::Query, shape, q)?,
        keys: SequenceBatch::new(Role::Key, shape, k)?,
        values: SequenceBatch::new(Role::Value, shape, v)?,
        ground_truth,
        planted,
    })
}

/// Unstructured standard-normal `Q`, `K`, `V`.
pub fn generate_random(shape: BatchShape, seed: u64) -> Result<[SequenceBatch; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = |role| SequenceBatch::new(role, shape, gaussian(&mut rng, shape.numel(), 1.0));
    Ok([next(Role::Query)?, next(Role::Key)?, next(Role::Value)?])
}

/// Planted pairs found by a threshold rule, counted over every batch and head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Recall {
    pub hits: usize,
    pub total: usize,
}

impl Recall {
    /// `None` when nothing was planted.
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }

    pub fn merge(self, other: Recall) -> Recall {
        Recall {
            hits: self.hits + other.hits,
            total: self.total + other.total,
        }
    }
}

/// A planted pair counts as found when its score reaches `alpha` times its
/// row's maximum.
pub fn planted_recall(scores: &BlockScoreMap, planted: &[(usize, usize)], alpha: f32) -> Recall {
    let s = scores.shape();
    let mut recall = Recall::default();
    for z in 0..s.batch {
        for h in 0..s.heads {
            for &(i, j) in planted {
                let row = scores.causal_row(z, h, i);
                let max = row.iter().copied().fold(0.0f32, f32::max);
                recall.total += 1;
                if row[j] >= alpha * max {
                    recall.hits += 1;
                }
            }
        }
    }
    recall
}

/// Largest-ratio bound on tail entries: `max tail / min tail ≤ 2`.
const TAIL_SPREAD: f32 = 2.0;

/// A unit-sum row of `n` scores where one random block carries `head_mass`
/// and every other entry lies strictly below `alpha · head_mass`.
pub fn generate_heavy_tail_row(n: usize, head_mass: f32, alpha: f32, seed: u64) -> Result<Vec<f32>> {
    if n < 2 {
        return Err(Error::config(format!("heavy-tail row needs n >= 2, got {n}")));
    }
    if !(head_mass > 0.0 && head_mass < 1.0) {
        return Err(Error::config(format!("head_mass must lie in (0, 1), got {head_mass}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be > 0, got {alpha}")));
    }
    let (h, tail_mass, tails) = (head_mass as f64, 1.0 - head_mass as f64, (n - 1) as f64);
    let cap = alpha as f64 * h;
    // Even a perfectly flat tail must clear the cap.
    if tail_mass / tails >= cap {
        return Err(Error::config(format!(
            "infeasible heavy tail: {n} blocks at head_mass {head_mass} put {:.4} per tail block, not below alpha*head = {cap:.4}",
            tail_mass / tails
        )));
    }
    // Worst case is one entry at the top of the range and the rest at 1:
    // tail_mass·r / (r + n − 2) < cap.
    let headroom = 1.0 - h - cap;
    let r_max = if headroom <= 0.0 { f64::INFINITY } else { cap * (tails - 1.0) / headroom };
    let spread = (TAIL_SPREAD as f64).min((1.0 + r_max) / 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..n - 1).map(|_| rng.random_range(1.0..=spread)).collect();
    let total: f64 = weights.iter().sum();
    let head_at = rng.random_range(0..n);
    let mut row = Vec::with_capacity(n);
    let mut tail = weights.iter().map(|w| (tail_mass * w / total) as f32);
    for j in 0..n {
        row.push(if j == head_at { head_mass } else { tail.next().unwrap() });
    }
    Ok(row)
}

/// A one-batch score map with `heads` independent heavy-tail rows per query
/// block. Rows too short for the requested shape are left uniform.
pub fn heavy_tail_score_map(n: usize, heads: usize, head_mass: f32, alpha: f32, seed: u64) -> Result<BlockScoreMap> {
    use crate::discovery::MapShape;
    // Validate once on the full-length row so bad parameters surface.
    generate_heavy_tail_row(n, head_mass, alpha, seed)?;
    let shape = MapShape::new(1, heads, n);
    let mut score = vec![0.0f32; shape.numel()];
    for h in 0..heads {
        for i in 0..n {
            let row_seed = seed ^ ((h * n + i) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let off = shape.row_offset(0, h, i);
            let row = generate_heavy_tail_row(i + 1, head_mass, alpha, row_seed)
                .unwrap_or_else(|_| vec![1.0 / (i + 1) as f32; i + 1]);
            score[off..off + i + 1].copy_from_slice(&row);
        }
    }
    BlockScoreMap::from_scores(shape, score)
}
