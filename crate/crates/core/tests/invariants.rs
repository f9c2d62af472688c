//! Cross-module properties of the discover → select → attend pipeline.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparse_prefill::selection::Retention;
use sparse_prefill::tensor::{read_container, write_container};
use sparse_prefill::workloads::generate_random;
use sparse_prefill::*;

/// Small random problem: shape, grid, and tensors.
fn problem(seed: u64, l: usize, b: usize, d: usize, h: usize) -> (BlockGrid, [SequenceBatch; 3]) {
    let shape = BatchShape::new(1, h, l, d);
    (BlockGrid::new(l, b).unwrap(), generate_random(shape, seed).unwrap())
}

/// A random causal plan that always lists the diagonal.
fn random_plan(seed: u64, shape: PlanShape) -> SparseBlockPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<bool> = (0..shape.numel()).map(|_| rng.random_bool(0.5)).collect();
    compress_indices(&ActiveMask::from_fn(shape, |z, i, j, h| i == j || (j < i && cells[shape.index(z, i, j, h)])).unwrap())
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn block_order_does_not_matter(seed: u64, l in 2usize..96, b in 1usize..20, d in 1usize..9) {
        let (g, [q, k, v]) = problem(seed, l, b, d, 2);
        let plan = random_plan(seed, PlanShape::new(1, g.num_blocks(), 2));
        let mut shuffled = plan.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for row in 0..plan.shape().rows() {
            let (z, i, h) = plan.shape().split_row(row);
            let mut listed = plan.listed_blocks(z, i, h);
            for s in (1..listed.len()).rev() {
                listed.swap(s, rng.random_range(0..=s));
            }
            for (slot, j) in listed.into_iter().enumerate() {
                shuffled.set_index(z, i, slot, h, j);
            }
        }
        let a = block_sparse_attention(&q, &k, &v, &plan, &g, 0.7).unwrap();
        let c = block_sparse_attention(&q, &k, &v, &shuffled, &g, 0.7).unwrap();
        prop_assert!(max_abs(a.output(), c.output()) <= 1e-4);
        prop_assert!(max_abs(a.lse(), c.lse()) <= 1e-4);
    }

    #[test]
    fn adding_blocks_raises_lse(seed: u64, l in 2usize..96, b in 1usize..20, d in 1usize..9) {
        let (g, [q, k, v]) = problem(seed, l, b, d, 1);
        let shape = PlanShape::new(1, g.num_blocks(), 1);
        let sparse = random_plan(seed, shape);
        let full = compress_indices(&ActiveMask::full_causal(shape));
        let a = block_sparse_attention(&q, &k, &v, &sparse, &g, 1.0).unwrap();
        let c = block_sparse_attention(&q, &k, &v, &full, &g, 1.0).unwrap();
        prop_assert!(c.output().iter().all(|x| x.is_finite()));
        for (lo, hi) in a.lse().iter().zip(c.lse()) {
            prop_assert!(hi + 1e-5 >= *lo, "{hi} < {lo}");
        }
    }

    #[test]
    fn outputs_are_convex_combinations(seed: u64, l in 1usize..80, b in 1usize..20, d in 1usize..9) {
        let (g, [q, k, v]) = problem(seed, l, b, d, 1);
        let plan = random_plan(seed, PlanShape::new(1, g.num_blocks(), 1));
        let (out, visits) = block_sparse_attention_counted(&q, &k, &v, &plan, &g, 1.0).unwrap();
        prop_assert_eq!(visits, plan.counts().iter().map(|&c| c as u64).sum::<u64>());
        for t in 0..l {
            let i = g.block_of(t);
            let visible: Vec<usize> = plan
                .listed_blocks(0, i, 0)
                .into_iter()
                .flat_map(|j| g.block_range(j as usize))
                .filter(|&s| s <= t)
                .collect();
            for c in 0..d {
                let (lo, hi) = visible
                    .iter()
                    .map(|&s| v.row(0, 0, s)[c])
                    .fold((f32::MAX, f32::MIN), |(a, b), x| (a.min(x), b.max(x)));
                let o = out.output_row(0, 0, t)[c];
                prop_assert!(o >= lo - 1e-5 && o <= hi + 1e-5, "token {t} dim {c}: {o} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn score_rows_are_causal_and_subnormalized(seed: u64, l in 1usize..120, b in 1usize..24, d in 1usize..9, method in 0usize..3) {
        let (g, [q, k, _]) = problem(seed, l, b, d, 2);
        let method = [DiscoveryMethod::Approx, DiscoveryMethod::PoolBoth, DiscoveryMethod::Exact][method];
        let map = method.run(&q, &k, &g, 0.5).unwrap();
        let m = g.num_blocks();
        for h in 0..2 {
            for i in 0..m {
                let row = map.score_row(0, h, i);
                prop_assert!(row[i + 1..].iter().all(|&s| s == 0.0));
                prop_assert!(row.iter().all(|&s| s >= 0.0));
                let sum: f64 = row.iter().map(|&s| s as f64).sum();
                prop_assert!(sum <= 1.0 + 1e-6 && sum > 0.99, "{sum}");
            }
        }
    }

    #[test]
    fn higher_alpha_selects_a_subset(seed: u64, l in 1usize..200, b in 1usize..24, a1 in 0.0f32..1.0, a2 in 0.0f32..1.0) {
        let (g, [q, k, _]) = problem(seed, l, b, 4, 2);
        let map = discover(&q, &k, &g, 0.5).unwrap();
        let (lo, hi) = (a1.min(a2), a1.max(a2));
        let config = |alpha| PipelineConfig { block_size: b, alpha, sink_tokens: b, window_tokens: 1, ..Default::default() };
        let wide = max_threshold_mask(&map, &config(lo)).unwrap();
        let narrow = max_threshold_mask(&map, &config(hi)).unwrap();
        for (n, w) in narrow.as_slice().iter().zip(wide.as_slice()) {
            prop_assert!(!n || *w);
        }
        let retention = Retention { sink_blocks: 1, window_blocks: 1 };
        for i in 0..g.num_blocks() {
            for j in 0..=i {
                if retention.keeps(i, j) {
                    prop_assert!(narrow.get(0, i, j, 1));
                }
            }
        }
        let (pw, pn) = (compress_indices(&wide), compress_indices(&narrow));
        prop_assert!(density(&pn, &g).unwrap() <= density(&pw, &g).unwrap());
        prop_assert_eq!(pn.to_mask().unwrap(), narrow);
    }

    #[test]
    fn containers_round_trip_bit_exact(seed: u64, l in 1usize..40, d in 1usize..9, h in 1usize..4) {
        let [q, _, _] = generate_random(BatchShape::new(2, h, l, d), seed).unwrap();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &q.to_raw()).unwrap();
        let back = SequenceBatch::from_raw(Role::Query, read_container(&bytes[..]).unwrap()).unwrap();
        prop_assert!(back.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.shape(), q.shape());
    }
}

#[test]
fn end_to_end_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PlantedSpec::new(Pattern::Slash { offset: 64 }, 6.0, 3);
    let w = generate_planted(&spec, 1, 2, 512, 32, 32).unwrap();
    for (name, t) in [("q", &w.queries), ("k", &w.keys), ("v", &w.values)] {
        save_tensor(dir.path().join(name), t).unwrap();
    }
    let q = load_tensor(dir.path().join("q"), Role::Query).unwrap();
    let k = load_tensor(dir.path().join("k"), Role::Key).unwrap();
    let v = load_tensor(dir.path().join("v"), Role::Value).unwrap();
    assert_eq!(q, w.queries);
    assert!(matches!(load_tensor(dir.path().join("q"), Role::Key), Ok(t) if t.role() == Role::Key));

    let g = BlockGrid::new(512, 32).unwrap();
    let scale = default_scale(32);
    let map = discover(&q, &k, &g, scale).unwrap();
    let config = PipelineConfig { block_size: 32, sink_tokens: 0, window_tokens: 1, ..Default::default() };
    let mask = max_threshold_mask(&map, &config).unwrap();
    for &(i, j) in &w.planted {
        assert!(mask.get(0, i, j, 0) && mask.get(0, i, j, 1), "planted ({i}, {j}) dropped");
    }
    let plan = compress_indices(&mask);
    plan.validate().unwrap();
    let (indices, counts) = plan.to_raw();
    let back = SparseBlockPlan::from_raw(indices, counts).unwrap();
    assert_eq!(back, plan);
    let (out, visits) = block_sparse_attention_counted(&q, &k, &v, &back, &g, scale).unwrap();
    assert_eq!(visits, visit_count(&plan));
    assert!(density(&plan, &g).unwrap() < 0.5);
    assert!(out.output().iter().all(|x| x.is_finite()));
}

/// Rows are computed independently, so the thread count cannot change a bit.
#[cfg(feature = "parallel")]
#[test]
fn one_thread_pool_gives_identical_results() {
    let (g, [q, k, v]) = problem(5, 700, 64, 16, 3);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        let map = discover(&q, &k, &g, 0.25).unwrap();
        let plan = compress_indices(&max_threshold_mask(&map, &PipelineConfig { block_size: 64, ..Default::default() }).unwrap());
        (map.scores().to_vec(), block_sparse_attention(&q, &k, &v, &plan, &g, 0.25).unwrap())
    };
    assert_eq!(run(), pool.install(run));
}
