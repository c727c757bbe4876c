//! Statistical and structural properties of the masking strategies:
//! exact visible counts, block structure before assimilation, assimilation
//! uniformity, and the distributional equivalence of B=1 inverse block
//! masking with random masking.

use d2v2::masking::{
    assimilate, count_start_points, plan_seed, sample_mask, sample_mask_blocks, seeded_rng, target_kept,
    Layout, MaskConfig, MaskPlan, MaskStrategy,
};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn cfg(strategy: MaskStrategy, r: f64, a: f64, b: usize) -> MaskConfig {
    MaskConfig { strategy, mask_ratio: r, adjust: a, block: b, block_side: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Exact visible count for every strategy, layout shape, and ratio.
    #[test]
    fn kept_count_is_exact(
        strategy in prop::sample::select(vec![MaskStrategy::Random, MaskStrategy::Block, MaskStrategy::InverseBlock]),
        r in prop::sample::select(vec![0.42f64, 0.5, 0.8]),
        two_d in any::<bool>(),
        dim in 4usize..14,
        seed in 0u64..10_000,
    ) {
        let layout = if two_d {
            Layout::TwoD { rows: dim, cols: dim + 1 }
        } else {
            Layout::OneD { len: dim * dim }
        };
        let c = cfg(strategy, r, 0.1, 3);
        let plan = sample_mask(&c, layout, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(plan.kept_count(), target_kept(layout.len(), r));
    }

    /// Same (config, layout, seed) always gives the same plan.
    #[test]
    fn determinism(seed in 0u64..10_000) {
        let c = cfg(MaskStrategy::InverseBlock, 0.8, 0.1, 9);
        let layout = Layout::TwoD { rows: 8, cols: 8 };
        let a = sample_mask(&c, layout, &mut seeded_rng(seed)).unwrap();
        let b = sample_mask(&c, layout, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// 1-D inverse block, L=10, R=0.5, A=0, B=5: a single start expands to one
/// contiguous kept run of exactly 5, wherever the start lands.
#[test]
fn one_d_single_block_is_contiguous_for_every_outcome() {
    let c = cfg(MaskStrategy::InverseBlock, 0.5, 0.0, 5);
    let layout = Layout::OneD { len: 10 };
    assert_eq!(count_start_points(10, 0.5, 0.0, 5), 1);

    let contiguous_run = |plan: &MaskPlan| -> Option<(usize, usize)> {
        let idx = plan.kept_indices();
        if idx.is_empty() {
            return None;
        }
        let (first, last) = (idx[0], idx[idx.len() - 1]);
        if last - first + 1 == idx.len() {
            Some((first, idx.len()))
        } else {
            None
        }
    };

    // every rng outcome boils down to which of the 10 start points was
    // drawn; sweep enough seeds to see them all and check each plan
    let mut starts_seen = std::collections::HashSet::new();
    for seed in 0..400 {
        let plan = sample_mask(&c, layout, &mut seeded_rng(seed)).unwrap();
        assert_eq!(plan.kept_count(), 5, "seed {seed}");
        let (start, len) = contiguous_run(&plan).expect("kept run must be contiguous");
        assert_eq!(len, 5, "seed {seed}");
        starts_seen.insert(start);
    }
    // with edge shifting, valid run starts are exactly 0..=5
    assert_eq!(starts_seen.len(), 6, "all shifted windows observed");
}

/// 2-D 8x8, R=0.8, A=0.1, B=9: 12 kept after assimilation, and the raw
/// block cover decomposes into 3x3 squares (checked by brute force: every
/// covered cell must lie inside some fully covered in-bounds 3x3 square).
#[test]
fn two_d_blocks_decompose_into_squares() {
    let c = cfg(MaskStrategy::InverseBlock, 0.8, 0.1, 9);
    let layout = Layout::TwoD { rows: 8, cols: 8 };
    assert_eq!(count_start_points(64, 0.8, 0.1, 9), 2);

    for seed in 0..1000 {
        let mut rng = seeded_rng(seed);
        let raw = sample_mask_blocks(&c, layout, &mut rng).unwrap();
        let kept = raw.kept();
        let covered = |r: isize, q: isize| -> bool {
            r >= 0 && r < 8 && q >= 0 && q < 8 && kept[(r * 8 + q) as usize]
        };
        for r in 0..8isize {
            for q in 0..8isize {
                if !covered(r, q) {
                    continue;
                }
                // search for a fully covered 3x3 square containing (r, q)
                let mut ok = false;
                'outer: for tr in r - 2..=r {
                    for tq in q - 2..=q {
                        if tr < 0 || tq < 0 || tr + 2 >= 8 || tq + 2 >= 8 {
                            continue;
                        }
                        if (tr..tr + 3).all(|rr| (tq..tq + 3).all(|qq| covered(rr, qq))) {
                            ok = true;
                            break 'outer;
                        }
                    }
                }
                assert!(ok, "seed {seed}: kept cell ({r},{q}) not in any 3x3 square");
            }
        }

        let plan = assimilate(raw, target_kept(64, 0.8), &mut rng);
        assert_eq!(plan.kept_count(), 12, "seed {seed}");
    }
}

/// Assimilation survival is uniform over initially kept positions: with 7
/// kept and target 5, each kept position survives with p = 5/7; check every
/// empirical rate within 3 sigma over 10k trials (fixed seed schedule).
#[test]
fn assimilation_survival_is_uniform() {
    let len = 12;
    let kept_init: Vec<bool> = (0..len).map(|i| i < 7).collect();
    let trials = 10_000u32;
    let mut survive = vec![0u32; 7];
    for t in 0..trials {
        let plan = MaskPlan::new(Layout::OneD { len }, kept_init.clone());
        let out = assimilate(plan, 5, &mut seeded_rng(500_000 + t as u64));
        for (i, s) in survive.iter_mut().enumerate() {
            if out.kept()[i] {
                *s += 1;
            }
        }
    }
    let p = 5.0 / 7.0;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    for (i, &s) in survive.iter().enumerate() {
        let rate = s as f64 / trials as f64;
        assert!(
            (rate - p).abs() <= 3.0 * sigma,
            "position {i}: survival {rate:.4} vs expected {p:.4} (3 sigma = {:.4})",
            3.0 * sigma
        );
    }
}

/// B=1 inverse block masking is distributionally identical to random
/// masking: two-sample chi-square over position-keep frequencies.
#[test]
fn b1_inverse_block_equals_random_masking() {
    let len = 50;
    let layout = Layout::OneD { len };
    let n = 100_000u32;
    let inv = cfg(MaskStrategy::InverseBlock, 0.5, 0.1, 1);
    let rnd = cfg(MaskStrategy::Random, 0.5, 0.1, 1);

    let mut keep_inv = vec![0f64; len];
    let mut keep_rnd = vec![0f64; len];
    for s in 0..n {
        let a = sample_mask(&inv, layout, &mut seeded_rng(1_000_000 + s as u64)).unwrap();
        let b = sample_mask(&rnd, layout, &mut seeded_rng(7_000_000 + s as u64)).unwrap();
        for i in 0..len {
            if a.kept()[i] {
                keep_inv[i] += 1.0;
            }
            if b.kept()[i] {
                keep_rnd[i] += 1.0;
            }
        }
    }

    let mut chi2 = 0.0;
    for i in 0..len {
        let e = (keep_inv[i] + keep_rnd[i]) / 2.0;
        chi2 += (keep_inv[i] - e).powi(2) / e + (keep_rnd[i] - e).powi(2) / e;
    }
    let dist = ChiSquared::new((len - 1) as f64).unwrap();
    let p = 1.0 - dist.cdf(chi2);
    assert!(p > 0.01, "chi2 = {chi2:.1}, p = {p:.4}");
}

/// The per-plan seed schedule gives independent draws for the M mask
/// versions of one sample: different mask indices, different plans.
#[test]
fn mask_versions_are_distinct_draws()
{
    let c = cfg(MaskStrategy::InverseBlock, 0.8, 0.1, 4);
    let layout = Layout::TwoD { rows: 8, cols: 8 };
    let plans: Vec<MaskPlan> = (0..8)
        .map(|m| sample_mask(&c, layout, &mut seeded_rng(plan_seed(42, 0, 17, m))).unwrap())
        .collect();
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            assert_ne!(plans[i], plans[j], "masks {i} and {j} collided");
        }
    }
    // and the schedule is reproducible
    let again = sample_mask(&c, layout, &mut seeded_rng(plan_seed(42, 0, 17, 3))).unwrap();
    assert_eq!(again, plans[3]);
}
