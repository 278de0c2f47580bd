mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vesselpatch::maps::{BinaryMask, UncertaintyMap};
use vesselpatch::patching::{make_grid, patch_stats, EdgePolicy, PatchStat};
use vesselpatch::selection::{
    select_cup, select_random, select_uncertainty_only, Scope, SelectionBudget, SelectionManifest,
};

fn keys(m: &SelectionManifest) -> BTreeSet<(String, usize)> {
    m.entries
        .iter()
        .map(|e| (e.image_id.clone(), e.patch_index))
        .collect()
}

fn stats_strategy() -> impl Strategy<Value = Vec<PatchStat>> {
    (1usize..200, any::<u64>())
        .prop_map(|(n, seed)| common::random_stats(&mut ChaCha8Rng::seed_from_u64(seed), n))
}

fn ratio() -> impl Strategy<Value = f64> {
    (1u32..=100).prop_map(|p| p as f64 / 100.0)
}

/// Image size, patch size, edge policy, mask and uncertainty.
fn image_case() -> impl Strategy<Value = (usize, usize, usize, usize, bool, Vec<bool>, Vec<f64>)> {
    (1usize..40, 1usize..40)
        .prop_flat_map(|(w, h)| (Just(w), Just(h), 1..=w, 1..=h, any::<bool>()))
        .prop_flat_map(|(w, h, pw, ph, crop)| {
            (
                Just(w),
                Just(h),
                Just(pw),
                Just(ph),
                Just(crop),
                prop::collection::vec(any::<bool>(), w * h),
                prop::collection::vec(0.0f64..std::f64::consts::LN_2, w * h),
            )
        })
}

proptest! {
    #[test]
    fn patch_stats_match_naive_loops((w, h, pw, ph, crop, m, u) in image_case()) {
        let policy = if crop { EdgePolicy::Crop } else { EdgePolicy::Exact };
        let grid = match make_grid((w, h), (pw, ph), policy) {
            Ok(g) => g,
            Err(_) => {
                prop_assert!(w % pw != 0 || h % ph != 0);
                return Ok(());
            }
        };
        let mask = BinaryMask::new(w, h, m.iter().map(|&b| b as u8).collect()).unwrap();
        let umap = UncertaintyMap::new(w, h, 2, u.clone()).unwrap();
        let stats = patch_stats(&mask, &umap, &grid, "img").unwrap();
        prop_assert_eq!(stats.len(), (w / pw) * (h / ph));

        let mut seen = vec![0u32; w * h];
        for s in &stats {
            let rect = grid.bounds(s.patch_index).unwrap();
            let (mut p, mut v) = (0u64, 0.0f64);
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    p += m[y * w + x] as u64;
                    v += u[y * w + x];
                    seen[y * w + x] += 1;
                }
            }
            prop_assert_eq!(s.ves_p, p);
            prop_assert!((s.ves_u - v).abs() <= 1e-9 * (1.0 + v));
        }
        // Patches tile the kept area exactly once and never touch the margin.
        for y in 0..h {
            for x in 0..w {
                let kept = x < grid.cols * pw && y < grid.rows * ph;
                prop_assert_eq!(seen[y * w + x], kept as u32);
            }
        }
        if policy == EdgePolicy::Exact {
            prop_assert_eq!(stats.iter().map(|s| s.ves_p).sum::<u64>(), mask.count_ones() as u64);
            let total: f64 = u.iter().sum();
            let summed: f64 = stats.iter().map(|s| s.ves_u).sum();
            prop_assert!((summed - total).abs() <= 1e-9 * (1.0 + total));
        }
    }

    #[test]
    fn cup_matches_oracle(stats in stats_strategy(), p1 in 1u64..=100, p2 in 1u64..=100) {
        let got = select_cup(&stats, p1 as f64 / 100.0, p2 as f64 / 100.0, Scope::Pooled).unwrap();
        let want: BTreeSet<_> = common::brute_force_cup(&stats, p1, p2).into_iter().collect();
        prop_assert_eq!(keys(&got), want);
    }

    #[test]
    fn cup_is_permutation_invariant(stats in stats_strategy(), c1 in ratio(), c2 in ratio(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = stats.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = select_cup(&stats, c1, c2, Scope::Pooled).unwrap();
        let b = select_cup(&shuffled, c1, c2, Scope::Pooled).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn cup_is_scale_invariant(stats in stats_strategy(), c1 in ratio(), c2 in ratio(), e in -6i32..=6) {
        let lambda = 2f64.powi(e);
        let scaled: Vec<PatchStat> = stats
            .iter()
            .map(|s| PatchStat { ves_u: s.ves_u * lambda, ..s.clone() })
            .collect();
        let a = select_cup(&stats, c1, c2, Scope::Pooled).unwrap();
        let b = select_cup(&scaled, c1, c2, Scope::Pooled).unwrap();
        prop_assert_eq!(keys(&a), keys(&b));
    }

    #[test]
    fn cup_is_a_subset_of_stage_one(stats in stats_strategy(), c1 in ratio(), c2 in ratio()) {
        let cup = select_cup(&stats, c1, c2, Scope::Pooled).unwrap();
        let stage1 = select_uncertainty_only(&stats, c1, Scope::Pooled).unwrap();
        prop_assert!(keys(&cup).is_subset(&keys(&stage1)));
        let budget = SelectionBudget::cascade(c1, c2, stats.len()).unwrap();
        prop_assert_eq!(cup.entries.len(), budget.n_selected);
        prop_assert_eq!(stage1.entries.len(), budget.stage1_count());
        // Within stage one, every selected patch dominates every rejected one.
        let chosen = keys(&cup);
        let min_sel = cup.entries.iter().map(|e| e.ves_p).min().unwrap();
        for e in &stage1.entries {
            if !chosen.contains(&(e.image_id.clone(), e.patch_index)) {
                prop_assert!(e.ves_p <= min_sel);
            }
        }
    }

    #[test]
    fn full_second_stage_is_uncertainty_only(stats in stats_strategy(), alpha in ratio()) {
        let cup = select_cup(&stats, alpha, 1.0, Scope::Pooled).unwrap();
        let single = select_uncertainty_only(&stats, alpha, Scope::Pooled).unwrap();
        prop_assert_eq!(keys(&cup), keys(&single));
    }

    #[test]
    fn per_image_scope_applies_budget_per_image(stats in stats_strategy(), c1 in ratio(), c2 in ratio()) {
        let m = select_cup(&stats, c1, c2, Scope::PerImage).unwrap();
        let ids: BTreeSet<&str> = stats.iter().map(|s| s.image_id.as_str()).collect();
        let mut total = 0;
        for id in ids {
            let own: Vec<PatchStat> = stats.iter().filter(|s| s.image_id == id).cloned().collect();
            let alone = select_cup(&own, c1, c2, Scope::Pooled).unwrap();
            let mine: BTreeSet<_> = m.entries_for(id).map(|e| (e.image_id.clone(), e.patch_index)).collect();
            prop_assert_eq!(mine, keys(&alone));
            total += alone.entries.len();
        }
        prop_assert_eq!(m.budget.n_selected, total);
        prop_assert_eq!(m.entries.len(), total);
    }

    #[test]
    fn random_selection_is_seed_deterministic(stats in stats_strategy(), alpha in ratio(), seed in any::<u64>()) {
        let a = select_random(&stats, alpha, seed, Scope::Pooled).unwrap();
        let b = select_random(&stats, alpha, seed, Scope::Pooled).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        let budget = SelectionBudget::single(alpha, stats.len()).unwrap();
        prop_assert_eq!(a.entries.len(), budget.n_selected);
        prop_assert_eq!(SelectionManifest::from_json(&a.to_json()).unwrap(), a);
    }
}

#[test]
fn random_selection_is_uniform() {
    let stats: Vec<PatchStat> = (0..20)
        .map(|i| PatchStat {
            image_id: "img".into(),
            patch_index: i,
            ves_p: i as u64,
            ves_u: (20 - i) as f64,
        })
        .collect();
    let trials = 10_000;
    let mut hits = [0u32; 20];
    for seed in 0..trials {
        let m = select_random(&stats, 0.10, seed, Scope::Pooled).unwrap();
        assert_eq!(m.entries.len(), 2);
        for e in &m.entries {
            hits[e.patch_index] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let freq = h as f64 / trials as f64;
        assert!(
            (freq - 0.10).abs() <= 0.01,
            "patch {i} chosen with frequency {freq}"
        );
    }
}

#[test]
fn grid_of_full_resolution_fundus_images() {
    let grid = make_grid((3900, 3072), (260, 256), EdgePolicy::Exact).unwrap();
    assert_eq!((grid.cols, grid.rows, grid.len()), (15, 12, 180));
    let last = grid.bounds(179).unwrap();
    assert_eq!((last.x1, last.y1), (3900, 3072));
}
