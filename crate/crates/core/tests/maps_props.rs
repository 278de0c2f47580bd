mod common;

use proptest::prelude::*;

use vesselpatch::maps::{self, LogitMap, ProbabilityMap, ResampleMethod, SIMPLEX_TOLERANCE};

fn logit_map(max_c: usize) -> impl Strategy<Value = LogitMap> {
    (1usize..8, 1usize..8, 2usize..=max_c).prop_flat_map(|(w, h, c)| {
        prop::collection::vec(-60.0f32..60.0, w * h * c)
            .prop_map(move |data| LogitMap::new(w, h, c, data).unwrap())
    })
}

fn prob_map() -> impl Strategy<Value = ProbabilityMap> {
    logit_map(4).prop_map(|l| maps::softmax(&l))
}

fn strict_argmax(px: &[f32]) -> Option<usize> {
    let best = px.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let winners: Vec<usize> = (0..px.len()).filter(|&i| px[i] == best).collect();
    (winners.len() == 1).then(|| winners[0])
}

proptest! {
    #[test]
    fn softmax_lands_on_simplex(l in logit_map(5)) {
        let p = maps::softmax(&l);
        for px in p.data().chunks(l.channels()) {
            let s: f32 = px.iter().sum();
            prop_assert!((s - 1.0).abs() <= SIMPLEX_TOLERANCE);
            prop_assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_ignores_per_pixel_shift(l in logit_map(4), shift in -200.0f32..200.0) {
        let shifted: Vec<f32> = l.data().iter().map(|v| v + shift).collect();
        let l2 = LogitMap::new(l.width(), l.height(), l.channels(), shifted.clone()).unwrap();
        let (a, b) = (maps::softmax(&l), maps::softmax(&l2));
        // The shift itself rounds in f32; compare against the shifted logits'
        // own reference rather than demanding bit equality.
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let px = i / l.channels();
            let z: Vec<f64> = shifted[px * l.channels()..(px + 1) * l.channels()].iter().map(|&v| v as f64).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let want = ((z[i % l.channels()] - m).exp() / denom) as f32;
            prop_assert!((y - want).abs() <= 1e-6);
            prop_assert!((x - y).abs() <= 1e-4 * (1.0 + shift.abs()));
        }
    }

    #[test]
    fn argmax_survives_softmax(l in logit_map(2)) {
        let mask = maps::argmax_mask(&maps::softmax(&l)).unwrap();
        for y in 0..l.height() {
            for x in 0..l.width() {
                if let Some(win) = strict_argmax(l.pixel(x, y)) {
                    let p = maps::softmax(&l);
                    // Saturated probabilities may tie after rounding; ties go to background.
                    if strict_argmax(p.pixel(x, y)).is_some() {
                        prop_assert_eq!(mask.get(x, y) as usize, win);
                    } else {
                        prop_assert_eq!(mask.get(x, y), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn entropy_stays_in_bounds(p in prob_map()) {
        let u = maps::entropy_map(&p);
        let cap = (p.channels() as f64).ln();
        prop_assert!(u.data().iter().all(|&v| (0.0..=cap).contains(&v)));
    }

    #[test]
    fn entropy_matches_log_partition_route(l in logit_map(5)) {
        let u = maps::entropy_map(&maps::softmax(&l));
        for (i, got) in u.data().iter().enumerate() {
            let c = l.channels();
            let z: Vec<f64> = l.data()[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
            prop_assert!((got - common::entropy_from_logits(&z)).abs() <= 1e-6);
        }
    }

    #[test]
    fn resample_identity_and_simplex(p in prob_map(), w in 1usize..20, h in 1usize..20, bilinear in any::<bool>()) {
        let method = if bilinear { ResampleMethod::Bilinear } else { ResampleMethod::Nearest };
        let same = maps::resample(&p, p.width(), p.height(), method).unwrap();
        prop_assert_eq!(same.data(), p.data());
        let r = maps::resample(&p, w, h, method).unwrap();
        prop_assert_eq!((r.width(), r.height(), r.channels()), (w, h, p.channels()));
        for px in r.data().chunks(p.channels()) {
            let s: f32 = px.iter().sum();
            prop_assert!((s - 1.0).abs() <= SIMPLEX_TOLERANCE);
        }
    }

    #[test]
    fn nearest_upsampling_copies_source_pixels(p in prob_map(), fx in 1usize..4, fy in 1usize..4) {
        let r = maps::resample(&p, p.width() * fx, p.height() * fy, ResampleMethod::Nearest).unwrap();
        for y in 0..r.height() {
            for x in 0..r.width() {
                prop_assert_eq!(r.pixel(x, y), p.pixel(x / fx, y / fy));
            }
        }
    }
}

#[test]
fn bilinear_checkerboard_matches_tent_kernel() {
    let cells = [[0.9, 0.1], [0.2, 0.8]];
    let src: Vec<Vec<[f64; 2]>> = (0..2)
        .map(|y| (0..2).map(|x| cells[(x + y) % 2]).collect())
        .collect();
    let data: Vec<f32> = src
        .iter()
        .flatten()
        .flat_map(|p| [p[0] as f32, p[1] as f32])
        .collect();
    let p = ProbabilityMap::new(2, 2, 2, data).unwrap();
    let r = maps::resample(&p, 4, 4, ResampleMethod::Bilinear).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            let sx = (x as f64 + 0.5) / 2.0 - 0.5;
            let sy = (y as f64 + 0.5) / 2.0 - 0.5;
            let want = common::tent_sample(&src, sx, sy);
            let got = r.pixel(x, y);
            for c in 0..2 {
                assert!(
                    (got[c] as f64 - want[c]).abs() <= 1e-6,
                    "({x}, {y}) channel {c}: {} vs {}",
                    got[c],
                    want[c]
                );
            }
        }
    }
    // The corners replicate the source corners exactly.
    assert_eq!(r.pixel(0, 0), p.pixel(0, 0));
    assert_eq!(r.pixel(3, 3), p.pixel(1, 1));
}

#[test]
fn constant_map_resamples_to_itself() {
    let p = ProbabilityMap::constant(3, 5, &[0.125, 0.5, 0.375]).unwrap();
    for method in [ResampleMethod::Nearest, ResampleMethod::Bilinear] {
        let r = maps::resample(&p, 11, 7, method).unwrap();
        assert!(r.data().chunks(3).all(|px| px == [0.125, 0.5, 0.375]));
    }
}
