mod common;

use common::*;
use gsfix::raster::{pixel_traces, render_gaussians, render_naive, RenderOptions, RenderOutput};
use gsfix::scene::{CameraView, Gaussian, Intrinsics};
use nalgebra::{Isometry3, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// Non-square, not a multiple of the tile size.
fn odd_camera() -> CameraView {
    CameraView::new(Intrinsics::centered(30.0, 40, 36), Isometry3::identity(), 40, 36, 0).unwrap()
}

fn flat(seed: u64, n: usize) -> Vec<Gaussian> {
    let mut r = rng(seed);
    random_scene(&mut r, n, seed % 3 == 0).flatten_at_frame(0).unwrap()
}

fn max_diff(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let c = a.color.data.iter().zip(&b.color.data);
    let al = a.alpha.data.iter().zip(&b.alpha.data);
    c.chain(al).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_sum_to_alpha_and_stay_below_one(seed in any::<u64>(), n in 1usize..64) {
        let gs = flat(seed, n);
        let cam = odd_camera();
        let opts = RenderOptions::default();
        let out = render_gaussians(&gs, &cam, &opts);
        for (i, frags) in pixel_traces(&gs, &cam, &opts).iter().enumerate() {
            let sum: f64 = frags.iter().map(|f| f.weight).sum();
            prop_assert!(sum <= 1.0 + 1e-12, "pixel {i}: Σw = {sum}");
            prop_assert!((sum - out.alpha.data[i]).abs() <= 1e-12);
            if out.alpha.data[i] > 1e-4 {
                prop_assert!(out.depth.data[i].is_finite());
            }
        }
    }

    #[test]
    fn transmittance_never_increases(seed in any::<u64>(), n in 1usize..64) {
        let gs = flat(seed, n);
        let cam = odd_camera();
        for frags in pixel_traces(&gs, &cam, &RenderOptions::exact()) {
            let mut t = 1.0;
            for f in &frags {
                prop_assert!(f.transmittance <= t && f.transmittance > 0.0);
                prop_assert!(f.alpha >= 0.0 && f.alpha <= 0.999);
                t = f.transmittance * (1.0 - f.alpha);
            }
        }
    }

    #[test]
    fn input_order_does_not_matter(seed in any::<u64>(), n in 2usize..64) {
        let gs = flat(seed, n);
        let mut shuffled = gs.clone();
        shuffled.shuffle(&mut rng(seed ^ 0x5eed));
        let cam = odd_camera();
        let a = render_gaussians(&gs, &cam, &RenderOptions::default());
        let b = render_gaussians(&shuffled, &cam, &RenderOptions::default());
        prop_assert!(max_diff(&a, &b) <= 1e-6);
    }

    #[test]
    fn tiled_matches_naive(seed in any::<u64>(), n in 1usize..=256) {
        let gs = flat(seed, n);
        let cam = odd_camera();
        let opts = RenderOptions::default();
        let tiled = render_gaussians(&gs, &cam, &opts);
        let naive = render_naive(&gs, &cam, &opts);
        prop_assert!(max_diff(&tiled, &naive) <= 1e-5);
        for (a, b) in tiled.contrib.iter().zip(&naive.contrib) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn early_termination_is_bounded(seed in any::<u64>(), n in 1usize..128) {
        let gs = flat(seed, n);
        let cam = odd_camera();
        let cut = render_gaussians(&gs, &cam, &RenderOptions::default());
        let full = render_gaussians(&gs, &cam, &RenderOptions { termination: 0.0, ..RenderOptions::default() });
        let worst = cut.color.data.iter().zip(&full.color.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-3);
    }

    #[test]
    fn outputs_stay_in_range(seed in any::<u64>(), n in 0usize..96) {
        let gs = flat(seed, n.max(1));
        let out = render_gaussians(&gs[..n.min(gs.len())], &odd_camera(), &RenderOptions::default());
        prop_assert!(out.color.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.alpha.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.contrib.iter().all(|c| c.is_finite() && *c >= 0.0));
    }
}

#[test]
fn compositing_stops_once_transmittance_is_spent() {
    let cam = odd_camera();
    let gs: Vec<Gaussian> = (0..10)
        .map(|i| Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0 + 0.1 * i as f64), 2.0, 0.99, Vector3::new(0.2, 0.4, 0.6)))
        .collect();
    let out = render_gaussians(&gs, &cam, &RenderOptions::default());
    let traces = pixel_traces(&gs, &cam, &RenderOptions::default());
    let center = &traces[18 * 40 + 20];
    assert!(center.len() < gs.len());
    let last = center.last().unwrap();
    assert!(last.transmittance >= 1e-4);
    let t_end = last.transmittance * (1.0 - last.alpha);
    assert!(t_end < 1e-4);
    assert!((out.alpha.get(20, 18) - (1.0 - t_end)).abs() < 1e-12);
}

#[test]
fn concurrent_renders_agree() {
    let gs = flat(11, 48);
    let cam = odd_camera();
    let reference = render_gaussians(&gs, &cam, &RenderOptions::default());
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| render_gaussians(&gs, &cam, &RenderOptions::default()))).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    });
}
