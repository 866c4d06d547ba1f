mod common;

use gsfix::image::{Image, Plane};
use gsfix::loss::{l_rgb, l_ssim, ssim, CombinedLoss, LossView, LossWeights, SparseDepth, ViewKind};
use gsfix::raster::{ColoredPoint, RenderOutput};
use gsfix::scene::{pose_from_matrix, CameraView, Intrinsics};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::Rng;

/// Direct windowed SSIM: builds the 2D Gaussian kernel explicitly and
/// evaluates statistics per window position.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    let mut k = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            s += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=a.height - 11 {
            for x0 in 0..=a.width - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = k[i][j] / s;
                        let x = a.pixel(x0 + j, y0 + i)[c];
                        let y = b.pixel(x0 + j, y0 + i)[c];
                        mx += w * x;
                        my += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn noise(seed: u64, w: usize, h: usize) -> Image {
    let mut r = common::rng(seed);
    Image::from_fn(w, h, |_, _| [r.random(), r.random(), r.random()])
}

#[test]
fn ssim_matches_direct_windowed_reference() {
    for seed in 0..4 {
        let a = noise(seed, 13 + seed as usize, 15);
        let mut b = a.clone();
        let mut r = common::rng(100 + seed);
        for v in b.data.iter_mut() {
            *v = (*v + r.random_range(-0.2..0.2)).clamp(0.0, 1.0);
        }
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let a = noise(7, 14, 13);
    let b = noise(8, 14, 13);
    let g = l_ssim(&a, &b).unwrap().grad;
    let eps = 1e-6;
    for i in (0..a.data.len()).step_by(7) {
        let mut p = a.clone();
        p.data[i] += eps;
        let mut m = a.clone();
        m.data[i] -= eps;
        let fd = (l_ssim(&p, &b).unwrap().value - l_ssim(&m, &b).unwrap().value) / (2.0 * eps);
        assert!((fd - g.data[i]).abs() < 1e-8 + 1e-5 * fd.abs(), "i={i} fd {fd} an {}", g.data[i]);
    }
}

fn render_of(color: Image, depth: Plane) -> RenderOutput {
    let (w, h) = color.shape();
    RenderOutput {
        color,
        depth,
        alpha: Plane::filled(w, h, 1.0),
        contrib: Vec::new(),
    }
}

#[test]
fn combined_weighting_and_gradient() {
    let (w, h) = (12, 12);
    let renders = [
        render_of(noise(1, w, h), common::random_plane(&mut common::rng(1), w, h, 1.0, 10.0)),
        render_of(noise(2, w, h), common::random_plane(&mut common::rng(2), w, h, 1.0, 10.0)),
        render_of(noise(3, w, h), common::random_plane(&mut common::rng(3), w, h, 1.0, 10.0)),
    ];
    let targets = [noise(11, w, h), noise(12, w, h), noise(13, w, h)];
    let mut mask = vec![false; w * h];
    for i in (0..w * h).step_by(3) {
        mask[i] = true;
    }
    let sd = SparseDepth {
        depth: common::random_plane(&mut common::rng(9), w, h, 1.0, 10.0),
        mask,
    };
    let loss = CombinedLoss::new(LossWeights::default());
    let eval = |rs: &[RenderOutput]| {
        let src = [
            LossView { id: "a", render: &rs[0], target: &targets[0], depth: Some(&sd) },
            LossView { id: "b", render: &rs[1], target: &targets[1], depth: None },
        ];
        let novel = [LossView { id: "n", render: &rs[2], target: &targets[2], depth: Some(&sd) }];
        loss.evaluate(&src, &novel).unwrap()
    };
    let out = eval(&renders);
    let r = &out.report;
    let wts = LossWeights::default();
    let expect_src = wts.rgb * r.term("src_rgb").unwrap() + wts.ssim * r.term("src_ssim").unwrap() + wts.depth * r.term("src_depth").unwrap();
    assert!((r.term("src").unwrap() - expect_src).abs() < 1e-12);
    assert!((r.total - (r.term("src").unwrap() + 0.5 * r.term("novel").unwrap())).abs() < 1e-12);
    assert_eq!(r.views.len(), 3);
    assert_eq!(r.views[2].kind, ViewKind::Novel);
    // Depth supervision is ignored on novel views.
    assert!(out.novel_grads[0].depth.data.iter().all(|&g| g == 0.0));
    assert!(r.term("src_lpips").is_none());

    // Finite differences through the whole combined objective.
    let eps = 1e-7;
    let grads = [&out.src_grads[0], &out.src_grads[1], &out.novel_grads[0]];
    for v in 0..3 {
        for i in (0..w * h * 3).step_by(17) {
            let mut p = renders.clone();
            p[v].color.data[i] += eps;
            let mut m = renders.clone();
            m[v].color.data[i] -= eps;
            let fd = (eval(&p).report.total - eval(&m).report.total) / (2.0 * eps);
            assert!((fd - grads[v].color.data[i]).abs() < 1e-6, "view {v} i {i}: {fd} vs {}", grads[v].color.data[i]);
        }
        for i in (0..w * h).step_by(5) {
            let mut p = renders.clone();
            p[v].depth.data[i] += eps;
            let mut m = renders.clone();
            m[v].depth.data[i] -= eps;
            let fd = (eval(&p).report.total - eval(&m).report.total) / (2.0 * eps);
            assert!((fd - grads[v].depth.data[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn combined_requires_source_views() {
    let loss = CombinedLoss::default();
    assert!(loss.evaluate(&[], &[]).is_err());
}

#[test]
fn sparse_depth_keeps_nearest_point() {
    let cam = CameraView::new(
        Intrinsics::centered(10.0, 8, 8),
        pose_from_matrix(Matrix3::identity(), Vector3::zeros()).unwrap(),
        8,
        8,
        2,
    )
    .unwrap();
    let pt = |z: f64, frame| ColoredPoint {
        position: Vector3::new(0.0, 0.0, z),
        color: [0; 3],
        frame,
    };
    let points = [pt(5.0, None), pt(3.0, None), pt(1.0, Some(7)), pt(-1.0, None), pt(2.5, Some(2))];
    let sd = SparseDepth::from_points(&points, &cam);
    assert_eq!(sd.mask.iter().filter(|m| **m).count(), 1);
    assert_eq!(sd.depth.get(4, 4), 2.5);
}

proptest! {
    #[test]
    fn l1_is_nonnegative_and_symmetric(seed in 0u64..1000) {
        let a = noise(seed, 11, 11);
        let b = noise(seed + 5000, 11, 11);
        let ab = l_rgb(&a, &b).unwrap().value;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - l_rgb(&b, &a).unwrap().value).abs() < 1e-15);
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
    }
}
