use gsfix::evalx::{lateral_shift, mean_psnr, psnr};
use gsfix::image::Image;
use gsfix::raster::{render, render_points, DEFAULT_POINT_SIGMA};
use gsfix::scene::Scene;
use gsfix::synth::{default_suite, degrade, generate, DegradeProfile, SynthSpec};
use proptest::prelude::*;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        frames: 6,
        width: 48,
        height: 40,
        focal: 38.0,
        building_count: 3,
        ..SynthSpec::default()
    }
}

#[test]
fn same_seed_same_everything() {
    let a = generate(&small(3)).unwrap();
    let b = generate(&small(3)).unwrap();
    assert_eq!(a.scene, b.scene);
    assert_eq!(a.cameras, b.cameras);
    assert_eq!(a.points, b.points);
    let cam = lateral_shift(&a.cameras[2], 2.5).unwrap();
    assert_eq!(a.gt_image(&cam).unwrap(), b.gt_image(&cam).unwrap());
    let c = generate(&small(4)).unwrap();
    assert_ne!(a.scene, c.scene);
}

#[test]
fn ground_only_scene_fills_the_lower_half() {
    let s = generate(&SynthSpec {
        building_count: 0,
        actor_count: 0,
        ..small(1)
    })
    .unwrap();
    assert!(s.scene.actors.is_empty());
    let ground = Scene {
        distant: Vec::new(),
        ..s.scene.clone()
    };
    let cam = &s.cameras[0];
    let full = render(&s.scene, cam).unwrap();
    let g = render(&ground, cam).unwrap();
    let (w, h) = (cam.width as usize, cam.height as usize);
    for y in h / 2 + 2..h {
        for x in 0..w {
            let alpha = g.alpha.get(x, y);
            assert!(alpha > 0.95, "({x},{y}) alpha {alpha}");
            // The shell sits behind the ground and only fills what is left.
            let (a, b) = (full.color.pixel(x, y), g.color.pixel(x, y));
            assert!((0..3).all(|k| (a[k] - b[k]).abs() <= 1.0 - alpha + 1e-9), "({x},{y}) {a:?} vs {b:?}");
        }
    }
    // Above the horizon only sky remains.
    assert!((0..w).all(|x| g.alpha.get(x, 0) < 1e-3));
}

#[test]
fn point_cloud_render_is_a_rough_likeness() {
    // Point maps carry no sky; they are composited over the sky color before
    // comparison.
    for spec in default_suite() {
        let s = generate(&spec).unwrap();
        let sky = s.scene.distant[0].color;
        for cam in &s.cameras {
            let r = render_points(&s.points, cam, DEFAULT_POINT_SIGMA);
            let over = Image::from_fn(cam.width as usize, cam.height as usize, |x, y| {
                let (c, a) = (r.color.pixel(x, y), r.alpha.get(x, y));
                std::array::from_fn(|k| c[k] + (1.0 - a) * sky[k])
            });
            let p = psnr(&over, &s.gt_image(cam).unwrap()).unwrap();
            assert!(p >= 18.0, "scene {} frame {}: {p:.2} dB", spec.seed, cam.frame_index);
        }
    }
}

#[test]
fn actors_move_at_least_as_fast_as_the_ego() {
    for spec in default_suite() {
        let s = generate(&spec).unwrap();
        for a in &s.scene.actors {
            for p in a.track.poses.windows(2) {
                let dx = p[1].translation.vector.x - p[0].translation.vector.x;
                assert!(dx >= spec.speed - 1e-9, "actor {} advances {dx}", a.track.id);
            }
        }
    }
}

#[test]
fn zero_profile_leaves_the_scene_alone() {
    let s = generate(&small(2)).unwrap();
    assert_eq!(degrade(&s.scene, &DegradeProfile::none()).unwrap(), s.scene);
}

#[test]
fn dropping_everything_keeps_the_shell() {
    let s = generate(&small(2)).unwrap();
    let d = degrade(
        &s.scene,
        &DegradeProfile {
            drop: 1.0,
            ..DegradeProfile::none()
        },
    )
    .unwrap();
    assert!(d.background.is_empty());
    assert!(d.actors.iter().all(|a| a.gaussians.is_empty()));
    assert_eq!(d.distant, s.scene.distant);
}

#[test]
fn default_degradation_hurts_extrapolation() {
    let s = generate(&default_suite()[0]).unwrap();
    let d = degrade(&s.scene, &DegradeProfile::default()).unwrap();
    let cams: Vec<_> = s.cameras.iter().step_by(4).map(|c| lateral_shift(c, 3.0).unwrap()).collect();
    let clean = mean_psnr(&s.scene, &cams, &s).unwrap().unwrap();
    let worse = mean_psnr(&d, &cams, &s).unwrap().unwrap();
    assert!(worse < clean - 3.0, "{clean:.2} -> {worse:.2}");
}

#[test]
fn bad_specs_are_rejected() {
    assert!(generate(&SynthSpec { frames: 0, ..small(0) }).is_err());
    assert!(generate(&SynthSpec { point_keep: 1.5, ..small(0) }).is_err());
    assert!(SynthSpec::from_toml("frames = 4\nwheels = 3\n").is_err());
    assert!(degrade(&Scene::default(), &DegradeProfile { drop: -0.1, ..DegradeProfile::none() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn degraded_scenes_stay_valid(
        seed in any::<u64>(),
        drop in 0.0f64..1.0,
        opacity_sigma in 0.0f64..5.0,
        position_sigma in 0.0f64..3.0,
        color_sigma in 0.0f64..5.0,
    ) {
        let s = generate(&SynthSpec { building_count: 1, frames: 4, ..small(seed % 8) }).unwrap();
        let p = DegradeProfile { seed, drop, opacity_sigma, position_sigma, color_sigma };
        let d = degrade(&s.scene, &p).unwrap();
        prop_assert!(d.validate().is_ok());
        prop_assert!(d.len() <= s.scene.len());
        prop_assert_eq!(degrade(&s.scene, &p).unwrap(), d);
    }
}
