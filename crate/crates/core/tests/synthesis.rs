//! Degradation synthesis contract.

use mdr_core::degradation::{DegradationSpec, Factor, Severity, SeverityRange, Split, TaskConfig};
use mdr_core::scene::generate_scene;
use mdr_core::synth::{aligned_views, apply_degradation, compose, crop, gaussian_blur, symmetric_index, view_window};
use mdr_core::Tensor;
use proptest::prelude::*;

fn config(fs: &[Factor]) -> TaskConfig {
    let split = if fs.is_empty() { Split::Clean } else { Split::Seen };
    let name: Vec<&str> = fs.iter().map(|f| f.name()).collect();
    TaskConfig::new(name.join("+"), fs.iter().map(|f| SeverityRange::default_for(*f)).collect(), split).unwrap()
}

#[test]
fn blur_matches_dense_convolution_and_preserves_sum() {
    let img = Tensor::from_fn(&[1, 8, 8], |i| ((i * 29 + 3) % 17) as f64 / 16.0);
    let sigma = 1.0;
    let fast = gaussian_blur(&img, 1, 8, 8, sigma);
    // dense 2-D kernel with symmetric extension
    let r = (3.0 * sigma as f64).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = taps.iter().sum();
    for y in 0..8isize {
        for x in 0..8isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (symmetric_index(y + dy, 8), symmetric_index(x + dx, 8));
                    acc += taps[(dy + r) as usize] * taps[(dx + r) as usize] / (z * z) * img.data()[sy * 8 + sx];
                }
            }
            assert!((acc - fast.data()[(y * 8 + x) as usize]).abs() < 1e-12);
        }
    }
    let spec = DegradationSpec::new(Severity::Blur { sigma });
    let out = apply_degradation(&img, &spec, 0).unwrap();
    assert!((out.sum() - img.sum()).abs() < 1e-4);
}

#[test]
fn severity_out_of_range_is_rejected() {
    let img = Tensor::full(&[3, 8, 8], 0.5);
    assert!(apply_degradation(&img, &DegradationSpec::new(Severity::Noise { sigma: -0.1 }), 0).is_err());
    assert!(apply_degradation(&img, &DegradationSpec::new(Severity::Haze { transmission: 1.5, airlight: 0.9 }), 0).is_err());
}

#[test]
fn composition_labels_and_identity() {
    let img = generate_scene(3, 0, 32, 32);
    let (out, label) = compose(&img, &config(&[]), 5).unwrap();
    assert_eq!(out, img);
    assert!(label.is_clean());
    let (_, label) = compose(&img, &config(&[Factor::Rain, Factor::Haze]), 5).unwrap();
    assert_eq!(label.bits(), "10100000");
}

#[test]
fn aligned_views_share_one_window() {
    let scene = generate_scene(1, 4, 64, 64);
    let cfgs: Vec<TaskConfig> = vec![config(&[]), config(&[Factor::Noise]), config(&[Factor::Haze, Factor::Blur])];
    let refs: Vec<&TaskConfig> = cfgs.iter().collect();
    let views = aligned_views(&scene, 4, &refs, 40, 11).unwrap();
    assert_eq!(views.len(), 3);
    let (y0, x0) = view_window(64, 64, 40, 4, 11).unwrap();
    assert_eq!(views[0].0, crop(&scene, y0, x0, 40, 40));
    // the haze view is an affine map of the clean crop inside the shared window
    let (full, _) = compose(&scene, &cfgs[1], mdr_core::rng::derive_seed(11, &[4, mdr_core::rng::hash_str(&cfgs[1].name)])).unwrap();
    assert_eq!(views[1].0, crop(&full, y0, x0, 40, 40));
    assert!(aligned_views(&scene, 4, &refs, 65, 11).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn compose_is_deterministic_and_in_range(bits in 1u8..=255, seed in 0u64..1_000_000, scene in 0u64..50) {
        let mut fs: Vec<Factor> = Factor::ALL.iter().copied().filter(|f| bits >> f.index() & 1 == 1).collect();
        if fs.contains(&Factor::LowLight) && fs.contains(&Factor::OverExposure) {
            fs.retain(|f| *f != Factor::OverExposure);
        }
        fs.truncate(4);
        let cfg = config(&fs);
        let img = generate_scene(7, scene, 32, 32);
        let (a, la) = compose(&img, &cfg, seed).unwrap();
        let (b, lb) = compose(&img, &cfg, seed).unwrap();
        prop_assert_eq!(la, lb);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        for f in Factor::ALL {
            prop_assert_eq!(la.get(f), fs.contains(&f));
        }
    }
}
