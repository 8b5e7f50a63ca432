mod common;

use common::*;
use gsedit::scene::{render_gradients, PARAMS_PER_GAUSSIAN};
use gsedit::Tensor;

#[test]
fn analytic_gradients_match_central_differences() {
    let mut failures = Vec::new();
    for seed in 0..100 {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, 5);
        let cam = random_camera(&mut r, 24);
        let target = random_image(&mut r, 24, 24);
        for m in gradient_mismatches(&scene, &cam, &target, 1e-2, 1e-6) {
            failures.push((seed, m));
        }
    }
    assert!(
        failures.is_empty(),
        "{} mismatches, first: {:?}",
        failures.len(),
        &failures[..failures.len().min(5)]
    );
}

#[test]
fn masked_loss_gradient_matches_restricted_difference() {
    let mut r = rng(1234);
    let scene = random_scene(&mut r, 5);
    let cam = random_camera(&mut r, 16);
    let target = random_image(&mut r, 16, 16);
    let mask = Tensor::new(
        vec![16, 16],
        (0..256).map(|p| if (p / 16) < 8 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let (_, g) = render_gradients(&scene, &cam, &target, Some(&mask)).unwrap();
    let loss = |s: &gsedit::scene::Scene| {
        let out = gsedit::scene::render(s, &cam);
        let mut acc = 0.0;
        for p in 0..128 {
            for c in 0..3 {
                acc += (out.color[p * 3 + c] - target.data()[p * 3 + c] as f64).powi(2);
            }
        }
        acc / (128.0 * 3.0)
    };
    let base = scene.to_params();
    for (i, a) in g.to_flat().into_iter().enumerate() {
        let eval = |d: f64| {
            let mut p = base.clone();
            p[i] += d;
            let mut s = scene.clone();
            s.set_params(&p);
            loss(&s)
        };
        let n = (eval(1e-7) - eval(-1e-7)) / 2e-7;
        let diff = (a - n).abs();
        assert!(
            diff < 1e-6 || diff < 1e-2 * a.abs().max(n.abs()),
            "param {i} ({}): {a} vs {n}",
            i % PARAMS_PER_GAUSSIAN
        );
    }
}
