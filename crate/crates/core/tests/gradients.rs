mod common;

use common::*;
use nightlift::kpn::{KpnConfig, KpnModel};
use nightlift::{apply_pixelwise_filter, filter_gradients, Image, KernelField, PaddingPolicy};
use rand::Rng;

const STEP: f64 = 1e-4;

fn filter_objective(img: &Image, ker: &KernelField, up: &Image, pad: PaddingPolicy) -> f64 {
    dot(apply_pixelwise_filter(img, ker, pad).unwrap().data(), up.data())
}

#[test]
fn filter_gradients_match_central_differences() {
    let mut r = rng(11);
    for inst in 0..20 {
        let h = r.random_range(2..=5);
        let w = r.random_range(2..=5);
        let c = [1, 3][inst % 2];
        let k = [1, 3, 5][inst % 3];
        let pad = if inst % 4 == 0 { PaddingPolicy::Zero } else { PaddingPolicy::Replicate };
        let img = random_image(h, w, c, &mut r);
        let ker = random_kernels(k, 1, h, w, &mut r);
        let up = random_image(h, w, c, &mut r);
        let (gi, gk) = filter_gradients(&img, &ker, &up, pad).unwrap();

        let mut fd_img = vec![0.0; img.len()];
        for (i, slot) in fd_img.iter_mut().enumerate() {
            let mut p = img.clone();
            p.data_mut()[i] += STEP;
            let mut m = img.clone();
            m.data_mut()[i] -= STEP;
            *slot = (filter_objective(&p, &ker, &up, pad) - filter_objective(&m, &ker, &up, pad)) / (2.0 * STEP);
        }
        let mut fd_ker = vec![0.0; ker.data().len()];
        for (i, slot) in fd_ker.iter_mut().enumerate() {
            let mut p = ker.clone();
            p.data_mut()[i] += STEP;
            let mut m = ker.clone();
            m.data_mut()[i] -= STEP;
            *slot = (filter_objective(&img, &p, &up, pad) - filter_objective(&img, &m, &up, pad)) / (2.0 * STEP);
        }
        assert!(rel_err(gi.data(), &fd_img) < 1e-4, "instance {inst}: image gradient");
        assert!(rel_err(gk.data(), &fd_ker) < 1e-4, "instance {inst}: kernel gradient");
    }
}

#[test]
fn constant_image_kernel_gradient_is_channel_summed_upstream() {
    let mut r = rng(12);
    let img = Image::filled(6, 6, 3, 0.7).unwrap();
    let ker = random_kernels(3, 1, 6, 6, &mut r);
    let up = random_image(6, 6, 3, &mut r);
    let (_, gk) = filter_gradients(&img, &ker, &up, PaddingPolicy::Replicate).unwrap();
    for y in 1..5 {
        for x in 1..5 {
            let expected = 0.7 * (0..3).map(|c| up.get(y, x, c)).sum::<f64>();
            for u in 0..3 {
                for v in 0..3 {
                    assert!((gk.tap(0, u, v, y, x) - expected).abs() < 1e-12);
                }
            }
        }
    }
}

/// `⟨U, translate(I)⟩` as a function of the parameters.
fn kpn_objective(model: &KpnModel, img: &Image, up: &Image) -> f64 {
    dot(model.translate(img).unwrap().data(), up.data())
}

fn check_kpn(config: KpnConfig, seed: u64) {
    let mut r = rng(seed);
    let mut model = KpnModel::new(config).unwrap();
    // Move away from the near-identity start so every layer matters.
    for p in model.params_mut() {
        *p += r.random_range(-0.05..0.05);
    }
    let img = random_image(16, 16, 3, &mut r);
    let up = random_image(16, 16, 3, &mut r);
    let mut grads = vec![0.0; model.n_params()];
    model.translate_with_grad(&img, &up, &mut grads).unwrap();

    let n = model.n_params();
    let picks: Vec<usize> = (0..60).map(|_| r.random_range(0..n)).chain([0, n - 1]).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let eps = 1e-5;
    for &i in &picks {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + eps;
        let plus = kpn_objective(&model, &img, &up);
        model.params_mut()[i] = orig - eps;
        let minus = kpn_objective(&model, &img, &up);
        model.params_mut()[i] = orig;
        analytic.push(grads[i]);
        numeric.push((plus - minus) / (2.0 * eps));
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-3, "seed {seed}: relative error {err:.3e}");
    assert!(analytic.iter().any(|g| g.abs() > 0.0));
}

#[test]
fn kpn_end_to_end_gradient() {
    for seed in 0..3 {
        check_kpn(
            KpnConfig {
                base_channels: 4,
                depth: 1,
                seed,
                ..Default::default()
            },
            100 + seed,
        );
    }
}

#[test]
fn kpn_gradient_with_per_channel_kernels_and_depth_two() {
    check_kpn(
        KpnConfig {
            k: 3,
            base_channels: 3,
            depth: 2,
            per_channel_kernels: true,
            ..Default::default()
        },
        7,
    );
}

#[test]
fn fresh_model_has_nonzero_parameter_gradient() {
    let mut r = rng(5);
    let model = KpnModel::new(KpnConfig {
        base_channels: 4,
        depth: 2,
        ..Default::default()
    })
    .unwrap();
    let img = random_image(16, 16, 3, &mut r);
    let up = random_image(16, 16, 3, &mut r);
    let mut grads = vec![0.0; model.n_params()];
    model.translate_with_grad(&img, &up, &mut grads).unwrap();
    assert!(grads.iter().map(|g| g.abs()).sum::<f64>() > 0.0);
}
