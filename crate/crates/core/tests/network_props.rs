mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavescore_core::autodiff::NormMode;
use wavescore_core::model::{
    build_conditional_denoiser_with, build_pixel_denoiser, jacobian_row, plain_network, LocalConfig,
};
use wavescore_core::train::{train_denoiser, TrainConfig, TrainMode};
use wavescore_core::{Dataset, DatasetSpec, Model, Tensor};

#[test]
fn backprop_matches_finite_differences_on_five_layers() {
    let spec = plain_network("fd", 2, 2, 3, &[3, 1, 3, 1, 3], true).unwrap();
    let m: Model<f64> = Model::init(spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
    let t = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
    for mode in [NormMode::Train, NormMode::Eval] {
        let (e, _) = common::worst_gradient_error(&m, &x, &t, mode, 1e-6);
        assert!(e < 1e-5, "{mode:?}: worst relative error {e:e}");
    }
}

#[test]
fn jacobian_row_vanishes_outside_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for rf in [5, 13] {
        let m: Model<f64> = build_conditional_denoiser_with(&LocalConfig {
            width: 6,
            conv_layers: 8,
            seed: rf as u64,
            ..LocalConfig::new(rf)
        })
        .unwrap()
        .cast();
        assert_eq!(m.receptive_field(), rf);
        let half = (rf / 2) as isize;
        for _ in 0..5 {
            let x = Tensor::randn(&[4, 24, 24], 1.0, &mut rng);
            let (oc, r, c) = (rng.gen_range(0..3), rng.gen_range(0..24), rng.gen_range(0..24));
            let row = jacobian_row(&m, &x, (oc, r, c)).unwrap();
            let mut inside = 0.0f64;
            for ch in 0..4 {
                for i in 0..24 {
                    for j in 0..24 {
                        let v = row.get(&[ch, i, j]).unwrap();
                        let near = (i as isize - r as isize).abs() <= half && (j as isize - c as isize).abs() <= half;
                        if near {
                            inside = inside.max(v.abs());
                        } else {
                            assert_eq!(v, 0.0, "rf {rf}: nonzero at {ch},{i},{j} for output {oc},{r},{c}");
                        }
                    }
                }
            }
            assert!(inside > 0.0);
        }
    }
}

#[test]
fn jacobian_row_is_the_adaptive_filter() {
    // For a bias-free ReLU network in eval mode, f(y) = J(y) y exactly.
    let m: Model<f64> = build_pixel_denoiser(&LocalConfig {
        width: 6,
        conv_layers: 6,
        ..LocalConfig::new(7)
    })
    .unwrap()
    .cast();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = Tensor::randn(&[1, 12, 12], 1.0, &mut rng);
    let f = m.apply(&y).unwrap();
    for (r, c) in [(0, 0), (5, 7), (11, 3)] {
        let row = jacobian_row(&m, &y, (0, r, c)).unwrap();
        let lin = row.dot(&y).unwrap();
        let v = f.get(&[0, r, c]).unwrap();
        assert!((lin - v).abs() < 1e-10 * v.abs().max(1.0), "{lin} vs {v}");
    }
}

fn homogeneity_gap(m: &Model<f32>, y: &Tensor<f64>) -> f64 {
    let f1: Tensor<f64> = m.apply(&y.cast()).unwrap().cast();
    let f2: Tensor<f64> = m.apply(&y.scale(2.0).cast()).unwrap().cast();
    f2.sub(&f1.scale(2.0)).unwrap().max_abs() / f1.max_abs()
}

#[test]
fn random_and_trained_models_are_homogeneous() {
    let mut m: Model<f32> = build_pixel_denoiser(&LocalConfig {
        width: 8,
        conv_layers: 5,
        ..LocalConfig::new(5)
    })
    .unwrap();
    let data = Dataset::load(&DatasetSpec::toy_faces(16, 16, 1, 4)).unwrap();
    let y = &data.test[0];
    assert!(homogeneity_gap(&m, y) < 1e-4);
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: Some(20),
        ..TrainConfig::default()
    };
    train_denoiser(&mut m, &data.train, &cfg, TrainMode::Lowpass { depth: 0 }).unwrap();
    assert!(homogeneity_gap(&m, y) < 1e-4);
}

#[test]
fn translation_equivariant_away_from_borders() {
    let m: Model<f64> = build_pixel_denoiser(&LocalConfig {
        width: 5,
        conv_layers: 6,
        ..LocalConfig::new(9)
    })
    .unwrap()
    .cast();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let patch = Tensor::randn(&[8, 8], 1.0, &mut rng);
    let place = |r0: usize, c0: usize| {
        let mut x = Tensor::<f64>::zeros(&[1, 32, 32]);
        for i in 0..8 {
            for j in 0..8 {
                x.set(&[0, r0 + i, c0 + j], patch.get(&[i, j]).unwrap()).unwrap();
            }
        }
        x
    };
    let (dr, dc) = (3, 5);
    let a = m.apply(&place(8, 8)).unwrap();
    let b = m.apply(&place(8 + dr, 8 + dc)).unwrap();
    for i in 0..32 - dr {
        for j in 0..32 - dc {
            let u = a.get(&[0, i, j]).unwrap();
            let v = b.get(&[0, i + dr, j + dc]).unwrap();
            assert!((u - v).abs() < 1e-12, "({i},{j}): {u} vs {v}");
        }
    }
}
