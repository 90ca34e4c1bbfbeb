//! Tape gradients of every ascent objective against central finite differences.

use f128::f128;
use neurondream::imaginet::{bind_path, forward, target_value, ModelDims, ModelWeights};
use neurondream::optim::{embedding_objective, gumbel_noise, word_objective, WordMode};
use neurondream::tensor::{grad_check, grad_check_reference, Matrix, Tape};
use neurondream::{Layer, NeuronTarget, Path, Scalar};
use proptest::prelude::*;
use proptest::test_runner::Config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn toy() -> ModelWeights<f64> {
    let dims = ModelDims { vocab: 50, embed: 16, hidden: 16, visual: 8 };
    ModelWeights::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(2024))
}

fn normal(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, std).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(&mut rng)).collect()).unwrap()
}

fn targets() -> Vec<NeuronTarget> {
    vec![
        NeuronTarget::single(Path::Visual, Layer::Projection, 3),
        NeuronTarget::single(Path::Lang, Layer::Projection, 17),
        NeuronTarget::group(Path::Lang, Layer::Hidden, vec![1, 4, 9]),
    ]
}

fn word_error_f64(w: &ModelWeights<f64>, target: &NeuronTarget, mode: WordMode, tau: f64) -> f64 {
    let x = normal(5, 50, 1.0, 7);
    let noise: Matrix<f64> = gumbel_noise(5, 50, &mut ChaCha8Rng::seed_from_u64(8));
    let gumbel = mode == WordMode::Gumbel;
    grad_check(
        |tape: &mut Tape<'_, f64>, xv| {
            let nv = gumbel.then(|| tape.constant(&noise));
            Ok(word_objective(tape, w, target, xv, mode, tau, nv)?.0)
        },
        &x,
        STEP,
    )
    .unwrap()
}

#[test]
fn smooth_word_objectives_pass_same_precision_check() {
    let w = toy();
    for target in targets() {
        for (mode, tau) in [
            (WordMode::Logit, 1.0),
            (WordMode::Softmax, 1.0),
            (WordMode::Gumbel, 5.0),
            (WordMode::Gumbel, 1.0),
        ] {
            let err = word_error_f64(&w, &target, mode, tau);
            assert!(err < TOL, "{target} {mode:?} tau={tau}: {err}");
        }
    }
}

#[test]
fn cold_gumbel_passes_quad_reference_check() {
    let w = toy();
    let wq: ModelWeights<f128> = w.cast();
    let x = normal(5, 50, 1.0, 7);
    let noise: Matrix<f64> = gumbel_noise(5, 50, &mut ChaCha8Rng::seed_from_u64(8));
    let noise_q: Matrix<f128> = noise.cast();
    for target in targets() {
        let err = grad_check_reference(
            |tape: &mut Tape<'_, f64>, xv| {
                let nv = Some(tape.constant(&noise));
                Ok(word_objective(tape, &w, &target, xv, WordMode::Gumbel, 0.1, nv)?.0)
            },
            |tape: &mut Tape<'_, f128>, xv| {
                let nv = Some(tape.constant(&noise_q));
                Ok(word_objective(tape, &wq, &target, xv, WordMode::Gumbel, f128::lit(0.1), nv)?.0)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{target}: {err}");
    }
}

#[test]
fn embedding_objectives_pass_same_precision_check() {
    let w = toy();
    for target in targets() {
        let e = normal(5, 16, 0.5, 3);
        for lambda in [None, Some(2.0)] {
            let err = grad_check(
                |tape: &mut Tape<'_, f64>, ev| embedding_objective(tape, &w, &target, ev, lambda),
                &e,
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "{target} lambda={lambda:?}: {err}");
        }
    }
}

#[test]
fn quad_model_agrees_with_f64_model() {
    let w = toy();
    let wq: ModelWeights<f128> = w.cast();
    for target in targets() {
        let a = w.activation_of_tokens(&[3, 9, 27, 1, 44], &target).unwrap();
        let b = wq.activation_of_tokens(&[3, 9, 27, 1, 44], &target).unwrap().as_f64();
        assert!((a - b).abs() < 1e-13, "{target}: {a} vs {b}");
    }
}

proptest! {
    #![proptest_config(Config { cases: 24, failure_persistence: None, ..Config::default() })]

    #[test]
    fn forward_gradient_over_shapes(
        t in 1usize..6, d in 1usize..17, h in 1usize..17, v in 2usize..12, seed in any::<u64>(),
        lang in any::<bool>(), hidden in any::<bool>(),
    ) {
        let dims = ModelDims { vocab: v, embed: d, hidden: h, visual: 3 };
        let w = ModelWeights::<f64>::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let path = if lang { Path::Lang } else { Path::Visual };
        let layer = if hidden { Layer::Hidden } else { Layer::Projection };
        let target = NeuronTarget::single(path, layer, 0);
        let e = normal(t, d, 1.0, seed ^ 5);
        let err = grad_check(
            |tape: &mut Tape<'_, f64>, ev| {
                let pv = bind_path(tape, w.path(path));
                let fwd = forward(tape, ev, &pv)?;
                target_value(tape, &fwd, &target)
            },
            &e,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn softmax_relaxation_gradient_over_shapes(
        t in 1usize..5, v in 2usize..40, seed in any::<u64>(),
    ) {
        let dims = ModelDims { vocab: v, embed: 6, hidden: 5, visual: 3 };
        let w = ModelWeights::<f64>::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let target = NeuronTarget::single(Path::Visual, Layer::Projection, 1);
        let x = normal(t, v, 1.0, seed ^ 9);
        let err = grad_check(
            |tape: &mut Tape<'_, f64>, xv| Ok(word_objective(tape, &w, &target, xv, WordMode::Softmax, 1.0, None)?.0),
            &x,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }
}
