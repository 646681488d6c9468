use algebraformer::autodiff::{Tape, Tensor, GRADCHECK_STEP};
use algebraformer::linalg::DenseMatrix;
use algebraformer::model::{self, ModelConfig, ModelWeights};
use algebraformer::seeding;
use rand::Rng as _;

fn desk_for(n: usize) -> ModelWeights {
    model::init_weights(&ModelConfig::for_systems("desk", n).unwrap(), 17).unwrap()
}

fn random_system(rng: &mut seeding::Rng, n: usize) -> (DenseMatrix, Vec<f64>) {
    let a = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-10.0..10.0));
    let b = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    (a, b)
}

#[test]
fn output_length_equals_token_count() {
    let w = desk_for(8);
    let mut rng = seeding::rng(1);
    for n in 1..=8 {
        let tokens = Tensor::new(vec![n, 9], (0..n * 9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(model::forward(&w, &tokens).unwrap().len(), n);
    }
    let too_many = Tensor::zeros(&[9, 9]);
    assert!(model::forward(&w, &too_many).is_err());
}

#[test]
fn outputs_finite_on_random_systems() {
    let w = desk_for(6);
    let mut rng = seeding::rng(2);
    for _ in 0..100 {
        let (a, b) = random_system(&mut rng, 6);
        let y = model::forward(&w, &model::encode_system(&a, &b, 6).unwrap()).unwrap();
        assert!(y.is_finite());
    }
}

#[test]
fn attention_rows_are_distributions() {
    let w = desk_for(7);
    let (a, b) = random_system(&mut seeding::rng(3), 7);
    let (_, maps) = model::forward_with_attention(&w, &model::encode_system(&a, &b, 7).unwrap()).unwrap();
    assert_eq!(maps.len(), 2);
    for m in &maps {
        assert_eq!(m.shape(), &[4, 7, 7]);
        for row in m.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn encoded_system_holds_n_times_n_plus_one_values() {
    for n in [1, 4, 16, 64] {
        let a = DenseMatrix::identity(n);
        let t = model::encode_system(&a, &vec![1.0; n], n).unwrap();
        assert_eq!(t.shape(), &[n, n + 1]);
        assert_eq!(t.numel(), n * (n + 1));
    }
}

fn loss_and_grads(w: &ModelWeights, tokens: &Tensor, target: &Tensor) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let params = w.bind(&mut tape);
    let t = tape.leaf(tokens.clone());
    let y = tape.leaf(target.clone());
    let pred = model::forward_graph(&mut tape, w.config(), &params, t, None).unwrap();
    let loss = tape.mse_loss(pred, y).unwrap();
    let value = tape.value(loss).item();
    tape.backward(loss).unwrap();
    (value, params.iter().map(|&p| tape.grad_or_zeros(p)).collect())
}

#[test]
fn desk_width_loss_gradient_matches_finite_differences() {
    let mut cfg = ModelConfig::desk(5, 4);
    cfg.init_std = 0.2;
    let mut w = model::init_weights(&cfg, 23).unwrap();
    let mut rng = seeding::rng(24);
    let tokens = Tensor::new(vec![2, 4, 5], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let target = Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (_, grads) = loss_and_grads(&w, &tokens, &target);
    let names: Vec<String> = w.specs().iter().map(|s| s.name.clone()).collect();
    let mut worst: f64 = 0.0;
    for (k, name) in names.iter().enumerate() {
        let len = w.tensors()[k].numel();
        for _ in 0..6 {
            let i = rng.random_range(0..len);
            let orig = w.tensors()[k].data()[i];
            w.tensors_mut()[k].data_mut()[i] = orig + GRADCHECK_STEP;
            let (fp, _) = loss_and_grads(&w, &tokens, &target);
            w.tensors_mut()[k].data_mut()[i] = orig - GRADCHECK_STEP;
            let (fm, _) = loss_and_grads(&w, &tokens, &target);
            w.tensors_mut()[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * GRADCHECK_STEP);
            let ad = grads[k].data()[i];
            if name.ends_with("attn.wk.bias") {
                // Softmax ignores a per-row shift, so this gradient vanishes.
                assert!(ad.abs() <= 1e-12, "{name}[{i}] = {ad}");
                continue;
            }
            let err = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-8);
            assert!(err < 1e-4, "{name}[{i}]: ad {ad} fd {fd}");
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4);
}
