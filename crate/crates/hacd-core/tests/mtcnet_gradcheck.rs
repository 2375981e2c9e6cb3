//! Finite-difference checks for the assembled network at the tiny
//! configuration, and the stop-gradient semantics of the training loss.

mod common;

use common::random_tensor;
use hacd_core::autodiff::gradcheck::{check_gradients, GradCheckConfig};
use hacd_core::autodiff::{backward, Mode, Tensor};
use hacd_core::mtcnet::{
    simsiam_loss, simsiam_loss_frozen_z, simsiam_loss_no_stopgrad, ArchConfig, MtcNetModel,
};
use hacd_core::rng::Rng;

fn sampled(samples: usize, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        samples_per_tensor: Some(samples),
        seed,
        ..GradCheckConfig::default()
    }
}

fn patch_batch(n: usize, bands: usize, m: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let values = (0..n * bands * m * m)
        .map(|_| rng.normal() * 0.5 + 1.0)
        .collect();
    Tensor::from_vec(vec![n, 1, bands, m, m], values).unwrap()
}

#[test]
fn resnet1_gradients() {
    let model = MtcNetModel::new(&ArchConfig::tiny(), 1).unwrap();
    let x = patch_batch(2, 8, 7, 2);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let probe = model.resnet1_forward(&x, Mode::Train).unwrap();
    let mut rng = Rng::new(3);
    let weights = random_tensor(probe.shape(), &mut rng);
    let report = check_gradients(&params, sampled(4, 4), || {
        model
            .resnet1_forward(&x, Mode::Train)?
            .mul(&weights)?
            .sum_all()
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report);
}

#[test]
fn resnet2_gradients() {
    let model = MtcNetModel::new(&ArchConfig::tiny(), 5).unwrap();
    let mut rng = Rng::new(6);
    let x = random_tensor(&[2, 4, 8, 7, 7], &mut rng);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let probe = model.resnet2_forward(&x, Mode::Train).unwrap();
    let weights = random_tensor(probe.shape(), &mut rng);
    let report = check_gradients(&params, sampled(4, 7), || {
        model
            .resnet2_forward(&x, Mode::Train)?
            .mul(&weights)?
            .sum_all()
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report);
}

#[test]
fn cbam_gradients() {
    let model = MtcNetModel::new(&ArchConfig::tiny(), 8).unwrap();
    let mut rng = Rng::new(9);
    let x = random_tensor(&[2, 8, 4, 5, 5], &mut rng);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let weights = random_tensor(&[2, 8, 4, 5, 5], &mut rng);
    let report = check_gradients(&params, sampled(4, 10), || {
        model.cbam_forward(&x)?.mul(&weights)?.sum_all()
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report);
}

#[test]
fn encode_gradients_tiny_config() {
    // Full path: backbone, attention, pooling, projector, predictor.
    let model = MtcNetModel::new(&ArchConfig::tiny(), 11).unwrap();
    let x = patch_batch(2, 8, 7, 12);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let report = check_gradients(&params, sampled(4, 13), || {
        let (z, _) = model.encode(&x, Mode::Train)?;
        let p = model.predict(&z, Mode::Train)?;
        p.mul(&p)?.mean_all()
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report);
}

#[test]
fn simsiam_gradient_equals_frozen_z_finite_differences() {
    // The analytic gradient of the stop-gradient loss must match finite
    // differences of the loss with the projected features held constant.
    // check_gradients_against runs backward through the REAL loss while the
    // finite differences probe the frozen-z variant: they agree exactly when
    // stop_gradient blocks the z branches and nothing else.
    let model = MtcNetModel::new(&ArchConfig::tiny(), 14).unwrap();
    let x1 = patch_batch(2, 8, 7, 15);
    let x2 = patch_batch(2, 8, 7, 16);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();

    // Freeze z at the unperturbed parameter values.
    let (z1, _) = model.encode(&x1, Mode::Train).unwrap();
    let (z2, _) = model.encode(&x2, Mode::Train).unwrap();
    let z1_const = z1.stop_gradient();
    let z2_const = z2.stop_gradient();

    // At the unperturbed point the frozen-z loss and the real loss coincide,
    // so reverse mode runs on the frozen function's graph only through p;
    // the stop-gradient loss must produce the same parameter gradients.
    for p in &params {
        p.zero_grad();
    }
    let real = simsiam_loss(&model, &x1, &x2, Mode::Train).unwrap();
    backward(&real).unwrap();
    let real_grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut frozen_fn =
        || simsiam_loss_frozen_z(&model, &x1, &x2, &z1_const, &z2_const, Mode::Train);
    let report = hacd_core::autodiff::gradcheck::check_gradients_against(
        &params,
        sampled(3, 17),
        &mut frozen_fn,
    )
    .unwrap();
    assert!(report.passed(), "frozen-z gradients disagree: {:?}", report);

    // And the frozen-z analytic gradients equal the real-loss gradients.
    for (p, real_grad) in params.iter().zip(&real_grads) {
        let frozen_grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for (a, b) in frozen_grad.iter().zip(real_grad) {
            assert!(
                (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                "stop-gradient loss and frozen-z loss disagree: {} vs {}",
                a,
                b
            );
        }
    }
}

#[test]
fn removing_stop_gradient_changes_gradients() {
    let model = MtcNetModel::new(&ArchConfig::tiny(), 18).unwrap();
    let x1 = patch_batch(2, 8, 7, 19);
    let x2 = patch_batch(2, 8, 7, 20);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();

    for p in &params {
        p.zero_grad();
    }
    let with_sg = simsiam_loss(&model, &x1, &x2, Mode::Train).unwrap();
    backward(&with_sg).unwrap();
    let grads_sg: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    for p in &params {
        p.zero_grad();
    }
    let without_sg = simsiam_loss_no_stopgrad(&model, &x1, &x2, Mode::Train).unwrap();
    backward(&without_sg).unwrap();
    let grads_free: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    // The forward values agree; the gradients must not.
    assert_eq!(with_sg.item(), without_sg.item());
    let mut max_diff = 0.0f64;
    for (a, b) in grads_sg.iter().zip(&grads_free) {
        for (x, y) in a.iter().zip(b) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    assert!(
        max_diff > 1e-6,
        "stop-gradient had no effect (max diff {})",
        max_diff
    );
}

#[test]
fn both_branches_share_parameter_storage() {
    let model = MtcNetModel::new(&ArchConfig::tiny(), 21).unwrap();
    // The parameter list is stable and refers to single storage: encoding
    // two different batches touches the same tensors.
    let p1 = model.params();
    let p2 = model.params();
    for ((name_a, ta), (name_b, tb)) in p1.iter().zip(&p2) {
        assert_eq!(name_a, name_b);
        assert!(ta.ptr_eq(tb), "parameter {} must be single storage", name_a);
    }
    // A symmetric loss accumulates gradient contributions from both
    // branches into that single storage.
    let x1 = patch_batch(2, 8, 7, 22);
    let x2 = patch_batch(2, 8, 7, 23);
    let loss = simsiam_loss(&model, &x1, &x2, Mode::Train).unwrap();
    backward(&loss).unwrap();
    let with_grad = p1.iter().filter(|(_, t)| t.grad().is_some()).count();
    assert_eq!(with_grad, p1.len(), "every parameter receives gradient");
}

#[test]
fn shape_chain_at_tiny_scale() {
    let arch = ArchConfig::tiny();
    let model = MtcNetModel::new(&arch, 24).unwrap();
    let x = patch_batch(2, 8, 7, 25);
    let h1 = model.resnet1_forward(&x, Mode::Train).unwrap();
    assert_eq!(h1.shape(), &[2, 4, 8, 7, 7]);
    let h2 = model.resnet2_forward(&h1, Mode::Train).unwrap();
    assert_eq!(h2.shape(), &[2, 8, 4, 7, 7]);
    let (z, _) = model.encode(&x, Mode::Train).unwrap();
    assert_eq!(z.shape(), &[2, arch.proj_dims[2]]);
}
