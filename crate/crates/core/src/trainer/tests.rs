use super::*;
use crate::model::Variant;

// --- adam ---------------------------------------------------------------------

#[test]
fn adam_zero_gradient_and_zero_moments_is_a_noop() {
    let hyper = AdamHyper::default();
    let mut theta = [1.5];
    let mut m = [0.0];
    let mut v = [0.0];
    adam_update(&mut theta, &[0.0], &mut m, &mut v, 1, 0.1, &hyper);
    assert_eq!(theta, [1.5]);
    assert_eq!(m, [0.0]);
    assert_eq!(v, [0.0]);
}

#[test]
fn adam_moments_decay_under_zero_gradient() {
    let hyper = AdamHyper::default();
    let mut theta = [1.0];
    let mut m = [0.4];
    let mut v = [0.2];
    adam_update(&mut theta, &[0.0], &mut m, &mut v, 10, 0.0, &hyper);
    assert!((m[0] - 0.9 * 0.4).abs() <= 1e-15);
    assert!((v[0] - 0.999 * 0.2).abs() <= 1e-15);
}

#[test]
fn adam_one_step_from_zero_moments_matches_hand_stepped_oracle() {
    let hyper = AdamHyper::default();
    let g = -0.37;
    let lr = 0.01;
    let mut theta = [2.0];
    let mut m = [0.0];
    let mut v = [0.0];
    adam_update(&mut theta, &[g], &mut m, &mut v, 1, lr, &hyper);
    // Hand-stepped: m1 = (1-b1)g, v1 = (1-b2)g^2, bias-corrected back to g
    // and g^2, so the update is -lr * g / (|g| + eps).
    let m1 = (1.0 - hyper.beta1) * g;
    let v1 = (1.0 - hyper.beta2) * g * g;
    let m_hat = m1 / (1.0 - hyper.beta1);
    let v_hat = v1 / (1.0 - hyper.beta2);
    let want = 2.0 - lr * m_hat / (v_hat.sqrt() + hyper.eps);
    assert!((theta[0] - want).abs() <= 1e-15);
    let closed_form = 2.0 - lr * g / (g.abs() + hyper.eps);
    assert!((theta[0] - closed_form).abs() <= 1e-12);
}

#[test]
fn adam_constant_gradient_update_approaches_lr_times_sign() {
    // Scalar simulation oracle: by step 1000 the update magnitude is within
    // 1% of lr for a constant gradient.
    let hyper = AdamHyper::default();
    let g = 0.025;
    let lr = 1e-3;
    let mut theta = [0.0];
    let mut m = [0.0];
    let mut v = [0.0];
    let mut last = theta[0];
    let mut update = 0.0;
    for t in 1..=1000u64 {
        adam_update(&mut theta, &[g], &mut m, &mut v, t, lr, &hyper);
        update = last - theta[0];
        last = theta[0];
    }
    assert!(
        (update - lr).abs() <= 0.01 * lr,
        "final update {update} vs lr {lr}"
    );
}

#[test]
fn adam_step_rejects_shape_mismatch() {
    let cfg = Variant::BaseNet.configure(&ModelConfig::toy(32, 32));
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    let mut state = TrainState::new(&params, 0);
    let mut grads = params.zero_grads();
    let name = params.learnable_names()[0].clone();
    grads.insert(name, Tensor::zeros(&[1]));
    assert!(matches!(
        adam_step(&mut params, &grads, &mut state, 1e-3, &AdamHyper::default()),
        Err(TrainError::GradShape { .. })
    ));
}

// --- schedule -----------------------------------------------------------------

#[test]
fn lr_schedule_matches_protocol_constants() {
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    assert_eq!(lr_schedule(0, DEFAULT_BASE_LR), 1e-5);
    assert!(rel(lr_schedule(3, DEFAULT_BASE_LR), 1e-6) <= 1e-12);
    assert!(rel(lr_schedule(6, DEFAULT_BASE_LR), 1e-7) <= 1e-12);
    assert!(rel(lr_schedule(7, DEFAULT_BASE_LR), 1e-7) <= 1e-12); // floor(7/3) = 2
}

#[test]
fn lr_schedule_is_non_increasing() {
    let mut last = f64::INFINITY;
    for epoch in 0..30 {
        let lr = lr_schedule(epoch, DEFAULT_BASE_LR);
        assert!(lr <= last);
        last = lr;
    }
}

// --- kfold ----------------------------------------------------------------------

#[test]
fn kfold_1000_items_gives_ten_subsets_of_100() {
    let plan = kfold_split(1000, 10, 42).unwrap();
    assert_eq!(plan.k(), 10);
    for s in &plan.subsets {
        assert_eq!(s.len(), 100);
    }
}

#[test]
fn kfold_partitions_exactly_and_is_deterministic() {
    let plan = kfold_split(103, 10, 7).unwrap();
    let mut all: Vec<usize> = plan.subsets.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
    assert_eq!(plan, kfold_split(103, 10, 7).unwrap());
    assert_ne!(plan, kfold_split(103, 10, 8).unwrap());
}

#[test]
fn kfold_fold_assignment_is_disjoint_and_rotates() {
    let plan = kfold_split(20, 5, 3).unwrap();
    for i in 0..5 {
        let fold = plan.fold(i);
        assert_eq!(fold.test, plan.subsets[i]);
        assert_eq!(fold.val, plan.subsets[(i + 1) % 5]);
        let mut union: Vec<usize> = fold
            .train
            .iter()
            .chain(fold.val.iter())
            .chain(fold.test.iter())
            .copied()
            .collect();
        union.sort_unstable();
        assert_eq!(union, (0..20).collect::<Vec<_>>());
    }
}

#[test]
fn kfold_rejects_too_few_items() {
    assert!(matches!(
        kfold_split(5, 10, 0),
        Err(TrainError::BadKfold { n: 5, k: 10 })
    ));
}

mod kfold_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn subsets_partition_for_all_inputs(n in 4usize..200, k in 2usize..10, seed in 0u64..1000) {
            prop_assume!(n >= k);
            let plan = kfold_split(n, k, seed).unwrap();
            let mut all: Vec<usize> = plan.subsets.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = plan.subsets.iter().map(Vec::len).collect();
            let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(max - min <= 1);
        }
    }
}

// --- synthetic data ---------------------------------------------------------------

#[test]
fn synthetic_dataset_is_reproducible_and_well_formed() {
    let a = synthetic_dataset(3, 32, 32, 9);
    let b = synthetic_dataset(3, 32, 32, 9);
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.image.data(), y.image.data());
        assert_eq!(x.gt_map.density(), y.gt_map.density());
    }
    for s in &a {
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert!((s.gt_map.sum() - 1.0).abs() <= 1e-9);
        assert!(s.gt_fix.count() >= 1);
        assert!(s.gt_fix.count() < s.gt_fix.len());
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    let c = synthetic_dataset(3, 32, 32, 10);
    assert_ne!(a[0].image.data(), c[0].image.data());
}

// --- training loop ------------------------------------------------------------------

fn quick_opts(seed: u64) -> TrainOptions {
    TrainOptions {
        epochs: 2,
        batch_size: 2,
        patience: 5,
        base_lr: 1e-3,
        lr_decay_every: 1000,
        seed,
        ..TrainOptions::default()
    }
}

#[test]
fn train_loop_rejects_empty_splits() {
    let cfg = Variant::TranSalNetRes.configure(&ModelConfig::toy(32, 32));
    let data = synthetic_dataset(2, 32, 32, 1);
    let opts = quick_opts(1);
    assert!(matches!(
        train_loop(&[], &data, &cfg, &opts, None),
        Err(TrainError::EmptySplit("train"))
    ));
    assert!(matches!(
        train_loop(&data, &[], &cfg, &opts, None),
        Err(TrainError::EmptySplit("validation"))
    ));
}

#[test]
fn train_loop_is_bitwise_deterministic() {
    let cfg = Variant::TranSalNetRes.configure(&ModelConfig::toy(32, 32));
    let data = synthetic_dataset(4, 32, 32, 2);
    let opts = quick_opts(7);
    let a = train_loop(&data[..3], &data[3..], &cfg, &opts, None).unwrap();
    let b = train_loop(&data[..3], &data[3..], &cfg, &opts, None).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    for (name, t) in a.params.learnable() {
        assert_eq!(t.data(), b.params.get(name).data(), "{name}");
    }
}

#[test]
fn early_stop_fires_exactly_patience_epochs_after_best() {
    let mut stop = EarlyStop::new(3);
    let values = [5.0, 4.0, 4.5, 4.4, 4.6, 4.4, 9.0];
    let mut stopped_at = None;
    for (epoch, &v) in values.iter().enumerate() {
        let (_, halt) = stop.observe(epoch, v);
        if halt {
            stopped_at = Some(epoch);
            break;
        }
    }
    // Best at epoch 1; ties and worse values never reset the counter.
    assert_eq!(stop.best_epoch, 1);
    assert_eq!(stopped_at, Some(4));
}

#[test]
fn early_stop_strict_improvement_resets_counter() {
    let mut stop = EarlyStop::new(2);
    assert_eq!(stop.observe(0, 3.0), (true, false));
    assert_eq!(stop.observe(1, 3.5), (false, false));
    assert_eq!(stop.observe(2, 2.9), (true, false));
    assert_eq!(stop.observe(3, 3.0), (false, false));
    assert_eq!(stop.observe(4, 3.0), (false, true));
    assert_eq!(stop.best_epoch, 2);
}

#[test]
fn train_loop_stop_epoch_is_bounded_by_patience_after_best() {
    let cfg = Variant::BaseNetCb.configure(&ModelConfig::toy(32, 32));
    let data = synthetic_dataset(3, 32, 32, 3);
    let opts = TrainOptions {
        epochs: 12,
        batch_size: 2,
        patience: 2,
        base_lr: 1e-4,
        seed: 5,
        ..TrainOptions::default()
    };
    let out = train_loop(&data[..2], &data[2..], &cfg, &opts, None).unwrap();
    assert!(
        out.final_epoch <= out.best_epoch + opts.patience,
        "stopped at {} with best {}",
        out.final_epoch,
        out.best_epoch
    );
}

#[test]
fn train_loop_reduces_loss_on_tiny_overfit() {
    let cfg = Variant::TranSalNetRes.configure(&ModelConfig::toy(32, 32));
    let data = synthetic_dataset(2, 32, 32, 4);
    let opts = TrainOptions {
        epochs: 30,
        batch_size: 2,
        patience: 30,
        base_lr: 3e-3,
        lr_decay_every: 1000,
        seed: 11,
        ..TrainOptions::default()
    };
    let out = train_loop(&data, &data, &cfg, &opts, None).unwrap();
    let first = out.history.train_loss(0).unwrap();
    let last = out.history.train_loss(out.final_epoch).unwrap();
    assert!(
        last < first,
        "loss did not decrease: {first} -> {last}"
    );
}

#[test]
fn history_csv_has_pinned_header_and_both_splits() {
    let cfg = Variant::BaseNetCb.configure(&ModelConfig::toy(32, 32));
    let data = synthetic_dataset(3, 32, 32, 6);
    let opts = quick_opts(2);
    let out = train_loop(&data[..2], &data[2..], &cfg, &opts, None).unwrap();
    let csv = out.history.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,split,loss,cc,sim,nss,kld");
    assert!(csv.lines().any(|l| l.starts_with("0,train,")));
    assert!(csv.lines().any(|l| l.starts_with("0,val,")));
}

#[test]
fn train_loop_can_resume_from_checkpoint_params() {
    let cfg = Variant::BaseNetCb.configure(&ModelConfig::toy(32, 32));
    let data = synthetic_dataset(3, 32, 32, 8);
    let opts = quick_opts(3);
    let first = train_loop(&data[..2], &data[2..], &cfg, &opts, None).unwrap();
    let resumed = train_loop(&data[..2], &data[2..], &cfg, &opts, Some(first.params.clone()));
    assert!(resumed.is_ok());
}

// --- ablation grid -------------------------------------------------------------------

#[test]
fn ablation_grid_produces_nine_deterministic_rows() {
    let base = ModelConfig::toy(32, 32);
    let data = synthetic_dataset(10, 32, 32, 12);
    let opts = TrainOptions {
        epochs: 1,
        batch_size: 4,
        patience: 5,
        base_lr: 1e-3,
        seed: 12,
        ..TrainOptions::default()
    };
    let report = ablation_grid(&data, &base, &opts).unwrap();
    assert_eq!(report.rows.len(), 9);
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant).collect();
    assert_eq!(names[0], "BaseNet");
    assert_eq!(names[8], "TranSalNet_Dense");
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("group,perception"));
    assert_eq!(lines.next().unwrap(), "variant,CC,SIM,NSS,sAUC,AUC,KLD");
    assert_eq!(csv.lines().count(), 11);

    let again = ablation_grid(&data, &base, &opts).unwrap();
    assert_eq!(csv, again.to_csv());
}
