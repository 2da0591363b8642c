use lstmcaps::autodiff::Graph;
use lstmcaps::data::{make_windows, prepare_training_data, slice_rows, split_windows, WindowedDataset};
use lstmcaps::model::{Design, Mode, Model, ModelSpec};
use lstmcaps::synthetic::{generate_synthetic, AnomalySpec};
use lstmcaps::train::{evaluate_loss, train, train_with_validation, TrainConfig};
use lstmcaps::{Error, Tensor};

fn sinusoid_pair(len: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            let t = t as f64;
            vec![(std::f64::consts::TAU * t / 20.0).sin(), (std::f64::consts::TAU * t / 13.0).cos()]
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn tiny_a() -> ModelSpec {
    ModelSpec {
        timesteps: 8,
        branch_width: 4,
        capsule_dim: 4,
        seed: 2,
        ..ModelSpec::new(Design::A, 2)
    }
}

#[test]
fn tiny_branched_capsule_model_fits_a_sinusoid_pair() {
    let data = prepare_training_data(&sinusoid_pair(240), 8, 0.2).unwrap();
    let mut m = Model::build(&tiny_a()).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        early_stop_patience: 50,
        seed: 1,
        ..Default::default()
    };
    let r = train_with_validation(&mut m, &data.train, &data.val, &cfg).unwrap();
    assert!(r.epochs_run() <= 300);
    assert!(r.final_train_loss < 1e-2, "train MSE {}", r.final_train_loss);
}

fn noisy_data() -> WindowedDataset {
    let s = generate_synthetic(2, 160, &AnomalySpec::none(), 8).unwrap();
    make_windows(&s.series, 8, 1).unwrap()
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 12,
        early_stop_patience: 4,
        learning_rate: 0.05,
        batch_size: 16,
        seed,
        ..Default::default()
    }
}

#[test]
fn best_weights_are_restored() {
    let data = noisy_data();
    let (tr, va) = split_windows(&data, 0.2).unwrap();
    for d in Design::ALL {
        let mut m = Model::build(&ModelSpec { design: d, ..tiny_a() }).unwrap();
        let r = train_with_validation(&mut m, &tr, &va, &quick_cfg(3)).unwrap();
        let best = r.val_loss_curve.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(r.final_val_loss, best);
        assert_eq!(r.val_loss_curve[r.best_epoch], best);
        assert_eq!(evaluate_loss(&m, &va, 16).unwrap().to_bits(), best.to_bits());
        assert_eq!(evaluate_loss(&m, &tr, 16).unwrap().to_bits(), r.final_train_loss.to_bits());
    }
}

#[test]
fn same_seed_gives_bitwise_identical_training() {
    let data = noisy_data();
    let run = |seed| {
        let mut m = Model::build(&ModelSpec { design: Design::B, ..tiny_a() }).unwrap();
        let r = train(&mut m, &data, &quick_cfg(seed)).unwrap();
        (m, r)
    };
    let (ma, ra) = run(5);
    let (mb, rb) = run(5);
    assert_eq!(ra, rb);
    assert_eq!(ma, mb);
    let (_, rc) = run(6);
    assert_ne!(ra.train_loss_curve, rc.train_loss_curve);
}

#[test]
fn loss_is_the_mean_squared_reconstruction_error() {
    let data = noisy_data();
    let m = Model::build(&tiny_a()).unwrap();
    let recon = m.forward(&data.windows, Mode::Inference).unwrap();
    let manual = recon
        .data()
        .iter()
        .zip(data.windows.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / recon.numel() as f64;
    let reported = evaluate_loss(&m, &data, 7).unwrap();
    assert!((manual - reported).abs() <= 1e-12 * manual);

    let mut g = Graph::new();
    let x = g.constant(data.windows.clone());
    let d = g.sub(x, x).unwrap();
    let sq = g.mul(d, d).unwrap();
    let l = g.mean(sq);
    assert_eq!(g.value(l).data(), &[0.0]);
}

#[test]
fn validation_rows_never_touch_the_normalizer() {
    let s = generate_synthetic(3, 200, &AnomalySpec::none(), 2).unwrap().series;
    let base = prepare_training_data(&s, 8, 0.25).unwrap();
    let mut perturbed = s.clone();
    for v in &mut perturbed.data_mut()[150 * 3..] {
        *v = *v * 40.0 + 7.0;
    }
    let other = prepare_training_data(&perturbed, 8, 0.25).unwrap();
    assert_eq!(base.stats, other.stats);
    assert_eq!(base.train.windows, other.train.windows);
    assert_ne!(base.val.windows, other.val.windows);
    let head = slice_rows(&s, 0, 150).unwrap();
    assert_eq!(base.stats, lstmcaps::data::fit_normalizer(&head).unwrap());
}

#[test]
fn non_finite_loss_aborts_training() {
    let mut s = sinusoid_pair(80);
    s.data_mut()[10] = 1e200;
    let data = make_windows(&s, 8, 1).unwrap();
    let mut m = Model::build(&tiny_a()).unwrap();
    let r = train(&mut m, &data, &quick_cfg(0));
    assert!(matches!(r, Err(Error::Diverged { epoch: 0, .. })), "{r:?}");
}
