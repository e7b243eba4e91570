use super::*;
use crate::datasyn::{generate_dataset, DatasetParams, Regime};
use crate::regnet::{CFModelConfig, CfModel, FusionMode};

fn toy_cf(seed: u64, t_max: usize) -> (RegModel, ParamStore) {
    let cfg = CFModelConfig {
        encoder_widths: vec![16, 32],
        tenc_hidden: 8,
        tenc_out: 32,
        time_embed_dim: 8,
        decoder_widths: vec![16],
        fusion: FusionMode::FtPlusPConcatQ,
        ..CFModelConfig::default()
    };
    let model = RegModel::Cf(CfModel::new(cfg, t_max).unwrap());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.register_params(&mut store, &mut rng).unwrap();
    (model, store)
}

fn toy_dataset(pairs: usize, test_pairs: usize, seed: u64) -> (Vec<RegPair>, Vec<RegPair>) {
    let params = DatasetParams {
        regime: Regime::Clean,
        pairs,
        test_pairs,
        points: 16,
        rot_max_deg: 30.0,
        trans_max: 0.5,
        seed,
    };
    generate_dataset(&params).unwrap()
}

fn toy_train_cfg(t_max: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        t_max,
        seed,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn oracle_prediction_zeroes_all_losses() {
    // Feeding the exact ground truth as the prediction drives every loss
    // term to zero on a clean full-overlap pair.
    let (train, _) = toy_dataset(1, 0, 7);
    let pair = &train[0];
    let target = target_vec(&pair.g_gt, Repr::Quat7).unwrap();
    let mut g = Graph::new();
    let pred = g.constant(crate::nnkit::Tensor::from_vec(&[7], target.clone()));
    let vars =
        pair_loss_graph(&mut g, pred, pair, &target, Repr::Quat7, (1.0, 1.0, 1.0)).unwrap();
    assert!(g.value(vars.diff).item() < 1e-24);
    assert!(g.value(vars.cf1).item() < 1e-18);
    assert!(g.value(vars.cf2).item() < 1e-9);
    assert!(g.value(vars.total).item() < 1e-9);
}

#[test]
fn losses_strictly_positive_under_small_perturbation() {
    // A 1-degree rotation / 0.01-unit translation off the truth makes each
    // loss strictly positive.
    let (train, _) = toy_dataset(1, 0, 8);
    let pair = &train[0];
    let bump = crate::geom3d::random_transform(
        &mut ChaCha8Rng::seed_from_u64(3),
        1.0,
        0.01,
    )
    .unwrap();
    let perturbed = pair.g_gt.compose(&bump);
    let target = target_vec(&pair.g_gt, Repr::Quat7).unwrap();
    let pred_v = target_vec(&perturbed, Repr::Quat7).unwrap();
    assert!(loss_diff(&pred_v, &target).unwrap() > 0.0);
    let moved = perturbed.apply(&pair.p).unwrap();
    assert!(loss_chamfer(&moved, &pair.q).unwrap() > 0.0);
    assert!(loss_transform(&perturbed, &pair.g_gt) > 0.0);
}

#[test]
fn single_pair_overfit_converges() {
    let t_max = 50;
    let (model, mut store) = toy_cf(1, t_max);
    let (train, _) = toy_dataset(1, 0, 9);
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        t_max,
        seed: 5,
        ..toy_train_cfg(t_max, 5)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = vec![&train[0]];
    let mut totals = Vec::new();
    for step in 0..400 {
        let losses =
            train_step(&model, &mut store, &batch, &sched, &cfg, cfg.adam.lr, step, &mut rng)
                .unwrap();
        assert!(losses.total.is_finite());
        totals.push(losses.total);
    }
    // Per-step values fluctuate with the sampled timestep; compare the
    // running trend.
    let head: f64 = totals[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.01 * head, "no overfit: head {head}, tail {tail}");
}

#[test]
fn training_is_seed_deterministic() {
    let t_max = 20;
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let (train, _) = toy_dataset(6, 0, 10);
    let run = || {
        let (model, mut store) = toy_cf(2, t_max);
        let cfg = toy_train_cfg(t_max, 11);
        let report =
            train_loop(&model, &mut store, &train, None, &sched, &cfg, None, None).unwrap();
        (report.loss_log, store.named_values())
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(log_a, log_b);
    for ((na, ta), (nb, tb)) in params_a.iter().zip(&params_b) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn single_pass_counters_per_step() {
    let t_max = 20;
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let (model, mut store) = toy_cf(3, t_max);
    let (train, _) = toy_dataset(4, 0, 12);
    let cfg = toy_train_cfg(t_max, 13);
    let batch: Vec<&RegPair> = train.iter().collect();
    model.counters().reset();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    train_step(&model, &mut store, &batch, &sched, &cfg, 1e-3, 0, &mut rng).unwrap();
    // Exactly one encoder pass per cloud and one decode per pair.
    assert_eq!(model.counters().clouds_encoded(), 2 * batch.len());
    assert_eq!(model.counters().decodes(), batch.len());
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let t_max = 20;
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let (model, mut store) = toy_cf(4, t_max);
    let before = store.named_values();
    let (train, _) = toy_dataset(2, 0, 14);
    let cfg = TrainConfig { epochs: 0, ..toy_train_cfg(t_max, 15) };
    let report =
        train_loop(&model, &mut store, &train, None, &sched, &cfg, None, None).unwrap();
    assert_eq!(report.steps, 0);
    for ((_, a), (_, b)) in before.iter().zip(store.named_values().iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn one_pair_one_epoch_is_one_step() {
    let t_max = 20;
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let (model, mut store) = toy_cf(5, t_max);
    let (train, _) = toy_dataset(1, 0, 16);
    let cfg = TrainConfig { epochs: 1, ..toy_train_cfg(t_max, 17) };
    let report =
        train_loop(&model, &mut store, &train, None, &sched, &cfg, None, None).unwrap();
    assert_eq!(report.steps, 1);
    assert_eq!(store.step_count(), 1);
}

#[test]
fn resume_reproduces_unresumed_trajectory() {
    let t_max = 20;
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let (train, val) = toy_dataset(6, 2, 18);
    let dir = tempfile::tempdir().unwrap();

    // Uninterrupted 4-epoch run.
    let (model, mut store_full) = toy_cf(6, t_max);
    let cfg_full = TrainConfig { epochs: 4, ..toy_train_cfg(t_max, 19) };
    let report_full = train_loop(
        &model,
        &mut store_full,
        &train,
        Some(&val),
        &sched,
        &cfg_full,
        None,
        None,
    )
    .unwrap();

    // Two epochs, save state, then two more from the state file.
    let (model2, mut store_half) = toy_cf(6, t_max);
    let cfg_half = TrainConfig { epochs: 2, ..cfg_full.clone() };
    let half_dir = dir.path().join("half");
    train_loop(
        &model2,
        &mut store_half,
        &train,
        Some(&val),
        &sched,
        &cfg_half,
        Some(&half_dir),
        None,
    )
    .unwrap();
    let (model3, mut store_resumed) = toy_cf(999, t_max); // params will be overwritten
    let report_resumed = train_loop(
        &model3,
        &mut store_resumed,
        &train,
        Some(&val),
        &sched,
        &cfg_full,
        None,
        Some(&half_dir.join("train_state.bin")),
    )
    .unwrap();

    // The resumed tail must equal the tail of the uninterrupted log.
    let full_rows: Vec<&str> = report_full.loss_log.lines().collect();
    let resumed_rows: Vec<&str> = report_resumed.loss_log.lines().collect();
    let tail = resumed_rows.len() - 1; // minus header
    assert!(tail > 0);
    assert_eq!(
        &full_rows[full_rows.len() - tail..],
        &resumed_rows[1..],
        "resumed trajectory diverged"
    );
    for ((na, ta), (nb, tb)) in
        store_full.named_values().iter().zip(store_resumed.named_values().iter())
    {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "parameter {na} diverged");
    }
}

#[test]
fn train_loop_writes_checkpoints_and_log() {
    let t_max = 20;
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let (model, mut store) = toy_cf(7, t_max);
    let (train, val) = toy_dataset(4, 2, 20);
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_train_cfg(t_max, 21);
    train_loop(
        &model,
        &mut store,
        &train,
        Some(&val),
        &sched,
        &cfg,
        Some(dir.path()),
        None,
    )
    .unwrap();
    assert!(dir.path().join("model_final.ckpt").exists());
    assert!(dir.path().join("model_best.ckpt").exists());
    assert!(dir.path().join("train_state.bin").exists());
    let log = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss_total,loss_diff,loss_cf1,loss_cf2,lr"));
    assert_eq!(log.lines().count(), 1 + 2 * 1); // header + 1 step/epoch × 2 epochs
}

#[test]
fn sidecar_round_trip_rebuilds_model() {
    let (model, _) = toy_cf(8, 20);
    let sidecar = ModelSidecar::for_model(&model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.toml");
    sidecar.save(&path).unwrap();
    let loaded = ModelSidecar::load(&path).unwrap();
    let rebuilt = loaded.build().unwrap();
    assert!(matches!(rebuilt, RegModel::Cf(_)));
    assert_eq!(rebuilt.repr(), Repr::Quat7);
}

#[test]
fn max_steps_caps_training() {
    let t_max = 20;
    let sched = NoiseSchedule::cosine(t_max).unwrap();
    let (model, mut store) = toy_cf(9, t_max);
    let (train, _) = toy_dataset(8, 0, 22);
    let cfg = TrainConfig { epochs: 50, max_steps: Some(3), ..toy_train_cfg(t_max, 23) };
    let report =
        train_loop(&model, &mut store, &train, None, &sched, &cfg, None, None).unwrap();
    assert_eq!(report.steps, 3);
}
