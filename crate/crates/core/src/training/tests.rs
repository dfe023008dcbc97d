use super::*;
use crate::dataset::{preprocess_episode, synth_corpus, SgConfig, SynthConfig};
use crate::model::Ablations;
use crate::spectral::FilterSpec;
use crate::tape::Tensor;

fn tiny(n: usize, mask_u: bool) -> ModelConfig {
    ModelConfig {
        n,
        history: 16,
        horizon: 16,
        d_model: 8,
        patch: 4,
        experts: 2,
        layers: 1,
        heads: 2,
        mask_u,
        ablations: Ablations::none(),
        ..ModelConfig::default()
    }
}

fn source(n: usize, layout: usize, episodes: usize, seed: u64) -> WindowSource {
    let synth = SynthConfig { n, duration_s: 12.0, ..SynthConfig::default() };
    let spec = FilterSpec::default();
    let processed: Vec<_> = synth_corpus(&synth, episodes, seed, &[n])
        .unwrap()
        .iter()
        .map(|e| preprocess_episode(e, &spec, SgConfig::default()).unwrap())
        .collect();
    WindowSource::new(&processed, layout, 16, 16, &spec).unwrap()
}

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 8, max_steps: Some(steps), seed, ..TrainConfig::default() }
}

#[test]
fn overfits_a_small_set() {
    let src = source(2, 2, 1, 1);
    let idx: Vec<_> = src.indices(20).into_iter().take(32).collect();
    assert_eq!(idx.len(), 32);
    let cfg = TrainConfig { batch_size: 32, max_steps: Some(1000), lr: 3e-3, ..TrainConfig::default() };
    let (_, report) = train_scratch(&tiny(2, false), &src, &idx, &cfg, None).unwrap();
    let early = report.history[10].total;
    let last = report.tail_mean(10).unwrap();
    assert!(early - last >= 0.9 * early.abs(), "loss {early} -> {last}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let src = source(2, 2, 2, 2);
    let idx = src.indices(7);
    let run = || {
        let (m, r) = train_scratch(&tiny(2, false), &src, &idx, &quick(20, 5), None).unwrap();
        (r.final_loss().unwrap(), params_hash(&m.store, |_| true))
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let src = source(2, 2, 1, 3);
    let idx = src.indices(5);
    let mut m = FdnModel::new(tiny(2, false), 9).unwrap();
    let before = m.checkpoint(Stage::Scratch, 9, 0);
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let report = train(&mut m, &src, &idx, &cfg, None).unwrap();
    assert_eq!(report.steps(), 0);
    assert_eq!(m.checkpoint(Stage::Scratch, 9, 0), before);
}

#[test]
fn epochs_cover_every_window_once() {
    let src = source(2, 2, 1, 3);
    let idx = src.indices(50);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    assert_eq!(cfg.total_steps(idx.len()), 2 * idx.len().div_ceil(4));
}

#[test]
fn log_records_loss_components() {
    let src = source(2, 2, 1, 4);
    let idx = src.indices(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let mut m = FdnModel::new(tiny(2, false), 1).unwrap();
    let report = train(&mut m, &src, &idx, &quick(5, 1), Some(&path)).unwrap();
    train(&mut m, &src, &idx, &quick(3, 1), Some(&path)).unwrap();
    for r in &report.history {
        assert_eq!(r.total, r.trend + r.res);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "step,total,trend,res,wall_s");
    assert_eq!(lines.len(), 1 + 5 + 3);
    assert_eq!(lines.iter().filter(|l| l.starts_with("step")).count(), 1);
}

#[test]
fn non_finite_loss_aborts_without_updating() {
    let src = source(2, 2, 1, 4);
    let idx = src.indices(9);
    let mut m = FdnModel::new(tiny(2, false), 1).unwrap();
    let id = m.store.id("head.trend.b").unwrap();
    m.store.get_mut(id).data_mut()[0] = f64::NAN;
    let before = m.store.clone();
    let err = train(&mut m, &src, &idx, &quick(5, 1), None).unwrap_err();
    assert!(matches!(err, FdnError::NonFiniteLoss { step: 0, component: "trend" }), "{err}");
    for (id, p) in before.iter() {
        let now = m.store.get(id).data();
        assert!(p.value.data().iter().zip(now).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn rejects_bad_configs() {
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn pretraining_keeps_the_actuation_encoder() {
    let src = source(2, 3, 2, 6);
    let idx = src.indices(7);
    assert!(pretrain(&tiny(3, false), &src, &idx, &quick(2, 0), None).is_err());
    let fresh = FdnModel::new(tiny(3, true), 0).unwrap();
    let u_only = |n: &str| n.starts_with("enc.u.");
    let (m, report) = pretrain(&tiny(3, true), &src, &idx, &quick(30, 0), None).unwrap();
    assert_eq!(report.steps(), 30);
    assert_eq!(params_hash(&m.store, u_only), params_hash(&fresh.store, u_only));
    assert_ne!(params_hash(&m.store, |n| !u_only(n)), params_hash(&fresh.store, |n| !u_only(n)));

    // 2-joint episodes in a 3-joint layout leave the third joint rows zero.
    let b = src.batch(&idx[..4], &m.norm);
    let x = b.x.data();
    for s in 0..4 {
        for block in 0..5 {
            let row = (s * 15 + block * 3 + 2) * 16;
            assert!(x[row..row + 16].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn transfer_freezes_then_fine_tunes() {
    let pre_src = source(2, 3, 2, 6);
    let (pre, _) = pretrain(&tiny(3, true), &pre_src, &pre_src.indices(7), &quick(20, 0), None).unwrap();
    let ck = pre.checkpoint(Stage::Pretrain, 0, 20);

    let src = source(2, 3, 2, 8);
    let idx = src.indices(5);
    let (train_idx, val_idx): (Vec<_>, Vec<_>) = idx.iter().partition(|w| w.episode == 0);
    let out = transfer(&ck, &tiny(3, false), &src, &train_idx, &quick(40, 1), &quick(40, 1), None).unwrap();
    let hash = |s: &ParamStore| params_hash(s, is_transferred);
    assert_eq!(hash(&out.probe.store), hash(&pre.store));
    assert_ne!(hash(&out.fine.store), hash(&pre.store));
    assert!(out.fine.store.iter().all(|(id, _)| out.fine.store.is_trainable(id)));
    // Actuation statistics come from the downstream data, joint ones from pretraining.
    assert_eq!(out.fine.norm.x_mean[..9], pre.norm.x_mean[..9]);
    assert_ne!(out.fine.norm.x_std[9..12], pre.norm.x_std[9..12]);

    let probe_loss = mean_loss(&out.probe, &src, &val_idx, 32).unwrap();
    let fine_loss = mean_loss(&out.fine, &src, &val_idx, 32).unwrap();
    assert!(fine_loss <= probe_loss, "fine {fine_loss} vs probe {probe_loss}");
}

#[test]
fn transfer_rejects_non_pretraining_checkpoints() {
    let src = source(2, 3, 1, 8);
    let idx = src.indices(9);
    let scratch = FdnModel::new(tiny(3, false), 0).unwrap().checkpoint(Stage::Scratch, 0, 0);
    assert!(matches!(
        transfer(&scratch, &tiny(3, false), &src, &idx, &quick(1, 0), &quick(1, 0), None),
        Err(FdnError::Checkpoint(_))
    ));
    let pre = FdnModel::new(tiny(3, true), 0).unwrap().checkpoint(Stage::Pretrain, 0, 0);
    let other = ModelConfig { d_model: 4, ..tiny(3, false) };
    assert!(transfer(&pre, &other, &src, &idx, &quick(1, 0), &quick(1, 0), None).is_err());
}

#[test]
fn checkpoints_rebuild_models() {
    let m = FdnModel::new(tiny(2, false), 4).unwrap();
    let ck = m.checkpoint(Stage::Scratch, 4, 0);
    let back = ck.to_fdn().unwrap();
    let x = Tensor::from_vec(&[1, 10, 16], (0..160).map(|i| (i as f64 * 0.3).sin()).collect());
    assert_eq!(back.forecast(&x, &[2]).unwrap()[0].mean(), m.forecast(&x, &[2]).unwrap()[0].mean());
    assert!(ck.check_config(&tiny(2, false)).is_ok());
    assert!(ck.check_config(&tiny(2, true)).is_err());
    assert!(ck.to_baseline().is_err());
}

#[test]
fn data_subset_keeps_whole_episodes() {
    let idx: Vec<_> = (0..10).flat_map(|e| (0..3).map(move |t| WindowIndex { episode: e, t })).collect();
    let sub = data_subset(&idx, 40.0, 1).unwrap();
    assert_eq!(sub.len(), 12);
    assert_eq!(data_subset(&idx, 100.0, 1).unwrap(), idx);
    assert!(data_subset(&idx, 0.0, 1).is_err());
}
