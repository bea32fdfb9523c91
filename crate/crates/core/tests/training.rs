use plab_core::model::{Model, ModelConfig};
use plab_core::taskgen::{generate, Split, TaskGenConfig, TaskKind};
use plab_core::train::{train_base, BaseTrainConfig};

#[test]
fn training_loss_falls_in_trend() {
    let tg = TaskGenConfig { image_px: 16 };
    let train: Vec<_> = TaskKind::ALL
        .iter()
        .map(|&k| generate(k, 48, 2, Split::Train, &tg).unwrap())
        .collect();
    let val: Vec<_> = TaskKind::BINARY
        .iter()
        .map(|&k| generate(k, 8, 2, Split::Val, &tg).unwrap())
        .collect();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 3,
        n_heads: 2,
        patch_px: 4,
        image_px: 16,
        max_seq: 144,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(cfg, 3).unwrap();
    let tc = BaseTrainConfig {
        batch_size: 16,
        max_epochs: 3,
        eval_every: 3,
        // unreachable band, so every check runs
        band_low: 1.0,
        band_high: 1.0,
        ..BaseTrainConfig::default()
    };
    let log = train_base(&mut model, &train, &val, &tc, 0).unwrap();
    assert!(!log.reached_band);
    let losses: Vec<f64> = log.checks.iter().map(|c| c.train_loss).collect();
    assert!(losses.len() >= 9, "{} checks", losses.len());
    // Mean loss per third of the run must fall from one third to the next.
    let k = losses.len() / 3;
    let thirds: Vec<f64> = (0..3)
        .map(|i| losses[i * k..(i + 1) * k].iter().sum::<f64>() / k as f64)
        .collect();
    assert!(thirds[0] > thirds[1] && thirds[1] > thirds[2], "{thirds:?}");
}

#[test]
fn tasks_sit_out_once_they_reach_the_band() {
    let tg = TaskGenConfig { image_px: 12 };
    let kinds = [TaskKind::VisualAttr, TaskKind::Structure];
    let train: Vec<_> = kinds.iter().map(|&k| generate(k, 16, 1, Split::Train, &tg).unwrap()).collect();
    let val: Vec<_> = kinds.iter().map(|&k| generate(k, 4, 1, Split::Val, &tg).unwrap()).collect();
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        patch_px: 4,
        image_px: 12,
        max_seq: 128,
        ..ModelConfig::default()
    };
    // An empty band: every task parks at the first check and the band is
    // never met.
    let tc = BaseTrainConfig {
        batch_size: 8,
        max_epochs: 4,
        eval_every: 2,
        band_low: 0.0,
        band_high: -1.0,
        ..BaseTrainConfig::default()
    };
    let mut model = Model::<f32>::new(cfg, 5).unwrap();
    let log = train_base(&mut model, &train, &val, &tc, 0).unwrap();
    assert_eq!(log.steps, 2);
    assert_eq!(log.checks.len(), 1);
    assert_eq!(log.checks[0].parked, kinds.to_vec());

    // A task without a validation set keeps training after the others park.
    let mut with_qa = train.clone();
    with_qa.push(generate(TaskKind::DocQa, 16, 1, Split::Train, &tg).unwrap());
    let mut model = Model::<f32>::new(cfg, 5).unwrap();
    let log = train_base(&mut model, &with_qa, &val, &tc, 0).unwrap();
    assert_eq!(log.steps, 6 * 4);

    let mut model = Model::<f32>::new(cfg, 5).unwrap();
    let log = train_base(&mut model, &train, &val, &BaseTrainConfig { park_in_band: false, ..tc }, 0).unwrap();
    assert_eq!(log.steps, 4 * 4);
    assert!(log.checks.iter().all(|c| c.parked.is_empty()));
}
