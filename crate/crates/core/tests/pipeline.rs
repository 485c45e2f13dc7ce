use scatterfusion::checkpoint::Checkpoint;
use scatterfusion::dataio::{load_csv, synth, CsvOptions, Dataset, Split, SynthKind, SynthParams};
use scatterfusion::forecaster::{Forecaster, ModelConfig};
use scatterfusion::trainer::{TrainConfig, Trainer};

fn data() -> Dataset {
    let params = SynthParams {
        channels: 2,
        period: 12.0,
        ..SynthParams::default()
    };
    synth(SynthKind::SineTrendNoise, &params, 700, 7).unwrap()
}

fn model() -> Forecaster {
    Forecaster::new(ModelConfig {
        input_len: 36,
        horizon: 6,
        channels: 2,
        d_model: 8,
        d_attn: 8,
        j_max: 2,
        strides: vec![1, 2],
        mrta_layers: 1,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        window_stride: 3,
        eval_stride: 3,
        lr_max: 3e-3,
        lr_min: 3e-5,
        ..TrainConfig::default()
    }
}

fn bits(m: &Forecaster) -> Vec<u64> {
    m.params().flatten().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn csv_roundtrip_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let original = data();
    original.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let loaded = load_csv(&path, &CsvOptions::default()).unwrap();
    assert_eq!(loaded.columns, original.columns);
    assert_eq!(loaded.values, original.values);

    let mut trainer = Trainer::new(model(), &loaded, train_config()).unwrap();
    trainer.run(None).unwrap();
    let outcome = trainer.finish().unwrap();
    let test = outcome.report.split(Split::Test).unwrap();
    assert!(test.windows > 0 && test.mse.is_finite());
    assert_eq!(outcome.report.loss_curve.len(), 3);
}

#[test]
fn interrupted_run_resumes_from_file_bitwise() {
    let data = data();
    let mut full = Trainer::new(model(), &data, train_config()).unwrap();
    full.run(None).unwrap();
    let reference = full.finish().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    let mut first = Trainer::new(model(), &data, train_config()).unwrap();
    let half = first.total_steps() / 2 + 1;
    first.run(Some(half)).unwrap();
    first.checkpoint().unwrap().save(&path).unwrap();
    drop(first);

    let mut second = Trainer::resume(Checkpoint::load(&path).unwrap(), &data).unwrap();
    assert_eq!(second.progress().step, half);
    second.run(None).unwrap();
    let resumed = second.finish().unwrap();
    assert_eq!(bits(&resumed.model), bits(&reference.model));
    assert_eq!(resumed.report.loss_curve, reference.report.loss_curve);
}

#[test]
fn best_checkpoint_predicts_identically_after_reload() {
    let data = data();
    let outcome = scatterfusion::trainer::train(model(), &data, train_config()).unwrap();
    let bytes = Checkpoint::from_model(&outcome.model, outcome.report.steps)
        .to_bytes()
        .unwrap();
    let restored = Checkpoint::from_bytes(&bytes).unwrap().model().unwrap();
    let x = data.values.column(0);
    let window = scatterfusion::diffcore::Tensor::from_columns(&[
        x.data()[..36].to_vec(),
        data.values.column(1).data()[..36].to_vec(),
    ])
    .unwrap();
    assert_eq!(
        outcome.model.predict(&window).unwrap(),
        restored.predict(&window).unwrap()
    );
}

#[test]
fn early_stopping_halts_before_the_schedule_ends() {
    let data = data();
    let cfg = TrainConfig {
        epochs: 40,
        patience: 1,
        lr_max: 5e-2,
        lr_min: 5e-2,
        ..train_config()
    };
    let mut trainer = Trainer::new(model(), &data, cfg).unwrap();
    trainer.run(None).unwrap();
    let outcome = trainer.finish().unwrap();
    assert!(outcome.report.stopped_early);
    assert!(outcome.report.loss_curve.len() < 40);
    let best = outcome.report.best_epoch.unwrap();
    let min = outcome
        .report
        .loss_curve
        .iter()
        .map(|e| e.val_mse)
        .fold(f64::MAX, f64::min);
    let best_row = outcome.report.loss_curve.iter().find(|e| e.epoch == best).unwrap();
    assert_eq!(best_row.val_mse, min);
}
