use mantra_core::backbone::BackboneConfig;
use mantra_core::checkpoint::Checkpoint;
use mantra_core::data::{chrono_split, synth_drift, window_count, DriftScript, FeatureMode, Scaler, WindowSpec, Windows};
use mantra_core::decomposition::series_decompose;
use mantra_core::ensemble::EnsembleConfig;
use mantra_core::model::{Mantra, ModelConfig};
use mantra_core::slow::SlowConfig;
use mantra_core::tensor::Tensor;
use mantra_core::training::{evaluate, persistence_mse, train, TrainConfig, TrainState};
use mantra_core::urt::UrtConfig;
use proptest::prelude::*;

const SPEC: WindowSpec = WindowSpec {
    input_len: 16,
    pred_len: 8,
    stride: 1,
};

fn config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_len: SPEC.input_len,
            pred_len: SPEC.pred_len,
            d_model: 8,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            kernel: 5,
            c: 1.0,
            in_dim: 1,
            out_dim: 1,
            target_index: 0,
        },
        ensemble: EnsembleConfig {
            learners: 2,
            ..EnsembleConfig::default()
        },
        urt: UrtConfig::default(),
        seed: 1,
    }
}

fn sine_windows() -> (Windows, Windows, Windows) {
    let script: DriftScript = serde_json::from_str(
        r#"{"segments": [{"length": 400, "frequency": 0.125, "amplitude": 1.0, "trend_slope": 0.0, "noise_std": 0.05}]}"#,
    )
    .unwrap();
    let (ds, _) = synth_drift(&script, 400, 4).unwrap();
    let splits = chrono_split(&ds, [0.7, 0.1, 0.2], SPEC.input_len + SPEC.pred_len).unwrap();
    let scaler = Scaler::fit(&splits.train).unwrap();
    let w = |d| Windows::new(&scaler.transform(d).unwrap(), SPEC, FeatureMode::S).unwrap();
    (w(&splits.train), w(&splits.val), w(&splits.test))
}

#[test]
fn training_beats_persistence_on_a_clean_sine() {
    let (tr, va, te) = sine_windows();
    let mut model = Mantra::new(&config()).unwrap();
    let before = evaluate(&model, &te, 32, None).unwrap().mse;
    let tcfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model, tcfg.seed);
    train(&mut model, &mut state, &tr, &va, &tcfg, &SlowConfig::default()).unwrap();
    let after = evaluate(&model, &te, 32, None).unwrap().mse;
    let persistence = persistence_mse(&te);
    assert!(after.is_finite());
    assert!(after < before, "{after} vs initial {before}");
    assert!(after < persistence, "{after} vs persistence {persistence}");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = Mantra::new(&config()).unwrap();
    let ck = model.to_checkpoint(serde_json::json!({"note": "x"})).unwrap();
    let first = dir.path().join("a.ckpt");
    ck.save(&first).unwrap();
    let restored = Mantra::from_checkpoint(&Checkpoint::load(&first).unwrap()).unwrap();
    assert_eq!(restored, model);
    let second = dir.path().join("b.ckpt");
    restored.to_checkpoint(serde_json::json!({"note": "x"})).unwrap().save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let model = Mantra::new(&config()).unwrap();
    let mut bytes = model.to_checkpoint(serde_json::Value::Null).unwrap().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn split_windows_stay_inside_their_split() {
    let (tr, va, te) = sine_windows();
    assert_eq!(tr.len(), window_count(280, &SPEC).unwrap());
    assert_eq!(va.len(), window_count(40, &SPEC).unwrap());
    assert_eq!(te.len(), window_count(80, &SPEC).unwrap());
}

proptest! {
    #[test]
    fn decomposition_sums_back(
        len in 1usize..40,
        d in 1usize..4,
        k in 0usize..40,
        pool in prop::collection::vec(-0.5f64..0.5, 120),
    ) {
        let kernel = 2 * (k % len) + 1;
        let data = pool[..len * d].to_vec();
        let x = Tensor::new(vec![len, d], data).unwrap();
        let p = series_decompose(&x, kernel).unwrap();
        for ((a, b), c) in p.seasonal.data().iter().zip(p.trend_cyclical.data()).zip(x.data()) {
            prop_assert!((a + b - c).abs() <= 1e-15);
        }
    }

    #[test]
    fn constant_series_is_all_trend(len in 1usize..40, v in -5.0f64..5.0, k in 0usize..40) {
        let kernel = 2 * (k % len) + 1;
        let x = Tensor::new(vec![len, 1], vec![v; len]).unwrap();
        let p = series_decompose(&x, kernel).unwrap();
        for (&t, &s) in p.trend_cyclical.data().iter().zip(p.seasonal.data()) {
            prop_assert!((t - v).abs() <= 1e-12);
            prop_assert!(s.abs() <= 1e-12);
        }
    }
}
