//! Loss, batching, optimizer, fit loop and checkpoint behaviour.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use satcn::audio::{synth_toy_dataset, ToyConfig};
use satcn::dsp::{stft, Waveform};
use satcn::model::{enhance, ModelConfig, MultiStageModel};
use satcn::nn::ops::Mode;
use satcn::nn::{Segments, Tensor};
use satcn::train::checkpoint::{from_bytes, to_bytes};
use satcn::train::{
    adam_step, batch_spectra, fit, load_checkpoint, pad_batch, pad_batch_to, save_checkpoint, train_step, AdamState,
    TrainConfig,
};
use satcn::Error;

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        stages: 3,
        hidden: 6,
        bottleneck: 4,
        stacks: 1,
        blocks: 2,
        kernel: 3,
        fft_size: 32,
        hop: 16,
        seed,
    }
}

/// Short toy pairs of unequal length.
fn pairs(n: usize, seed: u64) -> Vec<(Waveform, Waveform)> {
    let cfg = ToyConfig {
        duration_s: 0.02,
        ..ToyConfig::default()
    };
    synth_toy_dataset(n, &cfg, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, it)| {
            let keep = it.clean.len() - 13 * i;
            let cut = |w: &Waveform| Waveform::new(w.samples[..keep].to_vec(), w.sample_rate).unwrap();
            (cut(&it.noisy), cut(&it.clean))
        })
        .collect()
}

fn magnitudes(w: &Waveform, cfg: &ModelConfig) -> Tensor {
    stft(w, &cfg.window().unwrap()).unwrap().0.values
}

#[test]
fn total_loss_matches_scalar_loop() {
    let cfg = tiny_config(1);
    let m = MultiStageModel::build(cfg).unwrap();
    let segs = Segments::new(vec![4, 6]).unwrap();
    let mut r = Xoshiro256PlusPlus::seed_from_u64(2);
    let f = m.features();
    let x = Tensor::from_vec(&[f, 10], (0..f * 10).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let s = Tensor::from_vec(&[f, 10], (0..f * 10).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let trace = m.forward(&x, &segs, Mode::Train).unwrap();
    let losses = m.total_loss(&trace, &s).unwrap();
    let mut total = 0.0;
    for (k, est) in trace.estimates.iter().enumerate() {
        let mut per_item = Vec::new();
        for (start, len) in segs.spans() {
            let mut acc = 0.0;
            for row in 0..f {
                for t in start..start + len {
                    acc += (est.at(row, t) - s.at(row, t)).abs();
                }
            }
            per_item.push(acc / (f * len) as f64);
        }
        let lk = per_item.iter().sum::<f64>() / per_item.len() as f64;
        assert!((lk - losses.per_stage[k]).abs() < 1e-12);
        total += lk;
    }
    assert!((total - losses.total).abs() < 1e-12);
}

#[test]
fn padded_batch_loss_is_mean_of_item_losses() {
    let cfg = tiny_config(3);
    let m = MultiStageModel::build(cfg).unwrap();
    let data = pairs(3, 4);
    let batch = batch_spectra(&pad_batch(&data).unwrap(), &cfg.window().unwrap()).unwrap();
    let trace = m.forward(&batch.noisy, &batch.segments, Mode::Eval).unwrap();
    let batch_loss = m.total_loss(&trace, &batch.clean).unwrap().total;
    let mean: f64 = data
        .iter()
        .map(|(n, c)| {
            let t = m.forward_single(&magnitudes(n, &cfg), Mode::Eval).unwrap();
            m.total_loss(&t, &magnitudes(c, &cfg)).unwrap().total
        })
        .sum::<f64>()
        / data.len() as f64;
    assert!((batch_loss - mean).abs() < 1e-12, "{batch_loss} vs {mean}");
}

#[test]
fn extra_zero_padding_changes_nothing() {
    let cfg = tiny_config(5);
    let m = MultiStageModel::build(cfg).unwrap();
    let data = pairs(3, 6);
    let win = cfg.window().unwrap();
    let a = batch_spectra(&pad_batch(&data).unwrap(), &win).unwrap();
    let longest = data.iter().map(|(n, _)| n.len()).max().unwrap();
    let b = batch_spectra(&pad_batch_to(&data, longest + 500).unwrap(), &win).unwrap();
    assert_eq!(a.noisy, b.noisy);
    assert_eq!(a.clean, b.clean);
    for mode in [Mode::Train, Mode::Eval] {
        let la = m
            .total_loss(&m.forward(&a.noisy, &a.segments, mode).unwrap(), &a.clean)
            .unwrap();
        let lb = m
            .total_loss(&m.forward(&b.noisy, &b.segments, mode).unwrap(), &b.clean)
            .unwrap();
        assert_eq!(la, lb);
    }
}

#[test]
fn padding_marks_trailing_frames_invalid() {
    let a = Waveform::new(vec![0.1; 3200], 16000).unwrap();
    let b = Waveform::new(vec![0.1; 4800], 16000).unwrap();
    let batch = pad_batch(&[(a.clone(), a), (b.clone(), b)]).unwrap();
    assert_eq!(batch.padded_len, 4800);
    assert!(batch.noisy.iter().all(|w| w.len() == 4800));
    let mask = batch.frame_mask(512, 256);
    assert!(mask[1].iter().all(|&v| v));
    assert!(!*mask[0].last().unwrap());
    assert!(pad_batch(&[]).is_err());
}

#[test]
fn adam_updates_are_deterministic() {
    let run = || {
        let cfg = tiny_config(7);
        let mut m = MultiStageModel::build(cfg).unwrap();
        let data = pairs(4, 8);
        let batch = batch_spectra(&pad_batch(&data).unwrap(), &cfg.window().unwrap()).unwrap();
        let mut state = AdamState::new(&m.store);
        let tc = TrainConfig::default();
        for _ in 0..3 {
            train_step(&mut m, &mut state, &batch, &tc, tc.lr).unwrap();
        }
        (to_bytes(&m, Some(&state)), state)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(sa.step, 3);
}

#[test]
fn small_step_decreases_loss_on_a_frozen_batch() {
    let data = pairs(4, 9);
    let mut failures = 0;
    for seed in 0..10 {
        let cfg = tiny_config(100 + seed);
        let mut m = MultiStageModel::build(cfg).unwrap();
        let batch = batch_spectra(&pad_batch(&data).unwrap(), &cfg.window().unwrap()).unwrap();
        let tc = TrainConfig {
            lr: 1e-5,
            ..TrainConfig::default()
        };
        // Train mode normalizes with batch statistics, so only the step
        // itself can move this loss.
        let loss = |m: &MultiStageModel| {
            m.total_loss(
                &m.forward(&batch.noisy, &batch.segments, Mode::Train).unwrap(),
                &batch.clean,
            )
            .unwrap()
            .total
        };
        let before = loss(&m);
        let mut state = AdamState::new(&m.store);
        m.store.zero_grads();
        let trace = m.forward(&batch.noisy, &batch.segments, Mode::Train).unwrap();
        m.backward(&trace, &batch.clean).unwrap();
        adam_step(&mut m.store, &mut state, &tc).unwrap();
        if loss(&m) >= before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of 10 inits did not improve");
}

#[test]
fn zero_learning_rate_leaves_loss_unchanged() {
    let cfg = tiny_config(11);
    let mut m = MultiStageModel::build(cfg).unwrap();
    let data = pairs(4, 12);
    let tc = TrainConfig {
        lr: 0.0,
        batch_size: 4,
        epochs: 3,
        ..TrainConfig::default()
    };
    let report = fit(&mut m, &data, &tc).unwrap();
    let first = report.log.epochs[0].losses.total;
    for e in &report.log.epochs {
        assert!(
            (e.losses.total - first).abs() <= 1e-12 * first,
            "{} vs {first}",
            e.losses.total
        );
    }
}

#[test]
fn log_has_one_entry_per_step() {
    let cfg = tiny_config(13);
    let data = pairs(5, 14);
    for (batch_size, epochs) in [(2, 3), (5, 2), (4, 1)] {
        let mut m = MultiStageModel::build(cfg).unwrap();
        let tc = TrainConfig {
            batch_size,
            epochs,
            ..TrainConfig::default()
        };
        let report = fit(&mut m, &data, &tc).unwrap();
        assert_eq!(report.log.steps.len(), epochs * data.len().div_ceil(batch_size));
        assert_eq!(report.log.epochs.len(), epochs);
        let tsv = report.log.to_tsv();
        assert_eq!(tsv.lines().count(), report.log.steps.len() + 1);
        assert!(tsv.starts_with("epoch\tstep\tL1\tL2\tL3\ttotal\n"));
    }
}

#[test]
fn fit_rejects_an_empty_set_and_bad_config() {
    let mut m = MultiStageModel::build(tiny_config(15)).unwrap();
    assert!(fit(&mut m, &[], &TrainConfig::default()).is_err());
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(fit(&mut m, &pairs(2, 1), &bad).is_err());
}

#[test]
fn diverging_run_restores_best_parameters() {
    let cfg = tiny_config(16);
    let mut m = MultiStageModel::build(cfg).unwrap();
    let tc = TrainConfig {
        lr: f64::MAX,
        batch_size: 2,
        epochs: 5,
        ..TrainConfig::default()
    };
    match fit(&mut m, &pairs(4, 17), &tc) {
        Err(Error::Diverged { .. }) | Err(Error::NonFiniteGradient { .. }) => {
            assert!(m.store.iter().all(|p| p.value.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.log.steps.len())),
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let cfg = tiny_config(18);
    let mut m = MultiStageModel::build(cfg).unwrap();
    let data = pairs(4, 19);
    let report = fit(
        &mut m,
        &data,
        &TrainConfig {
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&m, Some(&report.optimizer), &path).unwrap();
    let (loaded, state) = load_checkpoint(&path).unwrap();
    assert_eq!(state.as_ref(), Some(&report.optimizer));
    assert_eq!(loaded.config, m.config);
    for (a, b) in m.store.iter().zip(loaded.store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let (n, _) = &data[0];
    assert_eq!(enhance(&m, n).unwrap(), enhance(&loaded, n).unwrap());
    assert_eq!(to_bytes(&loaded, state.as_ref()), std::fs::read(&path).unwrap());
}

#[test]
fn corrupt_checkpoints_report_an_offset() {
    let m = MultiStageModel::build(tiny_config(20)).unwrap();
    let bytes = to_bytes(&m, None);
    for cut in [0, 4, 20, bytes.len() / 2, bytes.len() - 1] {
        match from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
            Err(e) => panic!("cut {cut}: unexpected {e}"),
            Ok(_) => panic!("cut {cut}: accepted a truncated checkpoint"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(from_bytes(&long), Err(Error::Format { .. })));
}
