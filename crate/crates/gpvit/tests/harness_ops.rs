//! Data generation, image I/O, checkpoints, the optimizer, and the invariant
//! suite (including the injected-fault sanity check).

use std::path::PathBuf;

use gpvit::checkpoint;
use gpvit::config::{preset, ModelConfig};
use gpvit::data::SyntheticDataset;
use gpvit::gradcheck::{gradcheck, zero_head_control};
use gpvit::imageio::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, RgbImage};
use gpvit::invariants::{all_passed, run_suite, SuiteOptions};
use gpvit::model::{image_token_map, Model};
use gpvit::nn::{Init, ParamSet};
use gpvit::rng::Prng;
use gpvit::train::{cross_entropy, stats_csv, train, Adam, TrainConfig};
use gpvit::Tensor;

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("gpvit-harness-tests");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn dataset_is_deterministic_and_balanced() {
    let a = SyntheticDataset::generate(8, 8, 32, 42);
    let b = SyntheticDataset::generate(8, 8, 32, 42);
    assert_eq!(a.len(), 64);
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.label, y.label);
        assert_eq!(x.pixels, y.pixels);
    }
    let mut counts = [0usize; 8];
    for s in &a.samples {
        counts[s.label] += 1;
        assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    assert!(counts.iter().all(|&c| c == 8));
    // a different seed perturbs the noise
    let c = SyntheticDataset::generate(8, 8, 32, 43);
    assert_ne!(a.samples[0].pixels, c.samples[0].pixels);
}

#[test]
fn classes_are_visually_distinct() {
    // per-class mean pixel vectors should be well separated
    let data = SyntheticDataset::generate(8, 4, 16, 7);
    let mut means = vec![[0.0f64; 3]; 8];
    for s in &data.samples {
        for px in s.pixels.chunks(3) {
            for ch in 0..3 {
                means[s.label][ch] += px[ch];
            }
        }
    }
    for m in means.iter_mut() {
        for ch in m.iter_mut() {
            *ch /= (4 * 16 * 16) as f64;
        }
    }
    for i in 0..8 {
        for j in (i + 1)..8 {
            let d2: f64 = (0..3).map(|ch| (means[i][ch] - means[j][ch]).powi(2)).sum();
            assert!(d2.sqrt() > 0.02, "classes {i} and {j} too similar ({})", d2.sqrt());
        }
    }
}

#[test]
fn pgm_and_ppm_round_trip() {
    let gray = GrayImage { width: 5, height: 3, pixels: (0u8..15).collect() };
    let path = tmp("roundtrip.pgm");
    write_pgm(&path, &gray).unwrap();
    let back = read_pgm(&path).unwrap();
    assert_eq!((back.width, back.height), (5, 3));
    assert_eq!(back.pixels, gray.pixels);

    let rgb = RgbImage { width: 2, height: 2, pixels: (0u8..12).collect() };
    let path = tmp("roundtrip.ppm");
    write_ppm(&path, &rgb).unwrap();
    let back = read_ppm(&path).unwrap();
    assert_eq!((back.width, back.height), (2, 2));
    assert_eq!(back.pixels, rgb.pixels);
}

#[test]
fn netpbm_reader_handles_comments_and_rejects_garbage() {
    let path = tmp("commented.pgm");
    let mut bytes = b"P5\n# a comment\n2 2\n# another\n255\n".to_vec();
    bytes.extend_from_slice(&[1, 2, 3, 4]);
    std::fs::write(&path, bytes).unwrap();
    let img = read_pgm(&path).unwrap();
    assert_eq!(img.pixels, vec![1, 2, 3, 4]);

    let bad = tmp("bad.pgm");
    std::fs::write(&bad, b"P6\n2 2\n255\nxxxx").unwrap();
    assert!(read_pgm(&bad).is_err(), "P6 magic should not read as pgm");
    std::fs::write(&bad, b"P5\n2 2\n255\nab").unwrap();
    assert!(read_pgm(&bad).is_err(), "truncated pixels");
    std::fs::write(&bad, b"P5\n2 2\n65535\n____").unwrap();
    assert!(read_pgm(&bad).is_err(), "unsupported maxval");
}

#[test]
fn checkpoint_round_trips_and_guards_config() {
    let cfg = preset("tiny-gradcheck").unwrap();
    let model = Model::<f64>::build(&cfg, 3).unwrap();
    let path = tmp("model.ckpt");
    checkpoint::save(&path, &cfg, &model.params).unwrap();

    let fresh = Model::<f64>::build(&cfg, 99).unwrap();
    let before = fresh.params.iter().next().unwrap().values();
    checkpoint::load(&path, &cfg, &fresh.params).unwrap();
    for (a, b) in model.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.values(), b.values(), "{} mismatch", a.name());
    }
    assert_ne!(before, fresh.params.iter().next().unwrap().values());

    // a different configuration must be rejected by digest
    let other = preset("tiny-train").unwrap();
    let victim = Model::<f64>::build(&other, 0).unwrap();
    let err = checkpoint::load(&path, &other, &victim.params).unwrap_err();
    assert!(err.to_string().contains("digest"));

    // corrupted magic
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    let bad = tmp("corrupt.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    assert!(checkpoint::load(&bad, &cfg, &fresh.params).is_err());
}

#[test]
fn cross_entropy_matches_closed_form() {
    // logits [0, ln 3]: softmax = [0.25, 0.75]
    let logits = Tensor::<f64>::from_f64(&[0.0, 3.0f64.ln()], vec![1, 2]);
    let l0 = cross_entropy(&logits, 0).item();
    let l1 = cross_entropy(&logits, 1).item();
    assert!((l0 - 0.25f64.ln().abs()).abs() < 1e-12);
    assert!((l1 - 0.75f64.ln().abs()).abs() < 1e-12);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut set = ParamSet::<f64>::new(0);
    let p = set.register("w", vec![2], Init::Zeros);
    let mut adam = Adam::new(&set, 0.05);
    for _ in 0..400 {
        let v = p.values();
        let grads = vec![vec![2.0 * (v[0] - 3.0), 2.0 * (v[1] + 1.5)]];
        adam.step(&set, &grads);
    }
    let v = p.values();
    assert!((v[0] - 3.0).abs() < 1e-3 && (v[1] + 1.5).abs() < 1e-3, "{v:?}");
}

#[test]
fn one_class_dataset_is_learned_instantly() {
    let cfg = ModelConfig { num_classes: 1, ..preset("tiny-train").unwrap() };
    let model = Model::<f32>::build(&cfg, 5).unwrap();
    let data = SyntheticDataset::generate(1, 8, 32, 6);
    let stats = train(
        &model,
        &data,
        &TrainConfig { epochs: 1, lr: 1e-3, batch_size: 8, seed: 7, stop_at_accuracy: None },
    )
    .unwrap();
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].accuracy, 1.0);
}

#[test]
fn short_training_reduces_loss_deterministically() {
    let cfg = preset("tiny-train").unwrap();
    let data = SyntheticDataset::generate(8, 2, 32, 11);
    let run = || {
        let model = Model::<f32>::build(&cfg, 21).unwrap();
        train(
            &model,
            &data,
            &TrainConfig { epochs: 5, lr: 3e-4, batch_size: 16, seed: 9, stop_at_accuracy: None },
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.last().unwrap().loss < a[0].loss, "loss should drop: {a:?}");
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.loss, y.loss, "training must be deterministic");
        assert_eq!(x.accuracy, y.accuracy);
    }
    let csv = stats_csv(&a);
    assert!(csv.starts_with("epoch,loss,accuracy\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn gradcheck_refuses_oversized_models() {
    let cfg = preset("tiny-gradcheck").unwrap();
    let model = Model::<f64>::build(&cfg, 0).unwrap();
    let mut rng = Prng::seed_from(0);
    let px: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.uniform()).collect();
    let img = image_token_map(&px, 32, 32);
    let err = gradcheck(&model, &img, 100).unwrap_err();
    assert!(err.to_string().contains("cap"));
}

#[test]
fn zero_head_control_kills_backbone_gradients() {
    let cfg = preset("tiny-gradcheck").unwrap();
    let model = Model::<f64>::build(&cfg, 2).unwrap();
    let mut rng = Prng::seed_from(3);
    let px: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.uniform()).collect();
    let img = image_token_map(&px, 32, 32);
    let worst = zero_head_control(&model, &img).unwrap();
    assert!(worst < 1e-12, "backbone gradient leaked: {worst}");
}

#[test]
fn invariant_suite_passes_on_tiny_presets() {
    for name in ["tiny-gradcheck", "tiny-train"] {
        let cfg = preset(name).unwrap();
        let results = run_suite(&cfg, 5, SuiteOptions::default()).unwrap();
        assert!(results.len() >= 6);
        for r in &results {
            assert!(r.passed, "{name}/{}: {}", r.name, r.detail);
        }
        assert!(all_passed(&results));
    }
}

#[test]
fn injected_softmax_axis_fault_fails_the_row_sum_check() {
    let cfg = preset("tiny-train").unwrap();
    let results = run_suite(&cfg, 5, SuiteOptions { fault_softmax_axis: true }).unwrap();
    let row_sum = results.iter().find(|r| r.name == "grouping-row-sums").unwrap();
    assert!(!row_sum.passed, "fault injection must be detected");
    assert!(!all_passed(&results));
}
