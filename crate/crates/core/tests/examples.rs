use deformtrace::config::RunConfig;
use deformtrace::data::{self, generate_dataset, DataConfig};
use deformtrace::experiment::splits;
use deformtrace::model::Model;
use deformtrace::par::Execution;
use deformtrace::relay::{cooperation_loss_value, enhance_loss_value};
use deformtrace::train::Trainer;
use deformtrace::Tensor;

/// Two relays over a constant sequence along `e1`.
fn constant_sequence(t: usize) -> Tensor {
    Tensor::from_rows(&vec![vec![1.0, 0.0]; t]).unwrap()
}

#[test]
fn enhance_averages_cosines() {
    let relays = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.8, 0.6]]).unwrap();
    let (v, degenerate) = enhance_loss_value(&relays, &constant_sequence(9)).unwrap();
    assert!(!degenerate);
    assert!((v + 0.7).abs() < 1e-12, "{v}");

    let orthogonal = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -2.0]]).unwrap();
    let (v, _) = enhance_loss_value(&orthogonal, &constant_sequence(9)).unwrap();
    assert!(v.abs() < 1e-12, "{v}");
}

#[test]
fn cooperation_of_zero_tokens_is_gamma_squared_times_count() {
    let (v, _) = cooperation_loss_value(&Tensor::zeros([2, 4]), 1.0).unwrap();
    assert!((v - 2.0).abs() < 1e-12);
    let (v, _) = cooperation_loss_value(&Tensor::zeros([3, 4]), 0.5).unwrap();
    assert!((v - 0.75).abs() < 1e-12);
}

#[test]
fn no_relays_is_degenerate_zero() {
    let (v, degenerate) = cooperation_loss_value(&Tensor::zeros([0, 4]), 1.0).unwrap();
    assert!(degenerate && v == 0.0);
}

#[test]
fn generator_forges_about_one_and_a_half_segments() {
    let cfg = DataConfig { samples: 1000, seed: 11, ..DataConfig::default() };
    let set = generate_dataset(&cfg, Execution::Parallel).unwrap();
    let mean = set.iter().map(|s| s.gt.segments.len()).sum::<usize>() as f64 / set.len() as f64;
    assert!((mean - 1.5).abs() <= 0.1, "mean forged segments {mean}");
}

#[test]
fn feature_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig { samples: 3, length: 24, max_duration: 6, ..DataConfig::default() };
    let set = generate_dataset(&cfg, Execution::Sequential).unwrap();
    data::write_dataset(dir.path(), &set).unwrap();
    let back = data::load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in set.iter().zip(&back) {
        // Features are stored as f32.
        assert!(a.video.max_abs_diff(&b.video) < 1e-6);
        assert!(a.audio.max_abs_diff(&b.audio) < 1e-6);
        assert_eq!(a.gt.label, b.gt.label);
        assert_eq!(a.gt.segments.len(), b.gt.segments.len());
        for (x, y) in a.gt.segments.iter().zip(&b.gt.segments) {
            assert!((x.center - y.center).abs() < 1e-12 && (x.duration - y.duration).abs() < 1e-12);
        }
    }
}

#[test]
fn training_loss_falls_on_easy_data() {
    let mut cfg = RunConfig::tiny();
    cfg.data.samples = 16;
    cfg.test_samples = 1;
    cfg.data.length = 32;
    cfg.data.max_duration = 8;
    cfg.data.difficulty = 0.0;
    cfg.model.channels = 16;
    cfg.model.queries = 4;
    cfg.model.relays = 2;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 5;
    cfg.train.warmup_epochs = 0;
    cfg.train.lr = 1e-3;
    cfg.seed = 5;
    let cfg = cfg.resolved().unwrap();
    let data = splits(&cfg).unwrap();
    let mut model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let mut trainer = Trainer::new(&model, cfg.train.clone(), data.train.len()).unwrap();
    let losses: Vec<f64> =
        (0..5).map(|e| trainer.epoch(&mut model, &data.train, e).unwrap().loss.total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}
