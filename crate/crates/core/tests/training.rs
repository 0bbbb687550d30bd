use fcformer::data::{generate, images_to_tensor, Dataset, DatasetConfig};
use fcformer::encoder::EncoderConfig;
use fcformer::model::{FcFormer, ModelConfig};
use fcformer::numerics::{Checkpoint, Graph, ParamStore, Tensor};
use fcformer::oil::make_synthetic_library;
use fcformer::oia::{augment_batch, AugmentConfig};
use fcformer::trainer::{clip_grad_norm, grad_norm, train_step, Sgd, Trainer, TrainConfig, METRICS_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data(n_ids: usize, per_id: usize) -> Dataset {
    generate(&DatasetConfig {
        seed: 1,
        n_ids,
        train_per_id: per_id,
        query_per_id: 2,
        gallery_per_id: 2,
        n_cams: 2,
        img_h: 32,
        img_w: 16,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn tiny_config(n_ids: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                img_h: 32,
                img_w: 16,
                patch: 8,
                dim: 16,
                depth: 1,
                heads: 2,
                n_cameras: 2,
                lambda_cm: 3.0,
                m_parts: 4,
            },
            fcd: fcformer::fcd::FcdConfig { alpha: 0.5, dec_depth: 1 },
            n_ids,
            ..ModelConfig::default()
        },
        epochs,
        base_lr: 0.03,
        pk: fcformer::data::PkSpec { p: 2, k: 2 },
        seed: 5,
        library_size: 2,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, data: &Dataset, steps: usize) -> Trainer {
    let mut t = Trainer::new(cfg, data).unwrap();
    for _ in 0..steps {
        t.step_once(data).unwrap();
    }
    t
}

fn bits(store: &ParamStore) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let data = tiny_data(4, 4);
    let cfg = tiny_config(4, 2);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut a = Trainer::new(&cfg, &data).unwrap();
    a.fit(&data, Some(dir_a.path())).unwrap();
    let mut b = Trainer::new(&cfg, &data).unwrap();
    b.fit(&data, Some(dir_b.path())).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&dir_a, "metrics.csv"), read(&dir_b, "metrics.csv"));
    assert_eq!(read(&dir_a, "checkpoint.fcf"), read(&dir_b, "checkpoint.fcf"));
    assert_eq!(bits(&a.model.store), bits(&b.model.store));

    let other = run(&TrainConfig { seed: 6, ..cfg }, &data, 2);
    assert_ne!(other.log[1].loss, a.log[1].loss);
}

#[test]
fn run_directory_holds_config_metrics_and_checkpoint() {
    let data = tiny_data(4, 4);
    let cfg = TrainConfig {
        checkpoint_every: 1,
        ..tiny_config(4, 2)
    };
    let dir = tempfile::tempdir().unwrap();
    let t = fcformer::trainer::fit(&cfg, &data, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), t.total_steps());
    assert!(rows.iter().all(|r| r.split(',').count() == METRICS_HEADER.len()));
    let echoed: TrainConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
    for f in ["checkpoint.fcf", "checkpoint_e1.fcf", "checkpoint_e2.fcf"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_data(4, 4);
    let cfg = tiny_config(4, 3);
    let full = run(&cfg, &data, 10);
    let first = run(&cfg, &data, 4);
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(&ckpt, &data, make_synthetic_library(cfg.seed, cfg.library_size)).unwrap();
    assert_eq!(resumed.step, 4);
    for step in 4..10 {
        let row = resumed.step_once(&data).unwrap();
        let want = full.log[step];
        assert_eq!(row.step, want.step);
        assert!((row.loss.total - want.loss.total).abs() <= 1e-6, "step {step}");
        assert!((row.lr - want.lr).abs() <= 1e-9);
    }
    for ((name, a), (_, b)) in bits(&resumed.model.store).iter().zip(bits(&full.model.store)) {
        let diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (f32::from_bits(*x) - f32::from_bits(*y)).abs())
            .fold(0.0, f32::max);
        assert!(diff <= 1e-6, "{name} differs by {diff}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = tiny_data(4, 4);
    let cfg = tiny_config(4, 1);
    let t = run(&cfg, &data, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fcf");
    t.checkpoint().save(&path).unwrap();
    let mut fresh = FcFormer::new(&cfg.model, 99).unwrap();
    assert_ne!(bits(&fresh.store), bits(&t.model.store));
    Checkpoint::load(&path).unwrap().restore_into(&mut fresh.store).unwrap();
    assert_eq!(bits(&fresh.store), bits(&t.model.store));

    let mut wrong = ModelConfig { n_ids: 5, ..cfg.model.clone() };
    wrong.encoder.dim = 16;
    let mut mismatched = FcFormer::new(&wrong, 0).unwrap();
    assert!(Checkpoint::load(&path).unwrap().restore_into(&mut mismatched.store).is_err());
}

#[test]
fn zero_learning_rate_freezes_trainable_parameters() {
    let data = tiny_data(4, 4);
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..tiny_config(4, 1)
    };
    let before = Trainer::new(&cfg, &data).unwrap();
    let after = run(&cfg, &data, 3);
    for (id, p) in after.model.store.iter() {
        let same = p.value == *before.model.store.value(id);
        if p.trainable {
            assert!(same, "{} moved", p.name);
        } else {
            assert!(!same, "running statistic {} was not updated", p.name);
        }
    }
}

/// Identity-head accuracy on the training images in eval mode.
fn train_accuracy(model: &FcFormer, data: &Dataset) -> f64 {
    let net = &model.net;
    let m = net.cfg.encoder.m_parts;
    let mut correct = 0;
    for chunk in data.train.chunks(16) {
        let g = Graph::new();
        let x = images_to_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
        let cams: Vec<usize> = chunk.iter().map(|s| s.cam).collect();
        let enc = net.encoder.forward(&g, &model.store, &x, &cams).unwrap();
        let f = net.holistic.forward(&g, &model.store, enc, m, None, false, &mut Vec::new()).unwrap();
        let logits = net.heads.global.forward(&g, &model.store, f.global_bn).unwrap();
        let v = g.value(logits);
        let c = net.cfg.n_ids;
        for (i, s) in chunk.iter().enumerate() {
            let row = &v.data()[i * c..(i + 1) * c];
            let best = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            correct += usize::from(best == s.pid);
        }
    }
    correct as f64 / data.train.len() as f64
}

#[test]
fn two_hundred_steps_overfit_a_small_set() {
    let data = tiny_data(4, 8);
    let cfg = TrainConfig {
        pk: fcformer::data::PkSpec { p: 4, k: 4 },
        ..tiny_config(4, 100)
    };
    let mut t = Trainer::new(&cfg, &data).unwrap();
    assert_eq!(t.total_steps(), 200);
    let before = train_accuracy(&t.model, &data);
    t.fit(&data, None).unwrap();
    let acc = train_accuracy(&t.model, &data);
    let first = t.log[..10].iter().map(|r| r.loss.total).sum::<f32>();
    let last = t.log[190..].iter().map(|r| r.loss.total).sum::<f32>();
    assert!(acc >= 0.8, "accuracy {before} -> {acc}");
    assert!(last < first, "loss did not fall: {first} -> {last}");
}

#[test]
fn one_batch_loss_falls_by_four_fifths_in_two_hundred_steps() {
    let data = tiny_data(4, 4);
    let cfg = tiny_config(4, 1);
    let mut model = FcFormer::new(&cfg.model, cfg.seed).unwrap();
    let batch: Vec<_> = data.train.iter().step_by(2).map(|s| (s.image.clone(), s.pid, s.cam)).collect();
    let lib = make_synthetic_library(cfg.seed, cfg.library_size);
    let pairs = augment_batch(&batch, &lib, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let hol: Vec<_> = pairs.iter().map(|p| p.holistic.clone()).collect();
    let occ: Vec<_> = pairs.iter().map(|p| p.occluded.clone()).collect();
    let labels: Vec<_> = batch.iter().map(|b| b.1).collect();
    let cams: Vec<_> = batch.iter().map(|b| b.2).collect();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut step = || train_step(&mut model, &mut opt, &hol, &occ, &cams, &labels, 0.03, cfg.grad_clip).unwrap().total;
    let first = step();
    let last = (1..200).map(|_| step()).last().unwrap();
    assert!(last <= 0.2 * first, "{first} -> {last}");
}

#[test]
fn clipping_rescales_to_the_limit() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::zeros(vec![2]));
    store.get_mut(a).grad = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
    assert_eq!(clip_grad_norm(&mut store, 10.0), 5.0);
    assert_eq!(grad_norm(&store), 5.0);
    clip_grad_norm(&mut store, 1.0);
    assert!((grad_norm(&store) - 1.0).abs() < 1e-6);
}

#[test]
fn invalid_configurations_list_every_problem() {
    let data = tiny_data(4, 4);
    let mut cfg = tiny_config(4, 0);
    cfg.base_lr = -1.0;
    cfg.delta_range = (0.5, 1.5);
    let msg = Trainer::new(&cfg, &data).err().unwrap().to_string();
    for needle in ["epochs", "base_lr", "delta range"] {
        assert!(msg.contains(needle), "{msg}");
    }
    let too_few_classes = tiny_config(3, 1);
    assert!(Trainer::new(&too_few_classes, &data).is_err());
}
