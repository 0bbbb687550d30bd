use std::collections::HashMap;

use fcformer::encoder::{split_parts, Encoder, EncoderConfig};
use fcformer::fcd::{Fcd, FcdConfig};
use fcformer::model::{ModelConfig, Net};
use fcformer::numerics::{Graph, ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_encoder(lambda_cm: f32) -> EncoderConfig {
    EncoderConfig {
        img_h: 16,
        img_w: 8,
        patch: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        n_cameras: 3,
        lambda_cm,
        m_parts: 4,
    }
}

fn images(b: usize, cfg: &EncoderConfig, seed: u64) -> Tensor {
    Tensor::randn(vec![b, cfg.img_h, cfg.img_w, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn token_bookkeeping_holds_for_every_valid_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut tested = 0;
    for n in [2usize, 4, 6, 8, 16, 32, 50, 128] {
        for step in 1..20 {
            let cfg = FcdConfig {
                alpha: step as f32 * 0.05,
                dec_depth: 1,
            };
            let (k, l) = (cfg.k(n), cfg.l(n));
            if !cfg.violations(n).is_empty() {
                assert!(k == 0 || l == 0, "N={n} alpha={}", cfg.alpha);
                continue;
            }
            assert_eq!(1 + k + l, n + 1);
            let mut store = ParamStore::new();
            let fcd = Fcd::new(&mut store, &cfg, n, 4, 2, &mut rng).unwrap();
            let g = Graph::new();
            let f_og = g.constant(Tensor::randn(vec![2, 4], 1.0, &mut rng));
            let f_ot = g.constant(Tensor::randn(vec![2, n, 4], 1.0, &mut rng));
            let f_r = fcd.hybrid_embed(&g, &store, f_og, f_ot).unwrap();
            assert_eq!(g.shape(f_r), vec![2, n + 1, 4]);
            assert_eq!(g.shape(fcd.completion_tokens(&g, &store, f_ot).unwrap()), vec![2, k, 4]);
            assert_eq!(g.shape(fcd.decode(&g, &store, f_r).unwrap()), vec![2, n, 4]);
            tested += 1;
        }
    }
    assert!(tested > 100);
}

#[test]
fn split_parts_is_a_partition_of_patch_tokens() {
    for (n, m) in [(32, 4), (32, 1), (32, 32), (128, 4), (12, 3)] {
        let data: Vec<f32> = (0..2 * (n + 1) * 3).map(|v| v as f32).collect();
        let g = Graph::new();
        let seq = g.constant(Tensor::new(vec![2, n + 1, 3], data.clone()).unwrap());
        let parts = split_parts(&g, seq, m).unwrap();
        assert_eq!(parts.len(), m);
        for b in 0..2 {
            let mut patches = Vec::new();
            for &p in &parts {
                assert_eq!(g.shape(p), vec![2, n / m + 1, 3]);
                let v = g.value(p);
                let row = &v.data()[b * (n / m + 1) * 3..(b + 1) * (n / m + 1) * 3];
                assert_eq!(&row[..3], &data[b * (n + 1) * 3..b * (n + 1) * 3 + 3], "global token leads");
                patches.extend_from_slice(&row[3..]);
            }
            assert_eq!(&patches[..], &data[b * (n + 1) * 3 + 3..(b + 1) * (n + 1) * 3]);
        }
    }
    let g = Graph::new();
    let seq = g.constant(Tensor::zeros(vec![1, 33, 2]));
    assert!(split_parts(&g, seq, 5).is_err());
}

#[test]
fn zero_camera_weight_removes_camera_dependence() {
    let cfg = small_encoder(0.0);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let x = images(3, &cfg, 1);
    let g = Graph::new();
    let a = enc.forward(&g, &store, &x, &[0, 1, 2]).unwrap();
    let b = enc.forward(&g, &store, &x, &[2, 2, 0]).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
}

#[test]
fn camera_embedding_shifts_every_token_equally() {
    let cfg = small_encoder(3.0);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
    let x = images(1, &cfg, 2);
    let g = Graph::new();
    let a = g.value(enc.embed(&g, &store, &x, &[0]).unwrap()).clone();
    let b = g.value(enc.embed(&g, &store, &x, &[1]).unwrap()).clone();
    let cam = store.value(enc.cam_embed);
    let c = cfg.dim;
    for t in 0..cfg.n_patches() + 1 {
        for k in 0..c {
            let diff = a.data()[t * c + k] - b.data()[t * c + k];
            let want = 3.0 * (cam.data()[k] - cam.data()[c + k]);
            assert!((diff - want).abs() < 1e-5, "token {t} channel {k}");
        }
    }
    let g = Graph::new();
    let out_a = enc.forward(&g, &store, &x, &[0]).unwrap();
    let out_b = enc.forward(&g, &store, &x, &[1]).unwrap();
    assert_ne!(g.value(out_a).data(), g.value(out_b).data());
    assert!(enc.forward(&g, &store, &x, &[3]).is_err());
}

#[test]
fn encoder_commutes_with_batch_permutation() {
    let cfg = small_encoder(1.0);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(44)).unwrap();
    let x = images(3, &cfg, 3);
    let per = x.numel() / 3;
    let perm = [2usize, 0, 1];
    let mut shuffled = Vec::new();
    for &i in &perm {
        shuffled.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let xp = Tensor::new(x.shape().to_vec(), shuffled).unwrap();
    let g = Graph::new();
    let out = g.value(enc.forward(&g, &store, &x, &[0, 1, 2]).unwrap()).clone();
    let outp = g.value(enc.forward(&g, &store, &xp, &[2, 0, 1]).unwrap()).clone();
    let row = out.numel() / 3;
    for (j, &i) in perm.iter().enumerate() {
        let a = &out.data()[i * row..(i + 1) * row];
        let b = &outp.data()[j * row..(j + 1) * row];
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5));
    }
}

fn toy_model() -> (ParamStore, Net, ModelConfig) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            n_cameras: 2,
            ..small_encoder(1.0)
        },
        n_ids: 4,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let net = Net::new(&mut store, &cfg, 45).unwrap();
    (store, net, cfg)
}

fn grads_by_name(store: &ParamStore, grads: &fcformer::numerics::Gradients) -> HashMap<String, Vec<f32>> {
    grads
        .param_grads()
        .map(|(id, t): (ParamId, &Tensor)| (store.get(id).name.clone(), t.data().to_vec()))
        .collect()
}

#[test]
fn stream_layers_only_receive_their_own_gradients() {
    let (store, net, cfg) = toy_model();
    let x = images(4, &cfg.encoder, 4);
    let cams = [0, 1, 0, 1];
    let loss_of = |which: &str| {
        let g = Graph::new();
        let enc = net.encoder.forward(&g, &store, &x, &cams).unwrap();
        let branch = if which == "holistic" { &net.holistic } else { &net.occluded };
        let f = branch.forward(&g, &store, enc, cfg.encoder.m_parts, None, true, &mut Vec::new()).unwrap();
        let loss = g.sum(g.square(f.parts_bn));
        let loss = g.add(loss, g.sum(g.square(f.global_bn))).unwrap();
        grads_by_name(&store, &g.backward(loss).unwrap())
    };
    let hol = loss_of("holistic");
    let occ = loss_of("occluded");
    assert!(hol.keys().any(|k| k.starts_with("stream.holistic.")));
    assert!(!hol.keys().any(|k| k.contains("occluded")));
    assert!(!occ.keys().any(|k| k.contains("holistic")));
    assert!(hol.keys().any(|k| k.starts_with("encoder.")));
}

#[test]
fn shared_encoder_accumulates_both_streams() {
    let (store, net, cfg) = toy_model();
    let x = images(4, &cfg.encoder, 5);
    let cams = [0, 1, 1, 0];
    let m = cfg.encoder.m_parts;
    let run = |use_h: bool, use_o: bool| {
        let g = Graph::new();
        let enc = net.encoder.forward(&g, &store, &x, &cams).unwrap();
        let mut loss = g.constant(Tensor::scalar(0.0));
        if use_h {
            let f = net.holistic.forward(&g, &store, enc, m, None, true, &mut Vec::new()).unwrap();
            loss = g.add(loss, g.sum(g.square(f.parts))).unwrap();
        }
        if use_o {
            let f = net.occluded.forward(&g, &store, enc, m, None, true, &mut Vec::new()).unwrap();
            loss = g.add(loss, g.sum(f.parts)).unwrap();
        }
        grads_by_name(&store, &g.backward(loss).unwrap())
    };
    let (h, o, both) = (run(true, false), run(false, true), run(true, true));
    for (name, total) in &both {
        if !name.starts_with("encoder.") {
            continue;
        }
        let zero = vec![0.0; total.len()];
        let (a, b) = (h.get(name).unwrap_or(&zero), o.get(name).unwrap_or(&zero));
        for i in 0..total.len() {
            let want = a[i] + b[i];
            assert!((total[i] - want).abs() <= 1e-4 * want.abs().max(1.0), "{name}[{i}]");
        }
    }
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let (mut store, net, cfg) = toy_model();
    let h = images(4, &cfg.encoder, 6);
    let o = images(4, &cfg.encoder, 7);
    let grads = |store: &ParamStore| {
        let g = Graph::new();
        let out = net.forward_train(&g, store, &h, &o, &[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(out.bn_updates.len(), 5, "two BNNecks per stream, none for the completed global");
        grads_by_name(store, &g.backward(out.loss).unwrap())
    };
    let alive = |grads: &HashMap<String, Vec<f32>>, name: &str| grads.get(name).is_some_and(|g| g.iter().any(|v| *v != 0.0));
    let at_init = grads(&store);
    for id in store.trainable_ids() {
        let name = &store.get(id).name;
        if name == "fcd.pos_embed" {
            // the injection gate starts closed
            assert!(!alive(&at_init, name));
        } else {
            assert!(alive(&at_init, name), "{name} gets no gradient");
        }
    }
    let gate_bias = store.id("fcd.gate.bias").unwrap();
    store.value_mut(gate_bias).data_mut()[0] = 0.1;
    assert!(alive(&grads(&store), "fcd.pos_embed"));
}

#[test]
fn disabling_completion_drops_its_parameters_and_losses() {
    let cfg = ModelConfig {
        use_fcd: false,
        ..toy_model().2
    };
    let mut store = ParamStore::new();
    let net = Net::new(&mut store, &cfg, 46).unwrap();
    assert!(store.iter().all(|(_, p)| !p.name.starts_with("fcd.") && !p.name.contains("completed")));
    let x = images(4, &cfg.encoder, 8);
    let g = Graph::new();
    let out = net.forward_train(&g, &store, &x, &x, &[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
    assert_eq!((out.report.fcd, out.report.fc2), (0.0, 0.0));
    assert!(out.f_cp.is_none() && out.features.completed.is_none());
    assert_eq!(cfg.descriptor_dim(false), 8 + 4 * 8);
}
