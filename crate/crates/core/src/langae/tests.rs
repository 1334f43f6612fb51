use super::*;
use crate::data::{gen_phantom, simulate_low_dose, to_model_input, NoiseModel};
use crate::testutil::rng;

fn small_cfg() -> LangAeConfig {
    LangAeConfig {
        channels: [4, 8, 8, 8],
        vocab: 256,
        embed_dim: 8,
        ..LangAeConfig::default()
    }
}

fn phantom_input(seed: u64, size: usize) -> DenseTensor {
    to_model_input(&gen_phantom(seed, size).unwrap()).unwrap()
}

#[test]
fn full_size_shapes() {
    let m = LangAe::new(small_cfg()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(phantom_input(1, 256));
    let e = m.encode(&mut tape, x).unwrap();
    assert_eq!(tape.shape(e.z_e), &[8, 32, 32]);
    let extents: Vec<usize> = e.scales.iter().map(|&s| tape.shape(s)[1]).collect();
    assert_eq!(extents, vec![256, 128, 64, 32, 32]);
    let y = m.decode(&mut tape, e.z_e).unwrap();
    assert_eq!(tape.shape(y), &[1, 256, 256]);
    assert!(tape.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(m.layout(256, 256).unwrap().token_counts(), vec![4, 64, 1024]);
}

#[test]
fn block_counts() {
    let m = LangAe::new(small_cfg()).unwrap();
    for part in ["enc", "dec"] {
        let names: Vec<&str> = m.store.iter().map(|(n, _)| n).filter(|n| n.starts_with(part)).collect();
        let count = |kind: &str| {
            let mut blocks: Vec<&str> = names
                .iter()
                .filter_map(|n| n.split('.').nth(1))
                .filter(|b| b.starts_with(kind))
                .collect();
            blocks.dedup();
            blocks.len()
        };
        assert_eq!(count("res"), 6, "{part}");
        assert_eq!(count("attn"), 2, "{part}");
    }
}

#[test]
fn encode_decode_are_deterministic_and_validated() {
    let m = LangAe::new(small_cfg()).unwrap();
    let x = phantom_input(2, 64);
    assert_eq!(m.encode_value(&x).unwrap(), m.encode_value(&x).unwrap());
    assert_eq!(m.reconstruct(&x).unwrap(), m.reconstruct(&x).unwrap());
    assert!(m.encode_value(&DenseTensor::zeros(&[1, 60, 64])).is_err());
    assert!(m.encode_value(&DenseTensor::zeros(&[2, 64, 64])).is_err());
    let mut tape = Tape::new();
    let z = tape.constant(DenseTensor::zeros(&[7, 8, 8]));
    assert!(m.decode(&mut tape, z).is_err());
}

#[test]
fn perceptual_loss_properties() {
    let m = LangAe::new(small_cfg()).unwrap();
    let mut r = rng(3);
    let a = DenseTensor::rand_uniform(&[1, 32, 32], 0.0, 1.0, &mut r);
    let b = DenseTensor::rand_uniform(&[1, 32, 32], 0.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let same = m.perceptual_loss(&mut tape, va, va).unwrap();
    let ab = m.perceptual_loss(&mut tape, va, vb).unwrap();
    let ba = m.perceptual_loss(&mut tape, vb, va).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);
    assert_eq!(tape.value(ab).item(), tape.value(ba).item());
    assert!(tape.value(ab).item() > 0.0);
    // the feature network never trains
    assert!(m.store.iter().filter(|(n, _)| n.starts_with("perceptual")).count() == 6);
    assert!(m.store.ids().filter(|&id| m.store.name(id).starts_with("perceptual")).all(|id| !m.store.is_trainable(id)));
}

#[test]
fn loss_algebra() {
    let w = LossWeights::default();
    // rec 0.5, commit 1, perc 2 → vqgan 0.5 + 0.3 + 0.2 = 1.0
    let r = LossReport::compose(0.5, 1.0, 0.0, 2.0, 1.0, &w);
    assert!((r.vqgan - 1.0).abs() < 1e-12);
    assert!((r.total - 1.3).abs() < 1e-12);
    let z = LossReport::compose(0.0, 0.0, gan_loss(), 0.0, 0.7, &w);
    assert_eq!((z.vqgan, z.omega, z.total), (0.0, 0.0, 0.0));
    let tiny = LossReport::compose(0.4, 0.0, 0.0, 0.0, 1e-9, &w);
    assert_eq!(tiny.omega, 0.0);
    assert_eq!(tiny.total, tiny.vqgan);
}

#[test]
fn tape_report_recomposes() {
    let m = LangAe::new(small_cfg()).unwrap();
    for seed in 0..3 {
        let y = phantom_input(seed, 64);
        let pools = m.pools_for(&y).unwrap();
        let mut tape = Tape::new();
        let lv = m.loss(&mut tape, &y, &pools).unwrap();
        let r = lv.report;
        assert!((r.recomposed_total(&m.cfg.weights) - r.total).abs() < 1e-6 * r.total.max(1.0), "{r:?}");
        assert!(r.semantic > 0.0 && r.reconstruction > 0.0 && r.commitment > 0.0);
        assert_eq!(r.gan, 0.0);
    }
}

/// ω enters as a constant: the gradient equals ∇L_VQGAN + α·ω·∇L_sem with
/// each part taken on its own tape.
#[test]
fn omega_carries_no_gradient() {
    let m = LangAe::new(small_cfg()).unwrap();
    let y = phantom_input(4, 64);
    let pools = m.pools_for(&y).unwrap();
    let grads_of = |pick: usize| {
        let mut tape = Tape::new();
        let lv = m.loss(&mut tape, &y, &pools).unwrap();
        let omega = lv.report.omega;
        let out = [lv.total, lv.vqgan, lv.semantic][pick];
        (tape.backward(out).unwrap().param_grads(), omega)
    };
    let (total, omega) = grads_of(0);
    let (vq, _) = grads_of(1);
    let (sem, _) = grads_of(2);
    assert!(omega > 0.0);
    let alpha = m.cfg.weights.alpha;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (id, g) in &total {
        let gv = vq.get(id);
        let gs = sem.get(id);
        for (i, &t) in g.iter().enumerate() {
            let want = gv.map_or(0.0, |v| v[i] as f64) + alpha * omega * gs.map_or(0.0, |v| v[i] as f64);
            num += (t as f64 - want).powi(2);
            den += want * want;
        }
    }
    assert!((num / den).sqrt() < 1e-5, "rel {}", (num / den).sqrt());
    // changing the semantic input changes ω's value
    let other = m.pools_for(&phantom_input(9, 64)).unwrap();
    let mut tape = Tape::new();
    let lv = m.loss(&mut tape, &y, &[vec![0], vec![0], vec![0]]).unwrap();
    assert_ne!(lv.report.omega, omega);
    drop(other);
}

#[test]
fn non_finite_input_aborts_with_step() {
    let cfg = LangAeTrainConfig {
        model: small_cfg(),
        steps: 3,
        batch_size: 1,
        ..LangAeTrainConfig::default()
    };
    let mut bad = phantom_input(1, 64);
    bad.data_mut()[5] = f32::NAN;
    let err = train_langae(&cfg, &[bad], |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0 }), "{err}");
}

#[test]
fn training_reduces_loss_and_checkpoint_round_trips() {
    let cfg = LangAeTrainConfig {
        model: small_cfg(),
        steps: 300,
        batch_size: 1,
        lr_max: 2e-3,
        lr_min: 1e-5,
        ..LangAeTrainConfig::default()
    };
    let images: Vec<DenseTensor> = (0..8).map(|s| phantom_input(s, 64)).collect();
    let mut log = Vec::new();
    let m = train_langae(&cfg, &images, |l| log.push(l.clone())).unwrap();
    assert!(m.is_frozen());
    assert_eq!(log[0].lr, 2e-3);
    assert!((log.last().unwrap().lr - 1e-5).abs() < 1e-15);
    let k = log.len() / 10;
    let first: f64 = log[..k].iter().map(|l| l.report.total).sum::<f64>() / k as f64;
    let last: f64 = log[log.len() - k..].iter().map(|l| l.report.total).sum::<f64>() / k as f64;
    assert!(last < first, "{first} -> {last}");

    let ck = m.to_checkpoint().unwrap();
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let back = LangAe::from_checkpoint(&crate::nn::Checkpoint::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
    assert_eq!(back.fingerprint(), m.fingerprint());
    assert_eq!(back.reconstruct(&images[0]).unwrap(), m.reconstruct(&images[0]).unwrap());
}

#[test]
fn training_is_reproducible() {
    let cfg = LangAeTrainConfig {
        model: small_cfg(),
        steps: 4,
        batch_size: 2,
        ..LangAeTrainConfig::default()
    };
    let images: Vec<DenseTensor> = (0..3).map(|s| phantom_input(s, 64)).collect();
    let a = train_langae(&cfg, &images, |_| {}).unwrap();
    let b = train_langae(&cfg, &images, |_| {}).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn feature_similarity_has_one_value_per_scale() {
    let m = LangAe::new(small_cfg()).unwrap();
    let nd = gen_phantom(5, 64).unwrap();
    let ld = simulate_low_dose(&nd, 0.25, 5, &NoiseModel::default()).unwrap();
    let s = m.feature_similarity(&to_model_input(&nd).unwrap(), &to_model_input(&ld).unwrap()).unwrap();
    assert_eq!(s.len(), 5);
    assert!(s.iter().all(|v| (-1.0..=1.0 + 1e-9).contains(v)));
    let same = m.feature_similarity(&to_model_input(&nd).unwrap(), &to_model_input(&nd).unwrap()).unwrap();
    assert!(same.iter().all(|v| (v - 1.0).abs() < 1e-9));
}

#[test]
fn token_export_matches_pyramid() {
    let m = LangAe::new(small_cfg()).unwrap();
    let x = phantom_input(6, 64);
    let e = m.export_tokens(&x, 5).unwrap();
    assert_eq!(e.grid.len(), 2);
    assert!(e.grid.iter().all(|r| r.len() == 2));
    assert_eq!(e.top.len(), 2);
    let pyr = m.quantize(&m.encode_value(&x).unwrap()).unwrap();
    assert_eq!(e.grid.concat(), pyr.layer_tokens(0, &m.codebook).iter().map(|s| s.to_string()).collect::<Vec<_>>());
    for (l, top) in e.top.iter().enumerate() {
        assert!(!top.is_empty() && top.len() <= 5);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(top.iter().map(|t| t.1).sum::<usize>() <= pyr.tokens[l + 1].len());
    }
}
