use super::*;
use crate::data::{gen_phantom, PhantomPair};
use crate::langae::LangAeConfig;
use crate::testutil::{grad_check, rng};

fn small_langae() -> Arc<LangAe> {
    let mut m = LangAe::new(LangAeConfig {
        channels: [4, 8, 8, 8],
        vocab: 256,
        embed_dim: 8,
        ..LangAeConfig::default()
    })
    .unwrap();
    m.freeze();
    Arc::new(m)
}

fn block_store(f: impl FnOnce(&mut Init<'_>) -> EmaBlock) -> (ParamStore, EmaBlock) {
    let mut store = ParamStore::new();
    let mut r = init_rng(3);
    let b = f(&mut Init::new(&mut store, &mut r, ""));
    (store, b)
}

fn cfg4() -> EmaBlockConfig {
    EmaBlockConfig {
        state: 4,
        reduction: 2,
        ..EmaBlockConfig::default()
    }
}

#[test]
fn csa_shape_gates_and_bias_probe() {
    let mut store = ParamStore::new();
    let mut r = init_rng(1);
    let csa = Csa::new(&mut Init::new(&mut store, &mut r, ""), "csa", 8, 8);
    let x = DenseTensor::randn(&[8, 12, 10], 1.0, &mut rng(2));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let o = csa.forward_gates(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.shape(o.out), &[8, 12, 10]);
    for g in [o.channel_gate, o.spatial_gate] {
        assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    for id in [csa.w1, csa.w2, csa.spatial.weight] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = DenseTensor::zeros(&shape);
    }
    *store.get_mut(csa.b2) = DenseTensor::full(&[8, 1], 40.0);
    *store.get_mut(csa.spatial.bias.unwrap()) = DenseTensor::full(&[1], 40.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = csa.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn essm_shape_zero_input_and_gradient() {
    let mut store = ParamStore::new();
    let mut r = init_rng(4);
    let essm = Essm::new(&mut Init::new(&mut store, &mut r, ""), "essm", 4, &cfg4());
    let mut tape = Tape::new();
    let x = tape.constant(DenseTensor::randn(&[4, 6, 10], 1.0, &mut rng(5)));
    let y = essm.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.shape(y), &[4, 6, 10]);
    let z = tape.constant(DenseTensor::zeros(&[4, 8, 8]));
    let y = essm.forward(&mut tape, &store, z).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = DenseTensor::randn(&[4, 8, 8], 1.0, &mut rng(6));
    let err = grad_check(&[x], |t, v| essm.forward(t, &store, v[0]), 1e-2, 40, 7);
    assert!(err < 1e-3, "essm rel err {err}");
}

#[test]
fn ema_block_shape_identity_probe_and_essm_matters() {
    let (mut store, b) = block_store(|i| EmaBlock::new(i, "b", 8, &cfg4()));
    let x = DenseTensor::randn(&[8, 16, 16], 1.0, &mut rng(8));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = b.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.shape(y), &[8, 16, 16]);
    let without = b.forward_parts(&mut tape, &store, xv, false).unwrap();
    let diff: f32 = tape.value(y).data().iter().zip(tape.value(without).data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3, "ESSM branch has no effect");

    let err = grad_check(&[x.clone()], |t, v| b.forward(t, &store, v[0]), 1e-2, 40, 9);
    assert!(err < 1e-3, "ema rel err {err}");

    // Zero ESSM output projection and FFN, and shut the spatial gate.
    zero_params(&mut store, "b.essm.out");
    zero_params(&mut store, "b.ffn");
    *store.get_mut(b.csa.spatial.bias.unwrap()) = DenseTensor::full(&[1], -1e3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = b.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn identity_at_init_and_frozen_encoder() {
    let ae = small_langae();
    let m = Seed::new(SeedConfig::default(), ae.clone()).unwrap();
    let x = to_model_input(&gen_phantom(1, 64).unwrap()).unwrap();
    assert_eq!(m.predict(&x).unwrap(), x);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = m.forward(&mut tape, xv).unwrap();
    let s = tape.sum_sq(y).unwrap();
    let g = tape.backward(s).unwrap();
    // Only the denoiser's own parameters appear; the encoder never does.
    let grads = g.param_grads();
    assert!(grads.keys().all(|&id| m.store.is_trainable(id)));
    assert!(ae.store.num_trainable() == 0);

    let unfrozen = LangAe::new(ae.cfg.clone()).unwrap();
    assert!(Seed::new(SeedConfig::default(), Arc::new(unfrozen)).is_err());
}

#[test]
fn ablation_arms_build_and_preserve_shape() {
    let ae = small_langae();
    let x = to_model_input(&gen_phantom(2, 64).unwrap()).unwrap();
    for ab in ["none", "no-ema", "resnet-encoder", "no-langda", "langda-c", "langda-d"] {
        let cfg = SeedConfig {
            ablation: ab.parse().unwrap(),
            ..SeedConfig::default()
        };
        let m = Seed::new(cfg, ae.clone()).unwrap();
        assert_eq!(m.predict(&x).unwrap().shape(), &[1, 64, 64], "{ab}");
    }
    assert!("bogus".parse::<Ablation>().is_err());
    let w = |ab| {
        SeedConfig {
            ablation: ab,
            ..SeedConfig::default()
        }
        .langda_weights()
    };
    assert_eq!(w(Ablation::None), (0.3, 0.3));
    assert_eq!(w(Ablation::NoLangda), (0.0, 0.0));
    assert_eq!(w(Ablation::LangdaC), (0.3, 0.0));
    assert_eq!(w(Ablation::LangdaD), (0.0, 0.3));
}

#[test]
fn langda_zero_at_target_and_nonnegative() {
    let ae = small_langae();
    let y = to_model_input(&gen_phantom(3, 64).unwrap()).unwrap();
    let target = LangdaTarget::new(&ae, &y).unwrap();
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let l = langda_loss(&mut tape, &ae, yv, &target).unwrap();
    assert_eq!(tape.value(l.continuous).item(), 0.0);
    assert_eq!(tape.value(l.discrete).item(), 0.0);

    let mut r = rng(10);
    for _ in 0..4 {
        let mut other = y.clone();
        let noise = DenseTensor::randn(&[1, 64, 64], 0.05, &mut r);
        other.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a = (*a + b).clamp(0.0, 1.0));
        let mut tape = Tape::new();
        let v = tape.constant(other);
        let l = langda_loss(&mut tape, &ae, v, &target).unwrap();
        assert!(tape.value(l.continuous).item() > 0.0);
        assert!(tape.value(l.discrete).item() >= 0.0);
    }

    let hot = LangAe::new(ae.cfg.clone()).unwrap();
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    assert!(langda_loss(&mut tape, &hot, yv, &target).is_err());
}

#[test]
fn langda_gradients() {
    let ae = small_langae();
    let y = to_model_input(&gen_phantom(4, 64).unwrap()).unwrap();
    let target = LangdaTarget::new(&ae, &y).unwrap();
    let y_hat = to_model_input(&gen_phantom(5, 64).unwrap()).unwrap();
    let err = grad_check(
        &[y_hat.clone()],
        |t, v| Ok(langda_loss(t, &ae, v[0], &target)?.continuous),
        1e-2,
        24,
        11,
    );
    assert!(err < 1e-3, "continuous rel err {err}");

    // Discrete term: the quantizer passes the cotangent through unchanged, so
    // the gradient equals that of Σ z_e·c with c = 2(ẑ_q − z_q)/n held fixed.
    let mut tape = Tape::new();
    let v = tape.leaf(y_hat.clone(), true);
    let l = langda_loss(&mut tape, &ae, v, &target).unwrap();
    let g = tape.backward(l.discrete).unwrap().get(v).unwrap().clone();

    let z_e = ae.encode_value(&y_hat).unwrap();
    let zq_hat = ae.quantize(&z_e).unwrap().z_q;
    let n = z_e.numel() as f32;
    let c: Vec<f32> = zq_hat.data().iter().zip(target.z_q.data()).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let mut tape = Tape::new();
    let v = tape.leaf(y_hat, true);
    let enc = ae.encode(&mut tape, v).unwrap();
    let s = tape.weighted_sum(enc.z_e, &c).unwrap();
    let expected = tape.backward(s).unwrap().get(v).unwrap().clone();
    let scale = expected.data().iter().map(|v| v.abs()).fold(0.0f32, f32::max);
    assert!(scale > 0.0);
    for (a, b) in g.data().iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
    }
}

fn tiny_pairs(n: u64, offset: u64) -> Vec<PhantomPair> {
    (0..n)
        .map(|i| PhantomPair::generate(offset + i, 64, 0.25, &crate::data::NoiseModel::default()).unwrap())
        .collect()
}

fn tiny_train_cfg(ablation: Ablation) -> DenoiserTrainConfig {
    DenoiserTrainConfig {
        model: SeedConfig {
            ablation,
            block: cfg4(),
            ..SeedConfig::default()
        },
        steps: 6,
        lr_max: 1e-3,
        lr_min: 1e-5,
        eval_every: 3,
        ..DenoiserTrainConfig::default()
    }
}

#[test]
fn training_freezes_encoder_and_reloads_bit_identically() {
    let ae = small_langae();
    let before = ae.fingerprint();
    let (train, test) = (tiny_pairs(3, 0), tiny_pairs(2, 100));
    let mut logs = Vec::new();
    let mut evals = Vec::new();
    let m = train_denoiser(
        &tiny_train_cfg(Ablation::None),
        ae.clone(),
        &train,
        &test,
        |l| logs.push(l.clone()),
        |e| evals.push(e.clone()),
    )
    .unwrap();
    assert_eq!(ae.fingerprint(), before);
    assert_eq!(logs.len(), 6);
    assert!(logs.iter().all(|l| l.langda_continuous > 0.0 && l.total >= l.mse));
    assert_eq!(evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![3, 6]);

    let mut buf = Vec::new();
    m.to_checkpoint().unwrap().write_to(&mut buf).unwrap();
    let back = Seed::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ae.clone()).unwrap();
    let a = crate::metrics::evaluate_abdominal(&m, &test).unwrap();
    let b = crate::metrics::evaluate_abdominal(&back, &test).unwrap();
    assert_eq!(a.json_lines(), b.json_lines());
    assert_eq!(evals.last().unwrap().psnr, a.psnr().0);

    // Same config and seed give the same model.
    let again = train_denoiser(&tiny_train_cfg(Ablation::None), ae, &train, &test, |_| {}, |_| {}).unwrap();
    assert_eq!(again.store.fingerprint(""), m.store.fingerprint(""));
}

#[test]
fn lambda_zero_is_pure_mse() {
    let ae = small_langae();
    let train = tiny_pairs(2, 0);
    let mut logs = Vec::new();
    let mut cfg = tiny_train_cfg(Ablation::None);
    cfg.model.lambda = 0.0;
    train_denoiser(&cfg, ae, &train, &[], |l| logs.push(l.clone()), |_| {}).unwrap();
    assert!(logs.iter().all(|l| l.total == l.mse && l.langda_continuous == 0.0));
}

#[test]
fn training_rejects_bad_input() {
    let ae = small_langae();
    let cfg = tiny_train_cfg(Ablation::None);
    assert!(train_denoiser(&cfg, ae.clone(), &[], &[], |_| {}, |_| {}).is_err());
    let mut zero = cfg.clone();
    zero.steps = 0;
    assert!(matches!(
        train_denoiser(&zero, ae.clone(), &tiny_pairs(1, 0), &[], |_| {}, |_| {}),
        Err(Error::Config(_))
    ));
    let mut nan = cfg;
    nan.lr_max = f64::NAN;
    assert!(matches!(
        train_denoiser(&nan, ae, &tiny_pairs(1, 0), &[], |_| {}, |_| {}),
        Err(Error::NonFiniteLoss { .. })
    ));
}
