use super::*;

fn uniform(hu: f32, n: usize) -> DenseTensor {
    DenseTensor::full(&[n, n], hu)
}

fn residual_var(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let r: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y) as f64).collect();
    let m = r.iter().sum::<f64>() / r.len() as f64;
    r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64
}

#[test]
fn phantom_is_deterministic_and_bounded() {
    let a = gen_phantom(7, 128).unwrap();
    assert_eq!(a.to_bytes(), gen_phantom(7, 128).unwrap().to_bytes());
    assert_ne!(a, gen_phantom(8, 128).unwrap());
    assert!(a.data().iter().all(|v| (HU_MIN..=HU_MAX).contains(v)));
    assert!(gen_phantom(1, 32).is_err());
    assert!(gen_phantom(1, 513).is_err());
}

#[test]
fn background_is_exactly_air() {
    for seed in 0..5 {
        let n = 96;
        let g = gen_phantom(seed, n).unwrap();
        let body = &phantom_anatomy(seed)[0];
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((j as f64 + 0.5) / n as f64 * 2.0 - 1.0, (i as f64 + 0.5) / n as f64 * 2.0 - 1.0);
                if !body.contains(x, y) {
                    assert_eq!(g.data()[i * n + j], -1000.0);
                }
            }
        }
        // corners are always outside the body
        assert_eq!(g.data()[0], -1000.0);
    }
}

/// Local maxima of a 20 HU histogram holding at least 0.5% of the pixels.
fn count_modes(g: &DenseTensor) -> usize {
    let (lo, width, bins) = (-1100.0f32, 20.0f32, 80usize);
    let mut hist = vec![0usize; bins];
    for &v in g.data() {
        let k = ((v - lo) / width).floor();
        if k >= 0.0 && (k as usize) < bins {
            hist[k as usize] += 1;
        }
    }
    let min = g.numel() / 200;
    (0..bins)
        .filter(|&k| {
            let left = if k == 0 { 0 } else { hist[k - 1] };
            let right = if k + 1 == bins { 0 } else { hist[k + 1] };
            hist[k] >= min && hist[k] > left && hist[k] >= right
        })
        .count()
}

#[test]
fn histogram_has_several_modes() {
    for seed in 0..8 {
        let g = gen_phantom(seed, 256).unwrap();
        let m = count_modes(&g);
        assert!(m >= 3, "seed {seed}: {m} modes");
    }
}

#[test]
fn anatomy_counts_and_ranges() {
    for seed in 0..50 {
        let a = phantom_anatomy(seed);
        let count = |t: Tissue| a.iter().filter(|s| s.tissue == t).count();
        assert!((2..=6).contains(&count(Tissue::Organ)));
        assert!((1..=3).contains(&count(Tissue::Lesion)));
        assert!(count(Tissue::Bone) >= 7);
        for s in &a {
            match s.tissue {
                Tissue::Organ => assert!((20.0..=90.0).contains(&s.hu)),
                Tissue::Bone => assert!((280.0..=320.0).contains(&s.hu)),
                Tissue::SoftTissue => assert_eq!(s.hu, 40.0),
                _ => {}
            }
        }
        let organs: Vec<f32> = a.iter().filter(|s| s.tissue == Tissue::Organ).map(|s| s.hu).collect();
        for l in a.iter().filter(|s| s.tissue == Tissue::Lesion) {
            assert!(organs.iter().any(|o| (10.0..=15.0).contains(&(l.hu - o).abs())));
        }
    }
}

#[test]
fn full_dose_without_electronic_noise_is_near_clean() {
    let g = uniform(40.0, 100);
    let ld = simulate_low_dose(&g, 1.0, 3, &NoiseModel::quantum_only()).unwrap();
    let v = residual_var(&ld, &g);
    assert!(v < 1.0, "variance {v}");
    assert!(v > 0.0);
}

#[test]
fn quarter_dose_doubles_the_noise_std() {
    let g = uniform(40.0, 100);
    let noise = NoiseModel::default();
    let s1 = residual_var(&simulate_low_dose(&g, 1.0, 11, &noise).unwrap(), &g).sqrt();
    let s4 = residual_var(&simulate_low_dose(&g, 0.25, 12, &noise).unwrap(), &g).sqrt();
    let ratio = s4 / s1;
    assert!((ratio - 2.0).abs() <= 0.3, "ratio {ratio}");
}

/// Smoothing a white field of variance σ² leaves σ²·Σk² = σ²·72/256.
#[test]
fn smoothed_variance_matches_kernel_energy() {
    let g = uniform(0.0, 200);
    let noise = NoiseModel {
        quantum_var: 0.0,
        attenuation_scale: 0.0,
        electronic_std: 10.0,
    };
    let v = residual_var(&simulate_low_dose(&g, 1.0, 5, &noise).unwrap(), &g);
    let want = 100.0 * 72.0 / 256.0;
    assert!((v - want).abs() < 0.05 * want, "{v} vs {want}");
}

#[test]
fn noise_is_seeded_and_validated() {
    let g = gen_phantom(2, 64).unwrap();
    let n = NoiseModel::default();
    let a = simulate_low_dose(&g, 0.25, 9, &n).unwrap();
    assert_eq!(a, simulate_low_dose(&g, 0.25, 9, &n).unwrap());
    assert_ne!(a, simulate_low_dose(&g, 0.25, 10, &n).unwrap());
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        assert!(simulate_low_dose(&g, bad, 9, &n).is_err());
    }
    assert!(a.data().iter().all(|v| (HU_MIN..=HU_MAX).contains(v)));
}

#[test]
fn residual_variance_falls_with_dose() {
    let g = gen_phantom(4, 128).unwrap();
    let n = NoiseModel::default();
    let vars: Vec<f64> = [0.1, 0.25, 0.5, 1.0]
        .iter()
        .map(|&d| residual_var(&simulate_low_dose(&g, d, 21, &n).unwrap(), &g))
        .collect();
    assert!(vars.windows(2).all(|w| w[0] > w[1]), "{vars:?}");
}

#[test]
fn window_examples() {
    let g = DenseTensor::new(&[1, 5], vec![-160.0, 240.0, 40.0, -1000.0, 900.0]).unwrap();
    let x = hu_window(&g, -160.0, 240.0).unwrap();
    assert_eq!(x.data(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
    assert!(hu_window(&g, 10.0, 10.0).is_err());
    assert!(hu_window(&g, 20.0, 10.0).is_err());
    let back = unwindow(&hu_window(&g, -1000.0, 2000.0).unwrap(), -1000.0, 2000.0);
    assert!(back.max_abs_diff(&g) < 1e-3);
}

#[test]
fn model_io_round_trip() {
    let g = gen_phantom(3, 64).unwrap();
    let x = to_model_input(&g).unwrap();
    assert_eq!(x.shape(), &[1, 64, 64]);
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let back = from_model_output(&x).unwrap();
    assert_eq!(back.shape(), &[64, 64]);
    // only values below −1000 HU are clipped
    assert!(back.max_abs_diff(&g) < 1e-3);
}

#[test]
fn pair_file_layout_and_round_trip() {
    let p = PhantomPair::generate(5, 64, 0.25, &NoiseModel::default()).unwrap();
    let mut bytes = Vec::new();
    p.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"LMPD");
    assert_eq!(bytes.len(), 4 + 8 + 2 * 64 * 64 * 4 + 8 + 8);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 64);
    let tail = &bytes[bytes.len() - 16..];
    assert_eq!(f64::from_le_bytes(tail[..8].try_into().unwrap()), 0.25);
    assert_eq!(u64::from_le_bytes(tail[8..].try_into().unwrap()), 5);
    assert_eq!(PhantomPair::read_from(&mut bytes.as_slice()).unwrap(), p);
    assert!(PhantomPair::read_from(&mut &bytes[..100]).is_err());
}

#[test]
fn dataset_is_regenerable() {
    let cfg = DatasetConfig {
        train_count: 3,
        test_count: 2,
        size: 64,
        ..DatasetConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_dataset(&cfg, 17, dir.path(), true).unwrap(), (3, 2));
    let train = load_dir(&dir.path().join("train")).unwrap();
    assert_eq!(train, generate_split(&cfg, 17, false).unwrap());
    let test = load_dir(&dir.path().join("test")).unwrap();
    assert!(test.iter().all(|t| train.iter().all(|p| p.seed != t.seed)));
    assert!(dir.path().join("test/pair_00001_ldct.png").exists());
    let img = image::open(dir.path().join("train/pair_00000_ndct.png")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    assert!(load_dir(dir.path()).is_err());
}
