use proptest::prelude::*;

use super::*;
use crate::nn::{init_rng, Init, ParamStore};
use crate::testutil::{grad_check, rng};

fn layer(channels: usize, state: usize, seed: u64) -> (ParamStore, Ss2d) {
    let mut store = ParamStore::new();
    let mut g = init_rng(seed);
    let l = Ss2d::new(&mut Init::new(&mut store, &mut g, ""), "s", channels, state);
    // widen Δ so the recurrence carries information across many steps
    for k in 0..4 {
        let id = store.id_of(&format!("s.dir{k}.dt.bias")).unwrap();
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 2.0);
    }
    (store, l)
}

fn run(store: &ParamStore, l: &Ss2d, x: &DenseTensor, step: usize) -> DenseTensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = l.es2d(&mut tape, store, xv, step).unwrap();
    tape.value(y).clone()
}

/// Straight f64 recurrence over an explicitly flattened sequence.
fn naive_direction(store: &ParamStore, k: usize, seq: &DenseTensor) -> Vec<f64> {
    let get = |n: &str| store.get(store.id_of(&format!("s.dir{k}.{n}")).unwrap()).data().to_vec();
    let (wdt, bdt, wb, bb, wc, bc) = (
        get("dt.weight"),
        get("dt.bias"),
        get("b.weight"),
        get("b.bias"),
        get("c.weight"),
        get("c.bias"),
    );
    let (a_log, dskip) = (get("a_log"), get("d"));
    let (ch, len) = (seq.shape()[0], seq.shape()[1]);
    let n = a_log.len() / ch;
    let x = |c: usize, t: usize| seq.data()[c * len + t] as f64;
    let proj = |w: &[f32], b: &[f32], row: usize, t: usize| -> f64 {
        b[row] as f64 + (0..ch).map(|c| w[row * ch + c] as f64 * x(c, t)).sum::<f64>()
    };
    let mut h = vec![0.0f64; ch * n];
    let mut out = vec![0.0f64; ch * len];
    for t in 0..len {
        let bt: Vec<f64> = (0..n).map(|i| proj(&wb, &bb, i, t)).collect();
        let ct: Vec<f64> = (0..n).map(|i| proj(&wc, &bc, i, t)).collect();
        for d in 0..ch {
            let raw = proj(&wdt, &bdt, d, t);
            let delta = raw.exp().ln_1p();
            let mut y = dskip[d] as f64 * x(d, t);
            for i in 0..n {
                let a = -(a_log[d * n + i] as f64).exp();
                let hv = &mut h[d * n + i];
                *hv = (delta * a).exp() * *hv + ((delta * a).exp() - 1.0) / a * bt[i] * x(d, t);
                y += ct[i] * *hv;
            }
            out[d * len + t] = y;
        }
    }
    out
}

fn naive_ss2d(store: &ParamStore, x: &DenseTensor) -> DenseTensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut total = vec![0.0f64; x.numel()];
    for (k, &dir) in ScanDirection::ALL.iter().enumerate() {
        let seq = flatten_direction(x, dir).unwrap();
        let y = naive_direction(store, k, &seq);
        let y = DenseTensor::new(seq.shape(), y.iter().map(|&v| v as f32).collect()).unwrap();
        let back = unflatten_direction(&y, h, w, dir).unwrap();
        total.iter_mut().zip(back.data()).for_each(|(t, v)| *t += *v as f64);
    }
    DenseTensor::new(x.shape(), total.iter().map(|&v| v as f32).collect()).unwrap()
}

fn sub_grid(x: &DenseTensor, s: usize, r: usize, c: usize) -> DenseTensor {
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (sh, sw) = (h / s, w / s);
    DenseTensor::from_fn(&[ch, sh, sw], |i| {
        let (k, rem) = (i / (sh * sw), i % (sh * sw));
        let (a, b) = (rem / sw, rem % sw);
        x.data()[k * h * w + (a * s + r) * w + b * s + c]
    })
}

#[test]
fn two_by_two_orders() {
    let x = DenseTensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let f = flatten_direction(&x, ScanDirection::RowForward).unwrap();
    assert_eq!(f.data(), &[0.0, 1.0, 2.0, 3.0]);
    let b = flatten_direction(&x, ScanDirection::RowReverse).unwrap();
    assert_eq!(b.data(), &[3.0, 2.0, 1.0, 0.0]);
    assert_eq!(direction_order(2, 2, ScanDirection::ColForward), vec![0, 2, 1, 3]);
    assert_eq!(direction_order(2, 2, ScanDirection::ColReverse), vec![3, 1, 2, 0]);
}

#[test]
fn every_direction_is_a_permutation() {
    for dir in ScanDirection::ALL {
        let mut o = direction_order(3, 4, dir);
        o.sort_unstable();
        assert_eq!(o, (0..12).collect::<Vec<u32>>());
    }
}

#[test]
fn flatten_round_trips_on_all_small_grids() {
    let mut r = rng(1);
    for h in 1..=16 {
        for w in 1..=16 {
            let x = DenseTensor::randn(&[2, h, w], 1.0, &mut r);
            for dir in ScanDirection::ALL {
                let back = unflatten_direction(&flatten_direction(&x, dir).unwrap(), h, w, dir).unwrap();
                assert_eq!(back, x);
            }
        }
    }
}

#[test]
fn partitions_are_disjoint_and_complete() {
    for s in 1..=3 {
        for (h, w) in [(6, 6), (7, 5), (9, 12), (1, 4)] {
            let part = SubGridPartition::new(h, w, s).unwrap();
            let mut all: Vec<u32> = Vec::new();
            for r in 0..s.min(h) {
                for c in 0..s.min(w) {
                    let cells = part.cells(r, c);
                    assert_eq!(cells.len(), part.dims(r, c).0 * part.dims(r, c).1);
                    all.extend(cells);
                }
            }
            all.sort_unstable();
            assert_eq!(all, (0..(h * w) as u32).collect::<Vec<_>>());
            if h % s == 0 && w % s == 0 {
                assert_eq!(part.cells(0, 0).len(), h * w / (s * s));
            }
        }
    }
    assert!(SubGridPartition::new(4, 4, 0).is_err());
}

#[test]
fn skip_plan_touches_every_position_once() {
    for dir in ScanDirection::ALL {
        let plan = build_plan(8, 8, dir, 2).unwrap();
        assert_eq!(plan.num_sequences(), 4);
        let mut all: Vec<u32> = plan.sequences().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<u32>>());
        assert!(plan.sequences().all(|s| s.len() == 16));
    }
}

#[test]
fn token_counts() {
    assert_eq!(token_accounting(8, 8, 2).unwrap().seq_len, 16);
    assert_eq!(token_accounting(8, 8, 1).unwrap().seq_len, 64);
    assert_eq!(token_accounting(12, 12, 3).unwrap().seq_len, 16);
    assert_eq!(token_accounting(8, 8, 2).unwrap().steps, 4 * 64);
    assert!(token_accounting(8, 8, 0).is_err());
}

#[test]
fn counters_report_sequence_length() {
    let (store, l) = layer(2, 3, 2);
    let x = DenseTensor::randn(&[2, 4, 4], 1.0, &mut rng(2));
    reset_counters();
    run(&store, &l, &x, 2);
    let c = counters();
    assert_eq!(c.scans, 4);
    assert_eq!(c.max_seq_len, 4);
    assert_eq!(c.sequences, 16);
    assert_eq!(c.steps, 64);
    reset_counters();
    run(&store, &l, &x, 1);
    assert_eq!(counters().max_seq_len, 16);
}

#[test]
fn zero_input_gives_zero_output() {
    let (mut store, l) = layer(3, 4, 3);
    for k in 0..4 {
        for p in ["b.bias", "c.bias"] {
            let id = store.id_of(&format!("s.dir{k}.{p}")).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.3);
        }
    }
    let y = run(&store, &l, &DenseTensor::zeros(&[3, 5, 6]), 1);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_pixel_is_four_single_steps() {
    let (mut store, l) = layer(1, 4, 4);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("s.dir0.")).collect();
    for n in &names {
        let v = store.get(store.id_of(n).unwrap()).clone();
        for k in 1..4 {
            let id = store.id_of(&n.replace("dir0", &format!("dir{k}"))).unwrap();
            *store.get_mut(id) = v.clone();
        }
    }
    let x = DenseTensor::new(&[1, 1, 1], vec![0.8]).unwrap();
    let y = run(&store, &l, &x, 1).item();
    let one = naive_direction(&store, 0, &DenseTensor::new(&[1, 1], vec![0.8]).unwrap())[0];
    assert!((y as f64 - 4.0 * one).abs() < 1e-6, "{y} vs {}", 4.0 * one);
}

#[test]
fn ss2d_matches_per_direction_oracle() {
    let (store, l) = layer(2, 4, 5);
    let x = DenseTensor::randn(&[2, 4, 4], 1.0, &mut rng(5));
    let got = run(&store, &l, &x, 1);
    let want = naive_ss2d(&store, &x);
    assert!(got.max_abs_diff(&want) < 1e-5, "{}", got.max_abs_diff(&want));
}

#[test]
fn es2d_scans_each_sub_grid_independently() {
    let (store, l) = layer(2, 3, 6);
    let x = DenseTensor::randn(&[2, 6, 6], 1.0, &mut rng(6));
    let got = run(&store, &l, &x, 2);
    for r in 0..2 {
        for c in 0..2 {
            let want = naive_ss2d(&store, &sub_grid(&x, 2, r, c));
            let part = sub_grid(&got, 2, r, c);
            assert!(part.max_abs_diff(&want) < 1e-5);
        }
    }
}

#[test]
fn unit_step_is_bit_identical_to_full_scan() {
    let (store, l) = layer(3, 4, 7);
    let x = DenseTensor::randn(&[3, 7, 5], 1.0, &mut rng(7));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let a = l.ss2d(&mut tape, &store, xv).unwrap();
    let b = l.es2d(&mut tape, &store, xv, 1).unwrap();
    assert_eq!(tape.value(a).to_bytes(), tape.value(b).to_bytes());
}

#[test]
fn non_divisible_extents_are_padded_then_cropped() {
    let (store, l) = layer(2, 3, 8);
    let x = DenseTensor::randn(&[2, 5, 7], 1.0, &mut rng(8));
    let got = run(&store, &l, &x, 2);
    assert_eq!(got.shape(), &[2, 5, 7]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let padded = tape.pad_replicate(xv, 6, 8).unwrap();
    let padded = tape.value(padded).clone();
    let full = run(&store, &l, &padded, 2);
    for c in 0..2 {
        for i in 0..5 {
            for j in 0..7 {
                assert_eq!(got.data()[c * 35 + i * 7 + j], full.data()[c * 48 + i * 8 + j]);
            }
        }
    }
    assert!(l.es2d(&mut tape, &store, xv, 0).is_err());
}

fn transpose_map(x: &DenseTensor) -> DenseTensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    DenseTensor::from_fn(&[c, w, h], |i| {
        let (k, rem) = (i / (h * w), i % (h * w));
        let (a, b) = (rem / h, rem % h);
        x.data()[k * h * w + b * w + a]
    })
}

#[test]
fn transposed_input_with_transposed_directions() {
    let (store, l) = layer(2, 3, 9);
    let x = DenseTensor::randn(&[2, 5, 3], 1.0, &mut rng(9));
    let y = run(&store, &l, &x, 1);
    let mut lt = l.clone();
    lt.directions = l.directions.map(ScanDirection::transposed);
    let yt = run(&store, &lt, &transpose_map(&x), 1);
    assert!(yt.max_abs_diff(&transpose_map(&y)) < 1e-5);
}

#[test]
fn skip_scan_input_gradient() {
    let (store, l) = layer(2, 3, 10);
    let x = DenseTensor::randn(&[2, 4, 6], 1.0, &mut rng(10));
    let err = grad_check(&[x], |tp, v| l.es2d(tp, &store, v[0], 2), 1e-3, 48, 11);
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn bench_rows_and_slope() {
    let rows = bench_scan(&[64, 256], 2, 2, 2, 1, 0).unwrap();
    assert_eq!(BenchRow::HEADER, "N,s,direction_count,seq_len,wall_ns,steps");
    assert_eq!(rows[0].seq_len, 16);
    assert_eq!(rows[1].seq_len, 64);
    assert_eq!(rows[0].direction_count, 4);
    assert_eq!(rows[1].steps, 4 * 256);
    assert_eq!(rows[0].csv().split(',').count(), 6);
    assert!(bench_scan(&[60], 2, 2, 2, 1, 0).is_err());
    let synthetic: Vec<BenchRow> = [100usize, 1000, 10000]
        .iter()
        .map(|&n| BenchRow {
            n,
            step: 1,
            direction_count: 4,
            seq_len: n,
            wall_ns: (n * 7) as u128,
            steps: n,
        })
        .collect();
    assert!((log_log_slope(&synthetic) - 1.0).abs() < 1e-3);
}

proptest! {
    #[test]
    fn accounting_divides_by_step_squared(k in 1usize..12, s in 1usize..5) {
        let side = k * s;
        let t = token_accounting(side, side, s).unwrap();
        prop_assert_eq!(t.seq_len * s * s, side * side);
    }
}
