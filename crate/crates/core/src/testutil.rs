//! Finite-difference gradient oracle for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{DenseTensor, Tape, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Compares tape gradients of `Σ wᵢ yᵢ` (random fixed weights, `y = f(inputs)`)
/// against central differences evaluated in f64 on the f32 forward outputs.
/// Returns the worst norm-wise relative error over all inputs, using up to
/// `max_coords` sampled coordinates per input.
pub fn grad_check(
    inputs: &[DenseTensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    step: f32,
    max_coords: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let forward = |vals: &[DenseTensor]| -> DenseTensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let y = f(&mut tape, &vars).expect("forward");
        tape.value(y).clone()
    };
    let y0 = forward(inputs);
    let weights: Vec<f32> = (0..y0.numel()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let objective = |y: &DenseTensor| -> f64 {
        y.data().iter().zip(&weights).map(|(a, b)| *a as f64 * *b as f64).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let y = f(&mut tape, &vars).expect("forward");
    let loss = tape.weighted_sum(y, &weights).expect("loss");
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let coords: Vec<usize> = if input.numel() <= max_coords {
            (0..input.numel()).collect()
        } else {
            (0..max_coords).map(|_| r.gen_range(0..input.numel())).collect()
        };
        let (mut diff2, mut fd2, mut an2) = (0.0f64, 0.0f64, 0.0f64);
        for &c in &coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= step;
            let fd = (objective(&forward(&plus)) - objective(&forward(&minus))) / (2.0 * step as f64);
            let an = analytic[c] as f64;
            diff2 += (fd - an).powi(2);
            fd2 += fd * fd;
            an2 += an * an;
        }
        let denom = fd2.sqrt().max(an2.sqrt()).max(1e-8);
        worst = worst.max(diff2.sqrt() / denom);
    }
    worst
}
