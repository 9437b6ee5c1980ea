#![allow(dead_code)]

use cfseq::diffnum::{DenseTensor, Tape, Var};
use rand::Rng;

/// Max relative error between reverse-mode gradients of `f` and central
/// finite differences with step `h`. Entries where both magnitudes fall below
/// `floor` are compared on the absolute scale `floor`.
pub fn grad_check<F>(params: &[DenseTensor], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let eval = |ps: &[DenseTensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("leaf grad").clone();
        for k in 0..params[pi].len() {
            let orig = work[pi].values()[k];
            work[pi].values_mut()[k] = orig + h;
            let up = eval(&work);
            work[pi].values_mut()[k] = orig - h;
            let down = eval(&work);
            work[pi].values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.values()[k];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DenseTensor {
    let vals = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    DenseTensor::matrix(rows, cols, vals).unwrap()
}
