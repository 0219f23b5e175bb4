#![allow(dead_code)]

pub mod cases;
pub mod codec_checks;
pub mod ted_oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabseq_core::tensor::{ParamStore, Tape, Tensor, Var};
use tabseq_core::Result;

pub const FD_STEP: f32 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Error between analytic `a` and numeric `n`, relative to their magnitude
/// with a floor of one so near-zero entries are compared absolutely.
pub fn rel_err(a: f32, n: f32) -> f64 {
    let (a, n) = (a as f64, n as f64);
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Reduce an arbitrary output to a scalar with fixed random weights, so
/// every output element contributes to the checked gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        return Ok(out);
    }
    let w = Tensor::randn(shape, 1.0, &mut rng(seed ^ 0xABCD));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Largest analytic-vs-central-difference error over every element of
/// every input.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grad: bool| -> (f32, Option<Vec<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        let loss = project(&mut tape, out, 7).expect("project");
        let l = tape.value(loss).item().unwrap();
        if !grad {
            return (l, None);
        }
        let g = tape.backward(loss).expect("backward");
        (
            l,
            Some(vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect()),
        )
    };
    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], num));
        }
    }
    worst
}

/// Same check over named parameters of a model whose loss is built by `f`.
/// At most `per_param` entries of each parameter are probed.
pub fn check_params<F>(params: &ParamStore, per_param: usize, f: F) -> f64
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, loss) = f(params).expect("forward");
    let grads = tape.backward(loss).expect("backward").param_grads();
    let value = |p: &ParamStore| {
        let (t, l) = f(p).expect("forward");
        t.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        let n = g.numel();
        let stride = (n / per_param).max(1);
        for j in (0..n).step_by(stride).take(per_param) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= FD_STEP;
            let num = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            let e = rel_err(g.data()[j], num);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}
