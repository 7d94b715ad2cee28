#![allow(dead_code)]

use vidmask_core::rng::Generator;
use vidmask_core::tensor::ParamStore;
use vidmask_core::{Array, Tape, Var};

pub mod reference;

pub fn random_array(shape: &[usize], gen: &mut Generator) -> Array<f64> {
    Array::from_fn(shape.to_vec(), |_| gen.normal())
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
///
/// Gradients that vanish identically (e.g. the key bias under softmax shift
/// invariance) leave only finite-difference round-off, so below a norm of
/// `1e-7` the absolute difference is returned instead.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of a scalar function against central finite differences
/// (step `1e-5`), returning the worst relative error over all inputs.
pub fn grad_check<F>(inputs: &[Array<f64>], f: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let tape = Tape::<f64>::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &vars);
    tape.backward(&loss).unwrap();
    let eval = |arrays: &[Array<f64>]| -> f64 {
        let t = Tape::<f64>::no_grad();
        let vs: Vec<Var<f64>> = arrays.iter().map(|a| t.constant(a.clone())).collect();
        f(&t, &vs).value().item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = v
            .grad()
            .unwrap_or_else(|| Array::zeros(inputs[i].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut work: Vec<Array<f64>> = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work);
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work);
            work[i].data_mut()[j] = x0;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Fixed random projection so that non-scalar outputs reduce to an informative scalar.
pub fn project(tape: &Tape<f64>, y: &Var<f64>, seed: u64) -> Var<f64> {
    let mut g = Generator::new(seed);
    let w = Array::from_fn(y.shape().to_vec(), |_| g.normal());
    y.mul(&tape.constant(w)).unwrap().sum()
}

/// Worst norm-wise relative error between tape gradients of every parameter in
/// `store` and central finite differences (step `1e-5`).
pub fn param_grad_check<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Var<f64>,
{
    let tape = Tape::<f64>::new();
    let loss = f(&tape, store);
    tape.backward(&loss).unwrap();
    let mut grads = store.clone();
    grads.zero_grad();
    tape.accumulate_into(&mut grads);
    let h = 1e-5;
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let n = store.value(id).len();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let x0 = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = x0 + h;
            let fp = f(&Tape::no_grad(), &work).value().item();
            work.value_mut(id).data_mut()[j] = x0 - h;
            let fm = f(&Tape::no_grad(), &work).value().item();
            work.value_mut(id).data_mut()[j] = x0;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        let err = rel_err(grads.grad(id).data(), &numeric);
        if std::env::var("GC_DEBUG").is_ok() {
            eprintln!("{} {err}", store.name(id));
        }
        assert!(err.is_finite(), "{}", store.name(id));
        worst = worst.max(err);
    }
    worst
}
