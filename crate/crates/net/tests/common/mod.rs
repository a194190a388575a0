#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// Compares the analytic gradient of `f` at `x` with central differences on a
/// sample of entries. Entries whose two one-sided slopes disagree sit on a kink
/// and are skipped. Returns the number of entries compared.
pub fn check_gradient(x: &Var, f: impl Fn(&Tensor) -> Tensor, samples: usize, rel_tol: f64) -> usize {
    let base = x.as_tensor().copy().unwrap();
    let analytic = {
        let y = f(x.as_tensor());
        let grads = y.backward().unwrap();
        values(grads.get(x).expect("no gradient reaches x"))
    };
    let flat = values(&base);
    let n = flat.len();
    let eval = |i: usize, delta: f64| {
        let mut v = flat.clone();
        v[i] += delta;
        x.set(
            &Tensor::from_vec(v, base.shape(), &Device::Cpu)
                .unwrap()
                .to_dtype(base.dtype())
                .unwrap(),
        )
        .unwrap();
        scalar(&f(x.as_tensor()))
    };
    let h = 1e-6;
    let mut compared = 0;
    for s in 0..samples.min(n) {
        let i = (s * 7919) % n;
        let (yp, y0, ym) = (eval(i, h), eval(i, 0.0), eval(i, -h));
        let (fwd, bwd) = ((yp - y0) / h, (y0 - ym) / h);
        if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()).max(1e-4) {
            continue;
        }
        let numeric = (yp - ym) / (2.0 * h);
        let err = (numeric - analytic[i]).abs();
        let scale = numeric.abs().max(analytic[i].abs()).max(1e-4);
        assert!(
            err / scale < rel_tol,
            "entry {i}: numeric {numeric} analytic {}",
            analytic[i]
        );
        compared += 1;
    }
    x.set(&base).unwrap();
    compared
}
