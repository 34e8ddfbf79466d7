//! Finite-difference gradient verification used by the unit tests.

use std::collections::BTreeSet;

use ndarray::ArrayD;
use rand::RngExt;

use super::init::Prng;
use super::param::Parameterized;

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn sample_indices(len: usize, n: usize, rng: &mut Prng) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut seen = BTreeSet::new();
    while seen.len() < n {
        seen.insert(rng.random_range(0..len));
    }
    seen.into_iter().collect()
}

/// Central-difference check of `analytic` against `f` at sampled
/// coordinates of `x`. Returns the worst relative error.
pub fn check_fn_grad(
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    n_coords: usize,
    rng: &mut Prng,
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut xm = x.clone();
    let grad: Vec<f64> = analytic.iter().cloned().collect();
    let mut worst = 0.0f64;
    for idx in sample_indices(xm.len(), n_coords, rng) {
        let x0 = {
            let s = xm.as_slice_memory_order_mut().unwrap();
            let v = s[idx];
            s[idx] = v + FD_H;
            v
        };
        let fp = f(&xm);
        xm.as_slice_memory_order_mut().unwrap()[idx] = x0 - FD_H;
        let fm = f(&xm);
        xm.as_slice_memory_order_mut().unwrap()[idx] = x0;
        let numeric = (fp - fm) / (2.0 * FD_H);
        worst = worst.max(rel_err(grad[idx], numeric));
    }
    worst
}

fn with_param_coord<M: Parameterized>(
    m: &mut M,
    name: &str,
    idx: usize,
    f: &mut dyn FnMut(&mut f64),
) {
    let mut found = false;
    m.visit_mut("", &mut |n, p| {
        if n == name {
            found = true;
            f(&mut p.value.as_slice_memory_order_mut().unwrap()[idx]);
        }
    });
    assert!(found, "no parameter named {name}");
}

fn param_info<M: Parameterized>(m: &M, name: &str) -> (usize, Vec<f64>) {
    let mut out = None;
    m.visit("", &mut |n, p| {
        if n == name {
            out = Some((p.value.len(), p.grad.iter().cloned().collect()));
        }
    });
    out.unwrap_or_else(|| panic!("no parameter named {name}"))
}

/// Check the accumulated gradient of one named parameter of `m` against
/// central differences of `eval` (a pure forward pass). Gradients must
/// already have been computed by a backward pass. Returns the worst
/// relative error over sampled coordinates.
pub fn check_param_grad<M: Parameterized>(
    m: &mut M,
    name: &str,
    n_coords: usize,
    rng: &mut Prng,
    eval: &mut dyn FnMut(&mut M) -> f64,
) -> f64 {
    let (len, grad) = param_info(m, name);
    let mut worst = 0.0f64;
    for idx in sample_indices(len, n_coords, rng) {
        let mut x0 = 0.0;
        with_param_coord(m, name, idx, &mut |v| {
            x0 = *v;
            *v = x0 + FD_H;
        });
        let fp = eval(m);
        with_param_coord(m, name, idx, &mut |v| *v = x0 - FD_H);
        let fm = eval(m);
        with_param_coord(m, name, idx, &mut |v| *v = x0);
        let numeric = (fp - fm) / (2.0 * FD_H);
        worst = worst.max(rel_err(grad[idx], numeric));
    }
    worst
}

/// Check every parameter of `m`, sampling `coords_per_param` coordinates
/// from each. Returns `(worst_name, worst_err)`.
pub fn check_all_params<M: Parameterized>(
    m: &mut M,
    coords_per_param: usize,
    rng: &mut Prng,
    eval: &mut dyn FnMut(&mut M) -> f64,
) -> (String, f64) {
    let mut names = Vec::new();
    m.visit("", &mut |n, _| names.push(n.to_string()));
    let mut worst = (String::new(), 0.0f64);
    for name in names {
        let e = check_param_grad(m, &name, coords_per_param, rng, eval);
        if e >= worst.1 {
            worst = (name, e);
        }
    }
    worst
}
