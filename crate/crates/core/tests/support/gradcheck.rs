//! Central finite-difference checks of the analytic loss gradients.
#![allow(dead_code)]

use hdtree_core::diffusion::{ddp_loss_fixed, make_schedule, DiffusionDecoder, ScheduleSpec};
use hdtree_core::htc::{hql_loss, nearest_row, quantize_batch, CodePath, TreeCodebook};
use hdtree_core::linalg::sq_dist;
use hdtree_core::nn::Activation;
use hdtree_core::rng::{fill_normal, stream, Domain};
use hdtree_core::scl::{scl_loss, KernelConfig, PositiveWeight};
use hdtree_core::Matrix;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

pub fn random(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    fill_normal(&mut stream(seed, Domain::Eval, 0), m.as_mut_slice());
    m.scale(scale);
    m
}

/// Worst relative error between central differences of `f` over every entry
/// of `x` and `analytic`.
pub fn worst_error(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..x.as_slice().len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.as_mut_slice()[k] += H;
        m.as_mut_slice()[k] -= H;
        let fd = (f(&p) - f(&m)) / (2.0 * H);
        let a = analytic.as_slice()[k];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

/// [`worst_error`] over a flat parameter vector.
pub fn worst_flat(params: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let x = Matrix::from_vec(1, params.len(), params.to_vec()).unwrap();
    let a = Matrix::from_vec(1, analytic.len(), analytic.to_vec()).unwrap();
    worst_error(&x, &a, |m| f(m.as_slice()))
}

/// Parameters flattened in `tensors_mut` order.
pub fn flatten(tensors: Vec<&mut [f64]>) -> Vec<f64> {
    tensors.into_iter().flat_map(|t| t.to_vec()).collect()
}

pub fn set_flat(tensors: Vec<&mut [f64]>, values: &[f64]) {
    let mut at = 0;
    for t in tensors {
        let n = t.len();
        t.copy_from_slice(&values[at..at + n]);
        at += n;
    }
}

pub fn codebook(depth: usize, dim: usize, seed: u64) -> TreeCodebook {
    let levels = (1..=depth).map(|l| random(1 << l, dim, 1.0, seed + l as u64)).collect();
    TreeCodebook::from_levels(levels).unwrap()
}

/// Quantization objective with every assignment frozen and both sides of each
/// alignment term counted once: the stop-gradient form whose partial
/// derivatives the analytic gradients must reproduce.
pub fn hql_surrogate(points: &Matrix, cb: &TreeCodebook, paths: &[CodePath], nearest: &[Vec<usize>], lambda: f64) -> f64 {
    let n = points.rows() as f64;
    let mut total = 0.0;
    for l in 1..=cb.depth() {
        let mut uses = vec![0usize; 1 << l];
        for (i, p) in paths.iter().enumerate() {
            uses[p.at(l)] += 1;
            total += sq_dist(points.row(i), cb.code(l, p.at(l)));
        }
        for (j, &count) in uses.iter().enumerate() {
            if count > 0 {
                total += lambda * count as f64 * sq_dist(cb.code(l, j), points.row(nearest[l - 1][j]));
            }
        }
    }
    total / n
}

pub fn frozen_nearest(points: &Matrix, cb: &TreeCodebook) -> Vec<Vec<usize>> {
    (1..=cb.depth()).map(|l| (0..1usize << l).map(|j| nearest_row(points, cb.code(l, j))).collect()).collect()
}

pub fn codebook_params(cb: &TreeCodebook) -> Vec<f64> {
    cb.levels().iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

pub fn with_codes(cb: &TreeCodebook, values: &[f64]) -> TreeCodebook {
    let mut out = cb.clone();
    set_flat(out.tensors_mut(), values);
    out
}

/// Worst errors of the contrastive loss over both inputs and several kernel settings.
pub fn contrastive_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let settings = [(0.1, 3.0, PositiveWeight::Sum), (1.0, 0.7, PositiveWeight::Sum), (0.5, 2.0, PositiveWeight::Sum), (0.3, 2.0, PositiveWeight::Mean)];
    for (k, (gamma, scale, positive_weight)) in settings.into_iter().enumerate() {
        let cfg = KernelConfig { gamma, positive_weight, ..Default::default() };
        let z = random(5, 3, scale, 1 + 2 * k as u64);
        let zp = random(5, 3, scale, 2 + 2 * k as u64);
        let res = scl_loss(&z, &zp, &cfg).unwrap();
        out.push(("scl z", worst_error(&z, &res.grad_z, |m| scl_loss(m, &zp, &cfg).unwrap().value)));
        out.push(("scl z+", worst_error(&zp, &res.grad_z_plus, |m| scl_loss(&z, m, &cfg).unwrap().value)));
    }
    out
}

/// Worst errors of the quantization loss against its frozen-assignment surrogate.
pub fn quantization_errors() -> Vec<(&'static str, f64)> {
    let cb = codebook(3, 2, 20);
    let z = random(9, 2, 1.2, 21);
    let paths = quantize_batch(&cb, &z).unwrap().paths;
    let nearest = frozen_nearest(&z, &cb);
    let mut out = Vec::new();
    for lambda in [0.0, 2.0] {
        let res = hql_loss(&z, &cb, &paths, lambda).unwrap();
        // the value carries both halves of every alignment term
        let surrogate = hql_surrogate(&z, &cb, &paths, &nearest, lambda);
        out.push(("hql value", (res.value - 2.0 * surrogate).abs() / surrogate.abs().max(1e-3)));
        out.push(("hql z", worst_error(&z, &res.grad_z, |m| hql_surrogate(m, &cb, &paths, &nearest, lambda))));
        let analytic: Vec<f64> = res.grad_codes.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        out.push((
            "hql codes",
            worst_flat(&codebook_params(&cb), &analytic, |p| hql_surrogate(&z, &with_codes(&cb, p), &paths, &nearest, lambda)),
        ));
    }
    out
}

/// Worst errors of the diffusion loss over decoder parameters and codes.
pub fn diffusion_errors() -> Vec<(&'static str, f64)> {
    let schedule = make_schedule(&ScheduleSpec { steps: 20, ..Default::default() }).unwrap();
    let x0 = random(5, 3, 1.0, 32);
    let eps = random(5, 3, 1.0, 33);
    let t = vec![1, 4, 9, 15, 20];
    let mut out = Vec::new();
    for weights in [vec![1.0, 1.0], vec![2.5, -0.7]] {
        let cb = codebook(2, 2, 30);
        let mut dec = DiffusionDecoder::new(3, 2, 2, &[6], 4, Activation::Silu, &mut stream(31, Domain::Init, 0)).unwrap();
        dec.cond.level_weights = weights;
        let z = random(5, 2, 1.0, 34);
        let paths = quantize_batch(&cb, &z).unwrap().paths;
        let res = ddp_loss_fixed(&dec, &cb, &x0, &paths, &schedule, &t, &eps).unwrap();
        let loss = |d: &DiffusionDecoder, c: &TreeCodebook| ddp_loss_fixed(d, c, &x0, &paths, &schedule, &t, &eps).unwrap().value;

        let mut probe = dec.clone();
        let analytic: Vec<f64> = res.grads.tensors().into_iter().flat_map(|s| s.to_vec()).collect();
        out.push((
            "ddp decoder",
            worst_flat(&flatten(probe.tensors_mut()), &analytic, |p| {
                let mut d = dec.clone();
                set_flat(d.tensors_mut(), p);
                loss(&d, &cb)
            }),
        ));
        let analytic: Vec<f64> = res.grad_codes.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        out.push(("ddp codes", worst_flat(&codebook_params(&cb), &analytic, |p| loss(&dec, &with_codes(&cb, p)))));
    }
    out
}
