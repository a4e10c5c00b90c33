//! Finite-difference gradient validation.
//!
//! The checker treats the graph builder as a black box: it evaluates the
//! forward value only, so it stays independent of the backward pass it
//! verifies. Central differences with h = 1e-5 in double precision.

use crate::tape::{Tape, Var};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub scalars_checked: usize,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Check the gradient of `build` with respect to every input scalar.
///
/// `build` receives a fresh tape plus the current parameter values and
/// returns the scalar loss and the leaf vars in parameter order. The
/// analytic gradient comes from one backward pass; the reference comes
/// from central differences of the forward value alone.
pub fn check<F>(name: &str, params: &[(Vec<f64>, Vec<usize>)], h: f64, tol: f64, build: F) -> CheckReport
where
    F: Fn(&mut Tape, &[Vec<f64>]) -> (Var, Vec<Var>),
{
    let values: Vec<Vec<f64>> = params.iter().map(|(d, _)| d.clone()).collect();

    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, &values);
    tape.backward(loss).expect("gradcheck loss must be scalar");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, values);
        tape.scalar_value(loss)
    };

    let mut max_rel = 0.0f64;
    let mut count = 0;
    for (pi, vals) in values.iter().enumerate() {
        for j in 0..vals.len() {
            let mut plus = values.to_vec();
            plus[pi][j] += h;
            let mut minus = values.to_vec();
            minus[pi][j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[pi][j], numeric));
            count += 1;
        }
    }

    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        tol,
        scalars_checked: count,
    }
}

/// Variant for objectives containing `stop_gradient`. Finite differences
/// recompute everything they touch, so a stopped branch must be frozen at
/// its base-point value in the function the checker differentiates —
/// otherwise the reference measures the full derivative rather than the
/// partial one stop_gradient defines. `build_real` is the implementation
/// path (analytic gradients); `build_frozen` is the same objective with
/// every stopped branch replaced by constants captured from the base
/// point. Both must agree on the forward value at the base point.
pub fn check_frozen<F, G>(
    name: &str,
    params: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    tol: f64,
    build_real: F,
    build_frozen: G,
) -> CheckReport
where
    F: Fn(&mut Tape, &[Vec<f64>]) -> (Var, Vec<Var>),
    G: Fn(&mut Tape, &[Vec<f64>]) -> Var,
{
    let values: Vec<Vec<f64>> = params.iter().map(|(d, _)| d.clone()).collect();

    let mut tape = Tape::new();
    let (loss, vars) = build_real(&mut tape, &values);
    tape.backward(loss).expect("gradcheck loss must be scalar");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    let base_value = tape.scalar_value(loss);

    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let loss = build_frozen(&mut tape, values);
        tape.scalar_value(loss)
    };
    let frozen_base = eval(&values);
    assert!(
        (base_value - frozen_base).abs() <= 1e-9 * base_value.abs().max(1.0),
        "{name}: frozen objective disagrees with the real path at the base point \
         ({base_value} vs {frozen_base})"
    );

    let mut max_rel = 0.0f64;
    let mut count = 0;
    for (pi, vals) in values.iter().enumerate() {
        for j in 0..vals.len() {
            let mut plus = values.to_vec();
            plus[pi][j] += h;
            let mut minus = values.to_vec();
            minus[pi][j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[pi][j], numeric));
            count += 1;
        }
    }

    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        tol,
        scalars_checked: count,
    }
}

/// Finite-difference suite over every differentiable tape operation on
/// randomized inputs. Returns one report per op.
pub fn standard_op_suite(seed: u64) -> Vec<CheckReport> {
    use crate::rng::Rng;
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();
    let randvec = |n: usize, rng: &mut Rng| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };

    let a34 = (randvec(12, &mut rng), vec![3, 4]);
    let b42 = (randvec(8, &mut rng), vec![4, 2]);
    reports.push(check("matmul", &[a34.clone(), b42.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let b = t.leaf(v[1].clone(), vec![4, 2], true);
        let c = t.matmul(a, b).unwrap();
        (t.sum_all(c), vec![a, b])
    }));

    let b24 = (randvec(8, &mut rng), vec![2, 4]);
    reports.push(check("matmul_nt", &[a34.clone(), b24], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let b = t.leaf(v[1].clone(), vec![2, 4], true);
        let c = t.matmul_nt(a, b).unwrap();
        (t.sum_all(c), vec![a, b])
    }));

    let x = (randvec(12, &mut rng), vec![3, 4]);
    let y = (randvec(12, &mut rng), vec![3, 4]);
    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
    ] {
        let which = f;
        reports.push(check(name, &[x.clone(), y.clone()], DEFAULT_H, DEFAULT_TOL, move |t, v| {
            let a = t.leaf(v[0].clone(), vec![3, 4], true);
            let b = t.leaf(v[1].clone(), vec![3, 4], true);
            let c = match which {
                0 => t.add(a, b).unwrap(),
                1 => t.sub(a, b).unwrap(),
                _ => t.mul(a, b).unwrap(),
            };
            // square to make the objective non-linear in the inputs
            let sq = t.mul(c, c).unwrap();
            (t.sum_all(sq), vec![a, b])
        }));
    }

    let row = (randvec(4, &mut rng), vec![4]);
    reports.push(check("add_row", &[x.clone(), row], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let r = t.leaf(v[1].clone(), vec![4], true);
        let c = t.add_row(a, r).unwrap();
        let sq = t.mul(c, c).unwrap();
        (t.sum_all(sq), vec![a, r])
    }));

    reports.push(check("scale", &[x.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let c = t.scale(a, -1.7);
        let sq = t.mul(c, c).unwrap();
        (t.sum_all(sq), vec![a])
    }));

    reports.push(check("gelu", &[x.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let c = t.gelu(a);
        (t.sum_all(c), vec![a])
    }));

    reports.push(check("softmax", &[x.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let s = t.softmax(a).unwrap();
        let sq = t.mul(s, s).unwrap();
        (t.sum_all(sq), vec![a])
    }));

    let gamma = (randvec(4, &mut rng), vec![4]);
    let beta = (randvec(4, &mut rng), vec![4]);
    reports.push(check(
        "layer_norm",
        &[x.clone(), gamma, beta],
        DEFAULT_H,
        DEFAULT_TOL,
        |t, v| {
            let a = t.leaf(v[0].clone(), vec![3, 4], true);
            let g = t.leaf(v[1].clone(), vec![4], true);
            let b = t.leaf(v[2].clone(), vec![4], true);
            let c = t.layer_norm(a, g, b).unwrap();
            let sq = t.mul(c, c).unwrap();
            (t.sum_all(sq), vec![a, g, b])
        },
    ));

    reports.push(check("l2_normalize", &[x.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let c = t.l2_normalize_rows(a, 1e-12).unwrap();
        let w = t.leaf((0..12).map(|i| 0.3 + 0.1 * i as f64).collect(), vec![3, 4], false);
        let p = t.mul(c, w).unwrap();
        (t.sum_all(p), vec![a])
    }));

    {
        let base = x.0.clone();
        reports.push(check_frozen(
            "stop_gradient",
            &[x.clone()],
            DEFAULT_H,
            DEFAULT_TOL,
            |t, v| {
                let a = t.leaf(v[0].clone(), vec![3, 4], true);
                let frozen = t.stop_gradient(a);
                let p = t.mul(frozen, a).unwrap();
                (t.sum_all(p), vec![a])
            },
            move |t, v| {
                let a = t.leaf(v[0].clone(), vec![3, 4], true);
                let frozen = t.leaf(base.clone(), vec![3, 4], false);
                let p = t.mul(frozen, a).unwrap();
                t.sum_all(p)
            },
        ));
    }

    reports.push(check("gather_scatter", &[x.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let g = t.gather_rows(a, &[2, 0, 2]).unwrap();
        let s = t.scatter_rows(g, &[1, 4, 3], 5).unwrap();
        let sq = t.mul(s, s).unwrap();
        (t.sum_all(sq), vec![a])
    }));

    reports.push(check("slice_concat_cols", &[x.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let left = t.slice_cols(a, 0, 2).unwrap();
        let right = t.slice_cols(a, 2, 2).unwrap();
        let swapped = t.concat_cols(&[right, left]).unwrap();
        let sq = t.mul(swapped, swapped).unwrap();
        (t.sum_all(sq), vec![a])
    }));

    reports.push(check("mean_rows", &[x.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let m = t.mean_rows(a).unwrap();
        let sq = t.mul(m, m).unwrap();
        (t.sum_all(sq), vec![a])
    }));

    reports.push(check("cosine", &[x.clone(), y.clone()], DEFAULT_H, DEFAULT_TOL, |t, v| {
        let a = t.leaf(v[0].clone(), vec![3, 4], true);
        let b = t.leaf(v[1].clone(), vec![3, 4], true);
        let c = t.cosine_rows(a, b, 1e-12).unwrap();
        (t.sum_all(c), vec![a, b])
    }));

    let logits = (randvec(15, &mut rng), vec![3, 5]);
    reports.push(check(
        "softmax_cross_entropy",
        &[logits.clone()],
        DEFAULT_H,
        DEFAULT_TOL,
        |t, v| {
            let l = t.leaf(v[0].clone(), vec![3, 5], true);
            let loss = t.softmax_cross_entropy(l, &[1, 4, 0]).unwrap();
            (loss, vec![l])
        },
    ));

    let soft: Vec<f64> = {
        let mut s = vec![0.0; 15];
        for i in 0..3 {
            let mut row: Vec<f64> = (0..5).map(|_| rng.uniform() + 0.1).collect();
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
            s[i * 5..(i + 1) * 5].copy_from_slice(&row);
        }
        s
    };
    reports.push(check(
        "soft_cross_entropy",
        &[logits.clone(), (soft, vec![3, 5])],
        DEFAULT_H,
        DEFAULT_TOL,
        |t, v| {
            let l = t.leaf(v[0].clone(), vec![3, 5], true);
            let y = t.leaf(v[1].clone(), vec![3, 5], true);
            let loss = t.soft_cross_entropy(l, y).unwrap();
            (loss, vec![l, y])
        },
    ));

    let bce_targets: Vec<f64> = (0..15).map(|_| rng.uniform()).collect();
    reports.push(check(
        "bce_with_logits",
        &[logits, (bce_targets, vec![3, 5])],
        DEFAULT_H,
        DEFAULT_TOL,
        |t, v| {
            let l = t.leaf(v[0].clone(), vec![3, 5], true);
            let y = t.leaf(v[1].clone(), vec![3, 5], true);
            let loss = t.bce_with_logits(l, y).unwrap();
            (loss, vec![l, y])
        },
    ));

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_standard_op_passes_fd() {
        for report in standard_op_suite(2024) {
            assert!(
                report.pass(),
                "{}: max rel err {} over {} scalars (tol {})",
                report.name,
                report.max_rel_err,
                report.scalars_checked,
                report.tol
            );
        }
    }
}
