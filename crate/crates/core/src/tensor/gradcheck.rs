//! Finite-difference verification of backward rules.
//!
//! The checker re-evaluates a scalar function at `theta ± h·e_i` for sampled
//! coordinates and compares the central difference against the analytic
//! gradient. It trusts nothing about how the gradient was produced, which is
//! what lets it catch a corrupted backward rule.

use rand::Rng;

use crate::error::Result;
use crate::rng::stream;
use crate::tensor::{Graph, TensorId};

/// Step size for central differences.
pub const GRADCHECK_H: f64 = 1e-4;
/// Maximum accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Relative error uses a `max(|fd|, |analytic|, FLOOR)` denominator. The
/// floor absorbs finite-difference noise (O(h^2) truncation plus rounding,
/// about 1e-8 here) on coordinates whose true gradient is near zero; a real
/// backward bug perturbs gradients at their own magnitude and still fails.
const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate index of the worst error.
    pub worst_coord: usize,
    pub pass: bool,
}

/// Compare `analytic` against central differences of `f` at `theta`, on the
/// given coordinates, with step `h` and tolerance `tol`.
///
/// `f` must be a pure function of its argument: two calls with the same
/// buffer must return the same value (fix all seeds inside it).
pub fn finite_diff_check<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> FiniteDiffReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        theta.len(),
        analytic.len(),
        "analytic gradient length must match parameters"
    );
    let mut buf = theta.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut checked = 0usize;
    for &c in coords {
        assert!(c < theta.len(), "coordinate {c} out of range");
        let orig = buf[c];
        buf[c] = orig + h;
        let fp = f(&buf);
        buf[c] = orig - h;
        let fm = f(&buf);
        buf[c] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let an = analytic[c];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(REL_ERR_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = c;
        }
        checked += 1;
    }
    FiniteDiffReport {
        checked,
        max_rel_err: max_rel,
        worst_coord: worst,
        pass: checked > 0 && max_rel < tol,
    }
}

/// Deterministic sample of `n` distinct coordinates out of `len` (all of
/// them when `n >= len`).
pub fn sample_coords(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = stream(seed, "gradcheck-coords");
    let mut picked = vec![false; len];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = rng.random_range(0..len);
        if !picked[c] {
            picked[c] = true;
            out.push(c);
        }
    }
    out
}

// ── the op suite ────────────────────────────────────────────────────

/// One primitive's finite-difference verdict.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: FiniteDiffReport,
}

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    build: fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
}

const OP_CASES: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], build: |g, p| g.matmul(p[0], p[1]) },
    OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], build: |g, p| g.add(p[0], p[1]) },
    OpCase { name: "add_bias", shapes: &[&[3, 4], &[4]], build: |g, p| g.add(p[0], p[1]) },
    OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], build: |g, p| g.mul(p[0], p[1]) },
    OpCase { name: "scale", shapes: &[&[3, 4]], build: |g, p| g.scale(p[0], 0.7) },
    OpCase { name: "transpose", shapes: &[&[3, 4]], build: |g, p| g.transpose(p[0]) },
    OpCase {
        name: "gather",
        shapes: &[&[6, 3]],
        build: |g, p| g.gather(p[0], &[0, 2, 2, 5]),
    },
    OpCase { name: "softmax", shapes: &[&[3, 5]], build: |g, p| g.softmax(p[0]) },
    OpCase {
        name: "layer_norm",
        shapes: &[&[3, 4], &[4], &[4]],
        build: |g, p| g.layer_norm(p[0], p[1], p[2], 1e-5),
    },
    OpCase { name: "relu", shapes: &[&[3, 4]], build: |g, p| g.relu(p[0]) },
    OpCase {
        name: "cross_entropy",
        shapes: &[&[4, 6]],
        build: |g, p| g.cross_entropy(p[0], &[1, 0, 3, 5], 0.0, None),
    },
    OpCase {
        name: "cross_entropy_smoothed",
        shapes: &[&[4, 6]],
        build: |g, p| g.cross_entropy(p[0], &[1, 0, 3, 5], 0.1, Some(0)),
    },
    OpCase {
        name: "concat",
        shapes: &[&[3, 2], &[3, 4]],
        build: |g, p| g.concat(&[p[0], p[1]]),
    },
    OpCase {
        name: "slice_cols",
        shapes: &[&[3, 6]],
        build: |g, p| g.slice_cols(p[0], 1, 3),
    },
    OpCase { name: "sum", shapes: &[&[3, 4]], build: |g, p| g.sum(p[0]) },
    OpCase {
        name: "dropout",
        shapes: &[&[4, 5]],
        build: |g, p| {
            let mut rng = stream(91, "opcheck-dropout");
            g.dropout(p[0], 0.3, &mut rng)
        },
    },
];

/// Seeded parameter values in [-1.5, 1.5], pushed away from zero so no
/// coordinate sits on a relu kink or inside the finite-difference step of
/// one.
fn kink_free_theta(total: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut rng = stream(seed, &format!("opcheck/{name}"));
    (0..total)
        .map(|_| {
            let v: f64 = rng.random_range(-1.5..1.5);
            if v.abs() < 0.2 {
                if v < 0.0 {
                    v - 0.25
                } else {
                    v + 0.25
                }
            } else {
                v
            }
        })
        .collect()
}

fn run_case(case: &OpCase, seed: u64, perturb: Option<f64>) -> Result<OpCheck> {
    let sizes: Vec<usize> = case.shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let theta = kink_free_theta(total, seed, case.name);

    // Tie every output coordinate into the scalar loss through fixed
    // nonzero weights, so no gradient path goes untested.
    let build_loss = |theta: &[f64], weights: Option<&[f64]>| -> Result<(Graph, Vec<TensorId>, TensorId)> {
        let mut g = Graph::new();
        let mut params = Vec::with_capacity(case.shapes.len());
        let mut cursor = 0;
        for (shape, &size) in case.shapes.iter().zip(&sizes) {
            let id = g.param(shape.to_vec(), theta[cursor..cursor + size].to_vec())?;
            params.push(id);
            cursor += size;
        }
        let out = (case.build)(&mut g, &params)?;
        let loss = match weights {
            None => out, // first call only probes the output shape
            Some(w) => {
                if w.len() == 1 {
                    out
                } else {
                    let wid = g.constant(g.shape(out).to_vec(), w.to_vec())?;
                    let weighted = g.mul(out, wid)?;
                    g.sum(weighted)?
                }
            }
        };
        Ok((g, params, loss))
    };

    let (probe, _, probe_out) = build_loss(&theta, None)?;
    let out_len = probe.data(probe_out).len();
    let mut wrng = stream(seed, &format!("opcheck-weights/{}", case.name));
    let weights: Vec<f64> = (0..out_len).map(|_| wrng.random_range(0.5..1.5)).collect();

    let (mut g, params, loss) = build_loss(&theta, Some(&weights))?;
    g.backward(loss)?;
    let mut analytic = Vec::with_capacity(total);
    for &p in &params {
        analytic.extend_from_slice(g.grad(p).expect("trainable leaf has a gradient"));
    }
    if let Some(eps) = perturb {
        analytic[0] += eps;
    }

    let f = |t: &[f64]| -> f64 {
        let (g, _, loss) = build_loss(t, Some(&weights)).expect("same shapes rebuild");
        g.data(loss)[0]
    };
    let coords: Vec<usize> = (0..total).collect();
    let report = finite_diff_check(f, &theta, &analytic, &coords, GRADCHECK_H, GRADCHECK_TOL);
    Ok(OpCheck { name: case.name, report })
}

/// Finite-difference check of every differentiable primitive, each on a
/// small seeded graph with every parameter coordinate verified. `perturb`
/// adds that amount to one analytic coordinate per op first — the negative
/// control proving the checker can fail.
pub fn op_checks(seed: u64, perturb: Option<f64>) -> Result<Vec<OpCheck>> {
    OP_CASES.iter().map(|c| run_case(c, seed, perturb)).collect()
}
