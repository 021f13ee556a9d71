//! Central-difference gradient verification.
//!
//! [`gradcheck`] compares a tape-computed gradient against the
//! finite-difference oracle coordinate by coordinate. [`op_suite`] bundles
//! one composite check per differentiable tape operation; the CLI and the
//! acceptance tests both run it.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::{lit, Scalar};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step (double precision).
pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for
/// a scalar-valued function of one tensor.
pub fn gradcheck<T, F>(f: F, at: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(&at.clone().with_requires_grad());
        let y = f(&mut g, x)?;
        if g.values(y).len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: g.shape(y).to_vec(),
            });
        }
        g.backward(y)?;
        g.grad(x).to_vec()
    };

    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let y = f(&mut g, x)?;
        Ok(g.values(y)[0].to_f64().expect("scalar converts"))
    };

    let mut worst = 0.0f64;
    for i in 0..at.numel() {
        let mut plus = at.clone();
        plus.values_mut()[i] += lit(step);
        let mut minus = at.clone();
        minus.values_mut()[i] -= lit(step);
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic[i].to_f64().expect("scalar converts");
        let err = (a - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// One named gradient check with its tolerance.
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Per-operation tolerance required by the gradient suite.
pub const OP_TOLERANCE: f64 = 1e-5;

fn rand_tensor(seed: u64, label: &str, shape: Vec<usize>) -> Tensor<f64> {
    let mut rng = stream(seed, label);
    Tensor::normal(shape, 1.0, &mut rng)
}

/// Reduces any tensor to a scalar through a fixed random projection so
/// every output coordinate influences the check.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = rand_tensor(seed, "gc-project", shape);
    let wv = g.leaf(&w);
    let prod = g.mul(v, wv)?;
    Ok(g.sum(prod))
}

/// Runs one composite gradient check per differentiable operation at the
/// given seed; returns (name, max rel err) pairs.
pub fn op_checks(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    let x6 = rand_tensor(seed, "gc-x6", vec![6]);
    let x23 = rand_tensor(seed, "gc-x23", vec![2, 3]);
    let x34 = rand_tensor(seed, "gc-x34", vec![3, 4]);
    let x43 = rand_tensor(seed, "gc-x43", vec![4, 3]);
    let x233 = rand_tensor(seed, "gc-x233", vec![2, 3, 3]);
    let img = {
        // Keep pixels positive so the same fixture also suits encoders.
        let mut t = rand_tensor(seed, "gc-img", vec![4, 4, 3]);
        for v in t.values_mut() {
            *v = 0.5 + 0.2 * v.tanh();
        }
        t
    };

    push(
        "add",
        gradcheck(
            |g, x| {
                let c = g.leaf(&rand_tensor(seed, "gc-c6", vec![6]));
                let y = g.add(x, c)?;
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "sub",
        gradcheck(
            |g, x| {
                let c = g.leaf(&rand_tensor(seed, "gc-c6", vec![6]));
                let y = g.sub(c, x)?;
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "mul",
        gradcheck(
            |g, x| {
                let c = g.leaf(&rand_tensor(seed, "gc-c6", vec![6]));
                let y = g.mul(x, c)?;
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "scale",
        gradcheck(
            |g, x| {
                let y = g.scale(x, -1.7);
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "add_rows",
        gradcheck(
            |g, x| {
                let b = g.leaf(&rand_tensor(seed, "gc-b3", vec![3]));
                let y = g.add_rows(x, b)?;
                project(g, y, seed)
            },
            &x23,
            DEFAULT_STEP,
        )?,
    );
    push(
        "add_rows_bias",
        gradcheck(
            |g, b| {
                let x = g.leaf(&rand_tensor(seed, "gc-x23b", vec![2, 3]));
                let y = g.add_rows(x, b)?;
                project(g, y, seed)
            },
            &rand_tensor(seed, "gc-b3b", vec![3]),
            DEFAULT_STEP,
        )?,
    );
    push(
        "matmul_lhs",
        gradcheck(
            |g, a| {
                let b = g.leaf(&rand_tensor(seed, "gc-m42", vec![4, 2]));
                let y = g.matmul(a, b)?;
                project(g, y, seed)
            },
            &x34,
            DEFAULT_STEP,
        )?,
    );
    push(
        "matmul_rhs",
        gradcheck(
            |g, b| {
                let a = g.leaf(&rand_tensor(seed, "gc-m24", vec![2, 4]));
                let y = g.matmul(a, b)?;
                project(g, y, seed)
            },
            &x43,
            DEFAULT_STEP,
        )?,
    );
    push(
        "transpose",
        gradcheck(
            |g, x| {
                let y = g.transpose(x)?;
                project(g, y, seed)
            },
            &x23,
            DEFAULT_STEP,
        )?,
    );
    push(
        "softmax",
        gradcheck(
            |g, x| {
                let y = g.softmax(x)?;
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "l2_normalize",
        gradcheck(
            |g, x| {
                let y = g.l2_normalize(x)?;
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "layer_norm_x",
        gradcheck(
            |g, x| {
                let gain = g.leaf(&rand_tensor(seed, "gc-lng", vec![3]));
                let bias = g.leaf(&rand_tensor(seed, "gc-lnb", vec![3]));
                let y = g.layer_norm(x, gain, bias)?;
                project(g, y, seed)
            },
            &x23,
            DEFAULT_STEP,
        )?,
    );
    push(
        "layer_norm_gain",
        gradcheck(
            |g, gain| {
                let x = g.leaf(&rand_tensor(seed, "gc-lnx", vec![2, 3]));
                let bias = g.leaf(&rand_tensor(seed, "gc-lnb", vec![3]));
                let y = g.layer_norm(x, gain, bias)?;
                project(g, y, seed)
            },
            &rand_tensor(seed, "gc-lng2", vec![3]),
            DEFAULT_STEP,
        )?,
    );
    push(
        "layer_norm_bias",
        gradcheck(
            |g, bias| {
                let x = g.leaf(&rand_tensor(seed, "gc-lnx", vec![2, 3]));
                let gain = g.leaf(&rand_tensor(seed, "gc-lng", vec![3]));
                let y = g.layer_norm(x, gain, bias)?;
                project(g, y, seed)
            },
            &rand_tensor(seed, "gc-lnb2", vec![3]),
            DEFAULT_STEP,
        )?,
    );
    for (name, which) in [("attention_q", 0), ("attention_k", 1), ("attention_v", 2)] {
        push(
            name,
            gradcheck(
                |g, x| {
                    let a = g.leaf(&rand_tensor(seed, "gc-att-a", vec![3, 4]));
                    let b = g.leaf(&rand_tensor(seed, "gc-att-b", vec![3, 4]));
                    let (q, k, v) = match which {
                        0 => (x, a, b),
                        1 => (a, x, b),
                        _ => (a, b, x),
                    };
                    let y = g.attention(q, k, v)?;
                    project(g, y, seed)
                },
                &x34,
                DEFAULT_STEP,
            )?,
        );
    }
    push(
        "gelu",
        gradcheck(
            |g, x| {
                let y = g.gelu(x);
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "mean_rows",
        gradcheck(
            |g, x| {
                let y = g.mean_rows(x)?;
                project(g, y, seed)
            },
            &x34,
            DEFAULT_STEP,
        )?,
    );
    push(
        "row",
        gradcheck(
            |g, x| {
                let y = g.row(x, 1)?;
                project(g, y, seed)
            },
            &x34,
            DEFAULT_STEP,
        )?,
    );
    push(
        "slice_rows",
        gradcheck(
            |g, x| {
                let y = g.slice_rows(x, 1, 3)?;
                project(g, y, seed)
            },
            &x34,
            DEFAULT_STEP,
        )?,
    );
    push(
        "slice0",
        gradcheck(
            |g, x| {
                let y = g.slice0(x, 1)?;
                project(g, y, seed)
            },
            &x233,
            DEFAULT_STEP,
        )?,
    );
    push(
        "concat_rows",
        gradcheck(
            |g, x| {
                let other = g.leaf(&rand_tensor(seed, "gc-cr", vec![2, 3]));
                let r = g.row(x, 0)?;
                let y = g.concat_rows(&[r, other, x])?;
                project(g, y, seed)
            },
            &x23,
            DEFAULT_STEP,
        )?,
    );
    push(
        "concat_cols",
        gradcheck(
            |g, x| {
                let other = g.leaf(&rand_tensor(seed, "gc-cc", vec![2, 2]));
                let y = g.concat_cols(&[x, other])?;
                project(g, y, seed)
            },
            &x23,
            DEFAULT_STEP,
        )?,
    );
    push(
        "concat1",
        gradcheck(
            |g, x| {
                let s = g.sum(x);
                let y = g.concat1(&[x, s])?;
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "reshape",
        gradcheck(
            |g, x| {
                let y = g.reshape(x, vec![3, 2])?;
                project(g, y, seed)
            },
            &x23,
            DEFAULT_STEP,
        )?,
    );
    push(
        "dot",
        gradcheck(
            |g, x| {
                let c = g.leaf(&rand_tensor(seed, "gc-c6", vec![6]));
                g.dot(x, c)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "cross_entropy",
        gradcheck(|g, x| g.cross_entropy(x, 2), &x6, DEFAULT_STEP)?,
    );
    push(
        "sum",
        gradcheck(|g, x| Ok(g.sum(x)), &x6, DEFAULT_STEP)?,
    );
    push(
        "mask_grad_identity",
        gradcheck(
            |g, x| {
                let y = g.mask_grad(x, vec![true; 6])?;
                project(g, y, seed)
            },
            &x6,
            DEFAULT_STEP,
        )?,
    );
    push(
        "gather_rows",
        gradcheck(
            |g, x| {
                let y = g.gather_rows(x, &[0, 2, 2, 1])?;
                project(g, y, seed)
            },
            &x34,
            DEFAULT_STEP,
        )?,
    );
    push(
        "image_to_patches",
        gradcheck(
            |g, x| {
                let y = g.image_to_patches(x, 2)?;
                project(g, y, seed)
            },
            &img,
            DEFAULT_STEP,
        )?,
    );

    Ok(out)
}

/// Runs [`op_checks`] over `seeds` seeds and reports the worst error per
/// operation against [`OP_TOLERANCE`].
pub fn op_suite(seeds: u64) -> Result<Vec<CheckReport>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..seeds {
        for (name, err) in op_checks(seed)? {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some((_, w)) => *w = w.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, max_rel_err)| CheckReport {
            name,
            max_rel_err,
            tolerance: OP_TOLERANCE,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_to_fd_noise_floor() {
        let at = rand_tensor(0, "lin", vec![5]);
        let err = gradcheck(
            |g, x| {
                let c = g.leaf(&rand_tensor(0, "lin-c", vec![5]));
                g.dot(x, c)
            },
            &at,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "linear gradcheck err {err}");
    }

    #[test]
    fn softmax_composite_checks_below_1e6() {
        let at = rand_tensor(1, "sm", vec![5]);
        let err = gradcheck(
            |g, x| {
                let p = g.softmax(x)?;
                let c = g.leaf(&rand_tensor(1, "sm-c", vec![5]));
                g.dot(p, c)
            },
            &at,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax gradcheck err {err}");
    }

    #[test]
    fn deliberately_broken_backward_is_detected() {
        // f(x) = sum(x . detach(x)): the analytic path sees only one
        // factor, the finite difference sees both, so errors are O(|x|).
        let mut at = rand_tensor(2, "broken", vec![5]);
        for v in at.values_mut() {
            *v = 1.0 + v.abs().min(1.0); // keep well away from zero
        }
        let err = gradcheck(
            |g, x| {
                let frozen = g.tensor(x);
                let detached = g.leaf(&frozen);
                let prod = g.mul(x, detached)?;
                Ok(g.sum(prod))
            },
            &at,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > 1e-2, "broken backward not flagged: err {err}");
    }

    #[test]
    fn op_suite_passes_over_ten_seeds() {
        for report in op_suite(10).unwrap() {
            assert!(
                report.passed(),
                "{} failed: {} >= {}",
                report.name,
                report.max_rel_err,
                report.tolerance
            );
        }
    }
}
