//! Finite-difference certification of backward rules.
//!
//! Runs the closure twice per perturbed element (central differences,
//! `(f(x+eps) - f(x-eps)) / (2 eps)`) and compares against the gradients
//! recorded by `backward`. Always f64: finite differences are unreliable
//! in f32.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Per-input outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct InputCheck {
    pub input: usize,
    pub max_rel_err: f64,
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub per_input: Vec<InputCheck>,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{} op={} max_rel_err={:.3e} (tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.op,
            self.max_rel_err,
            self.tol
        )
    }
}

/// Check the recorded gradients of `f` with respect to every element of
/// every tensor in `inputs`. `f` must return a scalar (numel == 1) node.
pub fn gradcheck<F>(
    op: &str,
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    // analytic pass
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: g.value(out).shape().to_vec(),
        });
    }
    if !g.value(out).all_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" });
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "gradcheck" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    for i in 0..inputs.len() {
        let mut input_max = 0.0f64;
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite { op: "gradcheck" });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            input_max = input_max.max(rel);
        }
        max_rel = max_rel.max(input_max);
        per_input.push(InputCheck {
            input: i,
            max_rel_err: input_max,
        });
    }

    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_err: max_rel,
        per_input,
        tol,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        // f(x) = sum(x^2) at x=[1,2]: analytic [2,4]; central differences are
        // exact for quadratics up to rounding.
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let rep = gradcheck(
            "sum_square",
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                g.sum_all(sq)
            },
            &[x],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.max_rel_err < 1e-8, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        // value x^2 but gradient deliberately reported as 3x instead of 2x
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let rep = gradcheck(
            "corrupted_square",
            |g, vars| {
                let xv = g.value(vars[0]).clone();
                let xid = vars[0];
                let y = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data().iter().map(|v| v * v).collect(),
                )
                .unwrap();
                let xv2 = xv.clone();
                let node = g.push_custom(y, move |gin: &Tensor<f64>| {
                    let bad = Tensor::new(
                        xv2.shape().to_vec(),
                        xv2.data()
                            .iter()
                            .zip(gin.data())
                            .map(|(&x, &gv)| gv * 3.0 * x)
                            .collect(),
                    )
                    .unwrap();
                    vec![(xid.0, bad)]
                });
                g.sum_all(node)
            },
            &[x],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!rep.pass);
        assert!(rep.max_rel_err > 1e-2, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::ones(&[3]);
        let err = gradcheck("id", |g, vars| g.mul(vars[0], vars[0]), &[x], 1e-3, 1e-4);
        assert!(matches!(err, Err(TensorError::NonScalarRoot { .. })));
    }
}
