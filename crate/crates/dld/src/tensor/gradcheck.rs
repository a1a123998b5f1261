//! Finite-difference verification of backward rules.
//!
//! Checks run entirely in `f64`: the function under test is the same generic
//! code that ships in `f32`, instantiated at double precision so central
//! differences resolve well below the 1e-4 relative tolerance.

use super::{Array, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// max over all input elements of |a-n| / max(1e-8, |a|+|n|)
    pub max_rel_err: f64,
    /// (input index, element index) attaining the max
    pub worst: Option<(usize, usize)>,
    /// NaN locations or evaluation failures
    pub failures: Vec<String>,
    pub elements_checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1e-8, a.abs() + n.abs())
}

/// Compare analytic gradients of a scalar-valued tensor function against
/// central finite differences with per-element step `eps * max(1, |x|)`.
pub fn gradcheck<F>(f: F, inputs: &[Array<f64>], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    gradcheck_sampled(f, inputs, eps, usize::MAX, 0)
}

/// Like [`gradcheck`], but probing at most `cap` seeded-random coordinates
/// per input; large composed pipelines stay checkable in seconds.
pub fn gradcheck_sampled<F>(f: F, inputs: &[Array<f64>], eps: f64, cap: usize, seed: u64) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    // Analytic pass.
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|a| a.leaf()).collect();
    let out = f(&leaves)?;
    assert_eq!(out.numel(), 1, "gradcheck target must be scalar-valued");
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad_or_zeros()).collect();

    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let consts: Vec<Tensor<f64>> = xs.iter().map(|a| a.constant()).collect();
        Ok(f(&consts)?.item())
    };

    let mut report = GradcheckReport { max_rel_err: 0.0, worst: None, failures: Vec::new(), elements_checked: 0 };
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let elements: Vec<usize> = if input.numel() <= cap {
            (0..input.numel()).collect()
        } else {
            let mut rng = crate::rng::Pcg32::from_seed_tag(seed, "gradcheck-sample", &[ii as u64]);
            let mut all: Vec<usize> = (0..input.numel()).collect();
            rng.shuffle(&mut all);
            all.truncate(cap);
            all.sort_unstable();
            all
        };
        for ei in elements {
            let x0 = input.data[ei];
            if !x0.is_finite() {
                report.failures.push(format!("input {ii} element {ei} is not finite"));
                continue;
            }
            let bump = |v: f64, work: &mut Vec<Array<f64>>| {
                let mut d = (*input.data).clone();
                d[ei] = v;
                work[ii] = Array::new(d, input.shape.clone());
            };
            let fd_at = |h: f64, work: &mut Vec<Array<f64>>| -> Result<f64> {
                bump(x0 + h, work);
                let fp = eval(work)?;
                bump(x0 - h, work);
                let fm = eval(work)?;
                Ok((fp - fm) / (2.0 * h))
            };
            // Piecewise-linear kinks (relu, max) inside a composition can be
            // straddled by the probe interval; shrink the step until two
            // consecutive central-difference estimates agree, which happens
            // at every differentiable point.
            let mut h = eps * f64::max(1.0, x0.abs());
            let mut numeric = fd_at(h, &mut work)?;
            for _ in 0..4 {
                h /= 4.0;
                let finer = fd_at(h, &mut work)?;
                let agreed = rel_err(finer, numeric) < 1e-5;
                numeric = finer;
                if agreed {
                    break;
                }
            }
            work[ii] = input.clone();
            let a = analytic[ii][ei];
            if a.is_nan() || numeric.is_nan() {
                report.failures.push(format!(
                    "NaN gradient at input {ii} element {ei} (analytic {a}, numeric {numeric})"
                ));
                continue;
            }
            let e = rel_err(a, numeric);
            report.elements_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ii, ei));
            }
        }
    }
    Ok(report)
}

/// Seeded random array with entries in (-1,1), nudged away from zero so
/// kinked operations (relu, max) are differentiable at every sample point.
pub fn random_array(rng: &mut crate::rng::Pcg32, shape: &[usize], eps: f64) -> Array<f64> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = rng.next_range(-1.0, 1.0);
        if v.abs() < 3.0 * eps {
            v += if v >= 0.0 { 3.0 * eps } else { -3.0 * eps };
        }
        data.push(v);
    }
    Array::new(data, shape.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use crate::tensor::{BackwardRule, Reduce};
    use std::sync::Arc;

    #[test]
    fn sum_gradient_is_exact_on_dyadic_grid() {
        // Dyadic inputs and a power-of-two step make the difference quotient
        // exact, so the relative error is exactly zero.
        let input = Array::new(vec![0.5, -0.25, 1.0, 2.0], vec![4]);
        let report = gradcheck(|xs| Ok(xs[0].sum_all()), &[input], 0.0009765625).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn mean_of_softmax_passes() {
        let mut rng = Pcg32::from_seed_tag(11, "gradcheck-softmax", &[]);
        let input = random_array(&mut rng, &[5], 1e-3);
        let report = gradcheck(|xs| Ok(xs[0].softmax(0)?.mean_all()), &[input], 1e-3).unwrap();
        assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_conv_relu_mean_passes() {
        let mut rng = Pcg32::from_seed_tag(12, "gradcheck-conv", &[]);
        let x = random_array(&mut rng, &[2, 5, 5], 1e-3);
        let w = random_array(&mut rng, &[3, 2, 3, 3], 1e-3);
        let b = random_array(&mut rng, &[3], 1e-3);
        let report = gradcheck(
            |xs| Ok(xs[0].conv2d(&xs[1], Some(&xs[2]), 1, 1)?.relu().mean_all()),
            &[x, w, b],
            1e-3,
        )
        .unwrap();
        assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
    }

    struct CorruptedScale {
        x: Tensor<f64>,
    }

    impl BackwardRule<f64> for CorruptedScale {
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![self.x.clone()]
        }
        fn backward(&self, _out: &Tensor<f64>, grad: &[f64]) {
            // Deliberately wrong rule: true derivative is 3.0.
            self.x.accumulate_grad_owned(grad.iter().map(|g| g * 2.9).collect());
        }
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let mut rng = Pcg32::from_seed_tag(13, "gradcheck-mutation", &[]);
        let input = random_array(&mut rng, &[4], 1e-3);
        let report = gradcheck(
            |xs| {
                let data: Vec<f64> = xs[0].data().iter().map(|v| v * 3.0).collect();
                let y = Tensor::from_parts(
                    vec![4],
                    Arc::new(data),
                    xs[0].requires_grad(),
                    if xs[0].requires_grad() { Some(Box::new(CorruptedScale { x: xs[0].clone() })) } else { None },
                );
                Ok(y.sum_all())
            },
            &[input],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-2, "mutation not detected: {}", report.max_rel_err);
    }

    #[test]
    fn max_reduce_routes_to_argmax() {
        let mut rng = Pcg32::from_seed_tag(14, "gradcheck-max", &[]);
        let input = random_array(&mut rng, &[3, 4], 1e-3);
        let report =
            gradcheck(|xs| Ok(xs[0].reduce(Reduce::Max, &[1])?.sum_all().scale(0.5)), &[input], 1e-3).unwrap();
        assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
    }
}
