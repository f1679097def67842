//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward function on untracked
//! inputs, so it shares nothing with the reverse-mode path it checks.

use std::sync::Arc;

use crate::error::Result;
use crate::nn::Param;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients that are
/// zero on both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max)
        .map(|i| i * n / max + (i * 7919) % (n / max).max(1))
        .collect()
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must return a scalar. At most `max_probes` elements of each input are
/// perturbed.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars: Vec<Tensor> = inputs.iter().map(|t| t.into_var()).collect();
    let grads = f(&vars)?.backward()?;
    let consts: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; var.numel()]);
        for j in probe_indices(var.numel(), max_probes) {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = consts[i].to_vec();
                data[j] += delta;
                let mut args = consts.clone();
                args[i] = Tensor::new(data, consts[i].shape())?;
                f(&args)?.item()
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j, analytic[j], numeric));
            }
        }
    }
    Ok(report)
}

/// Like [`check_gradients`], but also perturbs `params`. `f` receives only
/// the plain inputs; parameters are swapped in place and restored afterwards.
pub fn check_gradients_with_params<F>(
    params: &[Arc<Param>],
    inputs: &[Tensor],
    f: F,
    step: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let saved: Vec<Tensor> = params.iter().map(|p| p.value()).collect();
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(saved.iter().cloned());
    let n = inputs.len();
    let report = check_gradients(
        &all,
        |x| {
            for (p, v) in params.iter().zip(&x[n..]) {
                p.set(v.clone())?;
            }
            f(&x[..n])
        },
        step,
        max_probes,
    );
    for (p, v) in params.iter().zip(saved) {
        p.set(v)?;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn assert_grad<F: Fn(&[Tensor]) -> Result<Tensor>>(inputs: &[Tensor], f: F) {
        let r = check_gradients(inputs, f, 1e-5, 64).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]).affine(1.0, 3.0);
        assert_grad(&[a.clone(), b.clone()], |x| {
            let y = x[0].mul(&x[1])?.add(&x[0].exp())?.div(&x[1])?;
            let z = y.sqr()?.affine(1.0, 1.0).sqrt().log();
            z.add(&x[0].sigmoid())?.sub(&x[0].abs())?.sum_all()
        });
    }

    #[test]
    fn reductions_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        assert_grad(&[a], |x| {
            let m = x[0].mean_keepdim(&[1])?;
            let v = x[0].var_keepdim(&[2])?;
            let p = x[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            let s = p.index_select(0, &[3, 1, 1])?.narrow(1, 1, 4)?;
            let c = Tensor::cat(&[s.clone(), s.sqr()?], 0)?;
            let b = m.broadcast_as(&[2, 3, 4])?;
            c.sum_all()?
                .add(&v.sum_all()?.scale(3.0))?
                .add(&b.mul(&x[0])?.sum_all()?)
        });
    }

    #[test]
    fn matmul_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let c = rand_tensor(&mut rng, &[2, 5, 2]);
        let w = rand_tensor(&mut rng, &[2, 3, 5]);
        assert_grad(&[a, b, c, w], |x| {
            let y = x[0].matmul(&x[1])?.softmax_last()?;
            let z = y.matmul(&x[2])?;
            let l = x[0].matmul(&x[1])?.log_softmax_last()?.mul(&x[3])?;
            z.sqr()?.sum_all()?.add(&l.sum_all()?)
        });
    }

    #[test]
    fn shared_left_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 5]);
        assert_grad(&[a, b], |x| x[0].matmul(&x[1])?.sqr()?.sum_all());
    }

    #[test]
    fn conv_pool_upsample_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let w2 = rand_tensor(&mut rng, &[2, 4, 2, 2]);
        assert_grad(&[x, w, w2], |t| {
            let y = t[0].reflect_pad(1)?.conv2d(&t[1], 1, 0)?.relu();
            let p = y.max_pool2()?.upsample2()?;
            let z = p.conv2d(&t[2], 2, 0)?;
            let a = t[0].avg_pool(2)?;
            z.sqr()?.sum_all()?.add(&a.sqr()?.sum_all()?)
        });
    }

    #[test]
    fn layer_norm_and_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 8]);
        let g = rand_tensor(&mut rng, &[8]);
        let b = rand_tensor(&mut rng, &[8]);
        assert_grad(&[x, g, b], |t| {
            t[0].layer_norm(&t[1], &t[2], 1e-5)?
                .quick_gelu()?
                .sqr()?
                .sum_all()
        });
    }

    #[test]
    fn powers_of_negative_values() {
        let x = Tensor::new(vec![-1.5, -0.3, 0.7, 2.0], &[4]).unwrap();
        assert_grad(&[x], |t| t[0].powi(3)?.add(&t[0].powi(2)?)?.sum_all());
    }
}
