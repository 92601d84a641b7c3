//! Finite-difference verification of [`backward`](super::backward).
//!
//! The central difference `(L(p + eps e_j) - L(p - eps e_j)) / 2 eps` is
//! evaluated through a separate forward pass in double-double arithmetic.
//! The two logit tensors are subtracted before rounding and the loss
//! difference is formed as `ln1p(sum_c w_c expm1(dz_c) / sum_c w_c) - dz_y`,
//! so the numerator keeps full relative precision even when the gradient
//! coordinate is many orders of magnitude below the loss. A plain `f64`
//! difference bottoms out near `1e-16 * |L| / eps` and cannot resolve small
//! coordinates to a relative tolerance.

use super::{check_labels, check_params, loss_and_grad, Matrix, NetSpec, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd {
        hi: s,
        lo: (a - (s - bb)) + (b - bb),
    }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(r.hi, r.lo + t.lo)
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    fn is_positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Logits in double-double with coordinate `j` of `params` replaced by
/// `params[j] + delta` (exactly).
fn logits_dd(spec: &NetSpec, params: &ParamVector, j: usize, delta: f64, batch: &Matrix) -> Vec<Vec<Dd>> {
    let p = params.as_slice();
    let param = |k: usize| {
        if k == j {
            two_sum(p[k], delta)
        } else {
            Dd::from_f64(p[k])
        }
    };
    let layers = spec.num_layers();
    let mut out = Vec::with_capacity(batch.rows());
    for r in 0..batch.rows() {
        let mut act: Vec<Dd> = batch.row(r).iter().map(|&x| Dd::from_f64(x)).collect();
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = spec.layer_dims(l);
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let mut acc = param(off + fan_in * fan_out + o);
                for (k, a) in act.iter().enumerate() {
                    acc = acc.add(param(off + o * fan_in + k).mul(*a));
                }
                if l + 1 < layers && !acc.is_positive() {
                    acc = Dd::ZERO;
                }
                next.push(acc);
            }
            off += fan_in * fan_out + fan_out;
            act = next;
        }
        out.push(act);
    }
    out
}

/// Central difference of the batch-mean cross-entropy along coordinate `j`.
pub fn central_difference(
    spec: &NetSpec,
    params: &ParamVector,
    batch: &Matrix,
    labels: &[usize],
    j: usize,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Input(format!("eps must be positive, got {eps}")));
    }
    check_params(spec, params)?;
    if batch.cols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} columns, network input is {}",
            batch.cols(),
            spec.input_dim()
        )));
    }
    check_labels(labels, batch.rows(), spec.num_classes())?;
    if j >= params.len() {
        return Err(Error::Input(format!("coordinate {j} out of range")));
    }
    let up = logits_dd(spec, params, j, eps, batch);
    let down = logits_dd(spec, params, j, -eps, batch);
    let mut total = 0.0;
    for ((zu, zd), &y) in up.iter().zip(&down).zip(labels) {
        let base: Vec<f64> = zd.iter().map(|z| z.to_f64()).collect();
        let dz: Vec<f64> = zu.iter().zip(zd).map(|(u, d)| u.add(d.neg()).to_f64()).collect();
        let m = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (b, d) in base.iter().zip(&dz) {
            let w = (b - m).exp();
            num += w * d.exp_m1();
            den += w;
        }
        total += (num / den).ln_1p() - dz[y];
    }
    Ok(total / batch.rows() as f64 / (2.0 * eps))
}

/// Largest coordinate-wise relative error `|a - b| / max(|a|, |b|, 1e-12)`
/// between the analytic gradient and central finite differences with step `eps`.
pub fn grad_check(
    spec: &NetSpec,
    params: &ParamVector,
    batch: &Matrix,
    labels: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Input(format!("eps must be positive, got {eps}")));
    }
    let (_, analytic) = loss_and_grad(spec, params, batch, labels)?;
    let mut worst = 0.0f64;
    for (j, &a) in analytic.as_slice().iter().enumerate() {
        let numeric = central_difference(spec, params, batch, labels, j, eps)?;
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
