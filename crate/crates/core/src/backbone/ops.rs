//! Row-wise primitives with their hand-derived backward passes.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::Real;

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub(crate) fn layer_norm<F: Real>(
    x: &Array2<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array2<F>, LnCache<F>) {
    let n = F::of(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / n;
        let is = F::one() / (var + F::of(LN_EPS)).sqrt();
        row.mapv_inplace(|v| v * is);
        *s = is;
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    gamma: &Array1<F>,
    cache: &LnCache<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let n = F::of(dy.ncols() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xh), &is) in dx
        .outer_iter_mut()
        .zip(cache.xhat.outer_iter())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|d, &h| *d = is * (*d - mean_d - h * mean_dx));
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu<F: Real>(z: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (z + F::of(GELU_A) * z * z * z);
    half * z * (F::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(z: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (z + F::of(GELU_A) * z * z * z);
    let th = inner.tanh();
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * z * z);
    half * (F::one() + th) + half * z * (F::one() - th * th) * dinner
}

pub(crate) fn softmax_rows_inplace<F: Real>(s: &mut ArrayViewMut2<F>) {
    for mut row in s.outer_iter_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `dS = P * (dP - rowsum(dP * P))`, written over `dp`.
pub(crate) fn softmax_rows_backward<F: Real>(p: &ArrayView2<F>, dp: &mut Array2<F>) {
    for (mut d, pr) in dp.outer_iter_mut().zip(p.outer_iter()) {
        let dot = d.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<F>();
        Zip::from(&mut d)
            .and(&pr)
            .for_each(|g, &pv| *g = pv * (*g - dot));
    }
}
