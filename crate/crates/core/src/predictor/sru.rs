//! Simple Recurrent Unit cells and stacks.
//!
//! ```text
//! x'_t = W x_t
//! f_t  = σ(W_f x_t + b_f)
//! r_t  = σ(W_r x_t + b_r)
//! c_t  = f_t ⊙ c_{t-1} + (1 − f_t) ⊙ x'_t
//! h_t  = r_t ⊙ tanh(c_t) + (1 − r_t) ⊙ x_t
//! ```
//!
//! The three projections only depend on `x_t`, so a layer computes them for
//! the whole sequence with one matrix product each; only the `c_t` update is
//! sequential.

use ndarray::{Array1, Array2, Axis, Zip};

use super::SruLayer;
use crate::error::{Error, Result};

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One time step of one layer. Returns `(h_t, c_t)`.
pub fn sru_cell(
    x: &Array1<f64>,
    c_prev: &Array1<f64>,
    layer: &SruLayer,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let d = layer.w.nrows();
    if x.len() != d || c_prev.len() != d {
        return Err(Error::Config(format!(
            "sru cell of width {d} got input {} and state {}",
            x.len(),
            c_prev.len()
        )));
    }
    let projected = layer.w.dot(x);
    let forget = (layer.w_f.dot(x) + &layer.b_f).mapv(sigmoid);
    let reset = (layer.w_r.dot(x) + &layer.b_r).mapv(sigmoid);
    let c = &forget * c_prev + &(forget.mapv(|f| 1.0 - f) * &projected);
    let h = &reset * &c.mapv(f64::tanh) + &(reset.mapv(|r| 1.0 - r) * x);
    if h.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sru cell produced a non-finite value".into()));
    }
    Ok((h, c))
}

/// Intermediate values of one layer over a sequence, kept for backprop.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x: Array2<f64>,
    pub projected: Array2<f64>,
    pub forget: Array2<f64>,
    pub reset: Array2<f64>,
    pub c: Array2<f64>,
    pub tanh_c: Array2<f64>,
    pub h: Array2<f64>,
}

/// Runs one layer over a `T × d` sequence starting from `c = 0`.
pub fn layer_forward(x: &Array2<f64>, layer: &SruLayer) -> Result<LayerCache> {
    let (steps, d) = x.dim();
    if d != layer.w.nrows() {
        return Err(Error::Config(format!(
            "sequence width {d} does not match layer width {}",
            layer.w.nrows()
        )));
    }
    let projected = x.dot(&layer.w.t());
    let forget = (x.dot(&layer.w_f.t()) + &layer.b_f).mapv(sigmoid);
    let reset = (x.dot(&layer.w_r.t()) + &layer.b_r).mapv(sigmoid);

    let mut c = Array2::zeros((steps, d));
    let mut prev = Array1::<f64>::zeros(d);
    for t in 0..steps {
        let mut row = c.row_mut(t);
        Zip::from(&mut row)
            .and(&prev)
            .and(forget.row(t))
            .and(projected.row(t))
            .for_each(|c, &cp, &f, &p| *c = f * cp + (1.0 - f) * p);
        prev.assign(&row);
    }
    let tanh_c = c.mapv(f64::tanh);
    let mut h = Array2::zeros((steps, d));
    Zip::from(&mut h)
        .and(&reset)
        .and(&tanh_c)
        .and(x)
        .for_each(|h, &r, &g, &x| *h = r * g + (1.0 - r) * x);

    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sru layer produced a non-finite value".into()));
    }
    Ok(LayerCache {
        x: x.clone(),
        projected,
        forget,
        reset,
        c,
        tanh_c,
        h,
    })
}

/// Gradients of one layer plus the gradient w.r.t. its input sequence.
pub fn layer_backward(
    cache: &LayerCache,
    layer: &SruLayer,
    dh: &Array2<f64>,
) -> (Array2<f64>, SruLayer) {
    let (steps, d) = cache.x.dim();
    let mut d_proj = Array2::zeros((steps, d));
    let mut d_zf = Array2::zeros((steps, d));
    let mut d_zr = Array2::zeros((steps, d));
    let mut dx_direct = Array2::zeros((steps, d));
    let mut dc_carry = Array1::<f64>::zeros(d);

    for t in (0..steps).rev() {
        for j in 0..d {
            let dh_t = dh[[t, j]];
            let r = cache.reset[[t, j]];
            let f = cache.forget[[t, j]];
            let g = cache.tanh_c[[t, j]];
            let x = cache.x[[t, j]];
            let c_prev = if t > 0 { cache.c[[t - 1, j]] } else { 0.0 };

            let dc = dh_t * r * (1.0 - g * g) + dc_carry[j];
            d_zr[[t, j]] = dh_t * (g - x) * r * (1.0 - r);
            d_zf[[t, j]] = dc * (c_prev - cache.projected[[t, j]]) * f * (1.0 - f);
            d_proj[[t, j]] = dc * (1.0 - f);
            dx_direct[[t, j]] = dh_t * (1.0 - r);
            dc_carry[j] = dc * f;
        }
    }

    let dx = dx_direct + d_proj.dot(&layer.w) + d_zf.dot(&layer.w_f) + d_zr.dot(&layer.w_r);
    let grads = SruLayer {
        w: d_proj.t().dot(&cache.x),
        w_f: d_zf.t().dot(&cache.x),
        w_r: d_zr.t().dot(&cache.x),
        b_f: d_zf.sum_axis(Axis(0)),
        b_r: d_zr.sum_axis(Axis(0)),
    };
    (dx, grads)
}

/// Runs the whole stack; layer `ℓ + 1` consumes the hidden sequence of `ℓ`.
pub fn sru_forward_cached(x: &Array2<f64>, layers: &[SruLayer]) -> Result<Vec<LayerCache>> {
    if x.nrows() == 0 {
        return Err(Error::Config("sru forward over an empty sequence".into()));
    }
    let mut caches: Vec<LayerCache> = Vec::with_capacity(layers.len());
    for layer in layers {
        let input = caches.last().map_or(x, |c| &c.h);
        let cache = layer_forward(input, layer)?;
        caches.push(cache);
    }
    Ok(caches)
}

/// Top-layer hidden vector for every token of the sequence.
pub fn sru_forward(x: &Array2<f64>, layers: &[SruLayer]) -> Result<Array2<f64>> {
    let caches = sru_forward_cached(x, layers)?;
    Ok(caches.last().map_or_else(|| x.clone(), |c| c.h.clone()))
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_layer(d: usize, rng: &mut ChaCha8Rng) -> SruLayer {
        let mut m = || Array2::from_shape_simple_fn((d, d), || rng.random_range(-1.0..1.0));
        let (w, w_f, w_r) = (m(), m(), m());
        SruLayer {
            w,
            w_f,
            w_r,
            b_f: Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0)),
            b_r: Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn zero_input_and_state_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = random_layer(4, &mut rng);
        layer.b_f.fill(0.0);
        layer.b_r.fill(0.0);
        let (h, c) = sru_cell(&Array1::zeros(4), &Array1::zeros(4), &layer).unwrap();
        assert_eq!(h, Array1::<f64>::zeros(4));
        assert_eq!(c, Array1::<f64>::zeros(4));
    }

    #[test]
    fn saturated_forget_gate_keeps_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = random_layer(3, &mut rng);
        layer.w_f.fill(0.0);
        layer.b_f.fill(50.0);
        let c_prev = array![0.3, -0.8, 1.2];
        let x = array![0.5, 0.25, -1.0];
        let (_, c) = sru_cell(&x, &c_prev, &layer).unwrap();
        for (a, b) in c.iter().zip(c_prev.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_matches_scalar_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(3, &mut rng);
        let x = array![0.4, -0.9, 0.2];
        let c_prev = array![0.1, 0.5, -0.3];
        let (h, c) = sru_cell(&x, &c_prev, &layer).unwrap();
        for i in 0..3 {
            let mut xp = 0.0;
            let mut zf = layer.b_f[i];
            let mut zr = layer.b_r[i];
            for j in 0..3 {
                xp += layer.w[[i, j]] * x[j];
                zf += layer.w_f[[i, j]] * x[j];
                zr += layer.w_r[[i, j]] * x[j];
            }
            let f = 1.0 / (1.0 + (-zf).exp());
            let r = 1.0 / (1.0 + (-zr).exp());
            let ci = f * c_prev[i] + (1.0 - f) * xp;
            let hi = r * ci.tanh() + (1.0 - r) * x[i];
            assert!((c[i] - ci).abs() < 1e-12);
            assert!((h[i] - hi).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_single_layer_equals_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(5, &mut rng);
        let x = Array2::from_shape_simple_fn((1, 5), || rng.random_range(-1.0..1.0));
        let h = sru_forward(&x, std::slice::from_ref(&layer)).unwrap();
        let (hc, _) = sru_cell(&x.row(0).to_owned(), &Array1::zeros(5), &layer).unwrap();
        for (a, b) in h.row(0).iter().zip(hc.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_parameters_halve_the_input() {
        let layer = SruLayer::zeros(4);
        let x = array![[0.2, -0.4, 1.0, 0.6], [1.0, 0.0, -2.0, 0.5]];
        let h = sru_forward(&x, &[layer]).unwrap();
        assert_eq!(h, x.mapv(|v| 0.5 * v));
    }

    #[test]
    fn stack_matches_unrolled_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layers = vec![random_layer(4, &mut rng), random_layer(4, &mut rng)];
        let x = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let h = sru_forward(&x, &layers).unwrap();

        let mut seq: Vec<Array1<f64>> = x.rows().into_iter().map(|r| r.to_owned()).collect();
        for layer in &layers {
            let mut c = Array1::zeros(4);
            let mut out = Vec::new();
            for xt in &seq {
                let (ht, ct) = sru_cell(xt, &c, layer).unwrap();
                c = ct;
                out.push(ht);
            }
            seq = out;
        }
        for (t, expected) in seq.iter().enumerate() {
            for j in 0..4 {
                assert!((h[[t, j]] - expected[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_stays_within_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let layer = random_layer(6, &mut rng);
            let x = Array2::from_shape_simple_fn((20, 6), || rng.random_range(-1.0..1.0));
            let cache = layer_forward(&x, &layer).unwrap();
            let bound = cache.projected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(cache.c.iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }
}
