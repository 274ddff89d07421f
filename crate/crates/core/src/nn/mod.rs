//! Minimal single-threaded layers with hand-written backward passes.
//!
//! Activations are row-major `[rows, features]` slices. Token grids used by
//! [`DwConv3d`] are laid out channel-last as `[batch][frame][row][col][feature]`.
//! Gradients accumulate into each [`Param`] until [`zero_grads`] is called.

mod adam;
mod layers;
mod patch;

pub use adam::AdamW;
pub use layers::{DwConv3d, Embedding, GridShape, LayerNorm, Linear};
pub use patch::{patchify, unpatchify, Patch};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::NamedTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub(crate) m: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![0.0; n], grad: vec![0.0; n], m: Vec::new(), v: Vec::new() }
    }

    pub fn normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = std * rng.sample::<f32, _>(StandardNormal);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads(m: &mut dyn Module) {
    m.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = 0.0));
}

pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.len());
    n
}

/// Overwrite every parameter value with zero.
pub fn zero_values(m: &mut dyn Module) {
    m.visit_mut("", &mut |_, p| p.value.iter_mut().for_each(|v| *v = 0.0));
}

/// Parameter values as named tensors, in visiting order.
pub fn export_params(m: &dyn Module, prefix: &str) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, p| {
        out.push(NamedTensor { name: name.to_string(), shape: p.shape.clone(), data: p.value.clone() })
    });
    out
}

/// Loads every parameter of `m` from `tensors`; names and shapes must match.
pub fn import_params(m: &mut dyn Module, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
    let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut err = None;
    m.visit_mut(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match by_name.get(name) {
            None => err = Some(Error::Missing(format!("parameter {name}"))),
            Some(t) if t.shape != p.shape => {
                err = Some(Error::ShapeMismatch { left: format!("{name} {:?}", p.shape), right: format!("{:?}", t.shape) })
            }
            Some(t) => p.value.clone_from(&t.data),
        }
    });
    err.map_or(Ok(()), Err)
}

/// `c = a * b + beta * c` for row-major operands given by explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose extents cover every (row, col)
    // reached through the given strides; `c` is checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input and the upstream gradient.
pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

/// Feature-wise modulation `y = x * (1 + scale) + shift`, one (scale, shift)
/// row per group of `rows_per_group` consecutive rows. `mods` is `[groups, 2 * dim]`
/// with scales first.
pub fn film(x: &[f32], mods: &[f32], dim: usize, rows_per_group: usize) -> Vec<f32> {
    let mut y = vec![0.0; x.len()];
    for (r, (xr, yr)) in x.chunks(dim).zip(y.chunks_mut(dim)).enumerate() {
        let g = r / rows_per_group;
        let (s, sh) = mods[g * 2 * dim..(g + 1) * 2 * dim].split_at(dim);
        for d in 0..dim {
            yr[d] = xr[d] * (1.0 + s[d]) + sh[d];
        }
    }
    y
}

/// Returns `(dx, dmods)`.
pub fn film_backward(
    x: &[f32],
    mods: &[f32],
    dy: &[f32],
    dim: usize,
    rows_per_group: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0; x.len()];
    let mut dm = vec![0.0; mods.len()];
    for (r, ((xr, gr), dxr)) in x.chunks(dim).zip(dy.chunks(dim)).zip(dx.chunks_mut(dim)).enumerate() {
        let g = r / rows_per_group;
        let s = &mods[g * 2 * dim..g * 2 * dim + dim];
        let dmg = &mut dm[g * 2 * dim..(g + 1) * 2 * dim];
        for d in 0..dim {
            dxr[d] = gr[d] * (1.0 + s[d]);
            dmg[d] += gr[d] * xr[d];
            dmg[dim + d] += gr[d];
        }
    }
    (dx, dm)
}

/// Sinusoidal features of a scalar position in `[0, 1]`.
pub fn sinusoidal(pos: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let scaled = pos * 1000.0;
    for k in 0..half {
        let freq = (-(10000f32.ln()) * k as f32 / half as f32).exp();
        out.push((scaled * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10000f32.ln()) * k as f32 / half as f32).exp();
        out.push((scaled * freq).cos());
    }
    out
}

pub fn add_in_place(a: &mut [f32], b: &[f32]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    /// Central finite difference of a scalar function w.r.t. one coordinate.
    pub fn numeric(f: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], i: usize, h: f32) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h as f64)
    }

    pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let tol = 2e-2 * (1.0 + numeric.abs().max(analytic.abs()));
        assert!(
            (analytic - numeric).abs() < tol,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    #[test]
    fn silu_gradient() {
        let x = rand_vec(8, 1);
        let w = rand_vec(8, 2);
        let dy = w.clone();
        let dx = silu_backward(&x, &dy);
        let mut f = |v: &[f32]| silu(v).iter().zip(&w).map(|(a, b)| (a * b) as f64).sum::<f64>();
        for i in 0..8 {
            assert_close(dx[i] as f64, numeric(&mut f, &x, i, 1e-2), "silu");
        }
    }

    #[test]
    fn film_gradient() {
        let (dim, rows) = (3, 4);
        let x = rand_vec(dim * rows, 3);
        let mods = rand_vec(2 * 2 * dim, 4);
        let w = rand_vec(dim * rows, 5);
        let (dx, dm) = film_backward(&x, &mods, &w, dim, 2);
        let mut fx = |v: &[f32]| film(v, &mods, dim, 2).iter().zip(&w).map(|(a, b)| (a * b) as f64).sum::<f64>();
        for i in 0..x.len() {
            assert_close(dx[i] as f64, numeric(&mut fx, &x, i, 1e-2), "film dx");
        }
        let mut fm = |v: &[f32]| film(&x, v, dim, 2).iter().zip(&w).map(|(a, b)| (a * b) as f64).sum::<f64>();
        for i in 0..mods.len() {
            assert_close(dm[i] as f64, numeric(&mut fm, &mods, i, 1e-2), "film dmods");
        }
    }

    #[test]
    fn gemm_transposed_operands() {
        // a^T (2x3 stored as 3x2) times b (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [1.0 + 5.0, 3.0 + 5.0, 2.0 + 6.0, 4.0 + 6.0]);
    }
}
