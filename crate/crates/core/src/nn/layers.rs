use rand_chacha::ChaCha8Rng;

use super::{gemm, join, Module, Param};

#[derive(Debug, Clone)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / inputs as f32).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::normal(&[inputs, outputs], std, rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: Param::zeros(&[inputs, outputs]), bias: Param::zeros(&[outputs]) }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.inputs;
        let mut y = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            rows,
            self.inputs,
            self.outputs,
            x,
            (self.inputs as isize, 1),
            &self.weight.value,
            (self.outputs as isize, 1),
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[f32], dy: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.inputs;
        let (i, o) = (self.inputs, self.outputs);
        gemm(i, rows, o, x, (1, i as isize), dy, (o as isize, 1), 1.0, &mut self.weight.grad);
        for r in dy.chunks(o) {
            for (g, v) in self.bias.grad.iter_mut().zip(r) {
                *g += v;
            }
        }
        let mut dx = vec![0.0; rows * i];
        gemm(rows, o, i, dy, (o as isize, 1), &self.weight.value, (1, o as isize), 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Parameter-free normalisation over the feature axis.
#[derive(Debug, Clone, Default)]
pub struct LayerNorm {
    /// Normalised output from the last forward pass.
    pub normed: Vec<f32>,
    rstd: Vec<f32>,
}

impl LayerNorm {
    const EPS: f32 = 1e-5;

    pub fn forward(&mut self, x: &[f32], dim: usize) -> Vec<f32> {
        let rows = x.len() / dim;
        let mut y = vec![0.0; x.len()];
        self.rstd = Vec::with_capacity(rows);
        for (xr, yr) in x.chunks(dim).zip(y.chunks_mut(dim)) {
            let mean = xr.iter().sum::<f32>() / dim as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / dim as f32;
            let r = 1.0 / (var + Self::EPS).sqrt();
            for (o, v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * r;
            }
            self.rstd.push(r);
        }
        self.normed = y.clone();
        y
    }

    /// Stateless inference path.
    pub fn apply(x: &[f32], dim: usize) -> Vec<f32> {
        LayerNorm::default().forward(x, dim)
    }

    pub fn backward(&self, dy: &[f32], dim: usize) -> Vec<f32> {
        let mut dx = vec![0.0; dy.len()];
        for (r, ((g, n), out)) in dy.chunks(dim).zip(self.normed.chunks(dim)).zip(dx.chunks_mut(dim)).enumerate() {
            let mg = g.iter().sum::<f32>() / dim as f32;
            let mgn = g.iter().zip(n).map(|(a, b)| a * b).sum::<f32>() / dim as f32;
            let rs = self.rstd[r];
            for d in 0..dim {
                out[d] = rs * (g[d] - mg - n[d] * mgn);
            }
        }
        dx
    }
}

/// Token grid `[batch][frames][rows][cols]`, feature count carried separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub batch: usize,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn tokens_per_item(&self) -> usize {
        self.frames * self.rows * self.cols
    }
}

/// Depthwise 3x3x3 convolution over a channel-last token grid. Rows and
/// columns wrap around (toroidal); the frame axis is zero padded.
#[derive(Debug, Clone)]
pub struct DwConv3d {
    pub dim: usize,
    pub dilation: usize,
    /// `[27, dim]`, tap index `(kt * 3 + ky) * 3 + kx`.
    pub weight: Param,
    pub bias: Param,
}

impl DwConv3d {
    pub fn new(dim: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dim,
            dilation,
            weight: Param::normal(&[27, dim], (1.0f32 / 27.0).sqrt(), rng),
            bias: Param::zeros(&[dim]),
        }
    }

    fn taps(&self) -> Vec<(usize, isize, isize, isize)> {
        let d = self.dilation as isize;
        let mut taps = Vec::with_capacity(27);
        for kt in -1..=1isize {
            for ky in -1..=1isize {
                for kx in -1..=1isize {
                    let k = ((kt + 1) * 9 + (ky + 1) * 3 + (kx + 1)) as usize;
                    taps.push((k, kt * d, ky * d, kx * d));
                }
            }
        }
        taps
    }

    #[allow(clippy::too_many_arguments)]
    fn source(g: GridShape, b: usize, f: usize, i: usize, j: usize, dt: isize, dy: isize, dx: isize) -> Option<usize> {
        let sf = f as isize + dt;
        if sf < 0 || sf >= g.frames as isize {
            return None;
        }
        let si = (i as isize + dy).rem_euclid(g.rows as isize) as usize;
        let sj = (j as isize + dx).rem_euclid(g.cols as isize) as usize;
        Some(((b * g.frames + sf as usize) * g.rows + si) * g.cols + sj)
    }

    pub fn forward(&self, x: &[f32], g: GridShape) -> Vec<f32> {
        let dim = self.dim;
        let taps = self.taps();
        let mut y = vec![0.0; x.len()];
        for b in 0..g.batch {
            for f in 0..g.frames {
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        let out = ((b * g.frames + f) * g.rows + i) * g.cols + j;
                        let yr = &mut y[out * dim..(out + 1) * dim];
                        yr.copy_from_slice(&self.bias.value);
                        for &(k, dt, dy, dx) in &taps {
                            if let Some(src) = Self::source(g, b, f, i, j, dt, dy, dx) {
                                let w = &self.weight.value[k * dim..(k + 1) * dim];
                                let xr = &x[src * dim..(src + 1) * dim];
                                for d in 0..dim {
                                    yr[d] += w[d] * xr[d];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32], g: GridShape) -> Vec<f32> {
        let dim = self.dim;
        let taps = self.taps();
        let mut dx = vec![0.0; x.len()];
        for b in 0..g.batch {
            for f in 0..g.frames {
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        let out = ((b * g.frames + f) * g.rows + i) * g.cols + j;
                        let gr = &dy[out * dim..(out + 1) * dim];
                        for d in 0..dim {
                            self.bias.grad[d] += gr[d];
                        }
                        for &(k, dt, ddy, ddx) in &taps {
                            if let Some(src) = Self::source(g, b, f, i, j, dt, ddy, ddx) {
                                let w = &self.weight.value[k * dim..(k + 1) * dim];
                                let wg = &mut self.weight.grad[k * dim..(k + 1) * dim];
                                let xr = &x[src * dim..(src + 1) * dim];
                                let dxr = &mut dx[src * dim..(src + 1) * dim];
                                for d in 0..dim {
                                    wg[d] += xr[d] * gr[d];
                                    dxr[d] += w[d] * gr[d];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Module for DwConv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub dim: usize,
    pub table: Param,
}

impl Embedding {
    pub fn new(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { dim, table: Param::normal(&[count, dim], 1.0, rng) }
    }

    pub fn count(&self) -> usize {
        self.table.shape[0]
    }

    pub fn forward(&self, ids: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            out.extend_from_slice(&self.table.value[id * self.dim..(id + 1) * self.dim]);
        }
        out
    }

    pub fn backward(&mut self, ids: &[usize], dy: &[f32]) {
        for (&id, g) in ids.iter().zip(dy.chunks(self.dim)) {
            for (t, v) in self.table.grad[id * self.dim..(id + 1) * self.dim].iter_mut().zip(g) {
                *t += v;
            }
        }
    }
}

impl Module for Embedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "table"), &self.table);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}
