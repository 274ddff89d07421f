//! Token-grid denoising network.
//!
//! A video is cut into tubelets, embedded, and passed through residual blocks
//! of depthwise 3x3x3 convolution followed by a feature MLP. Each block is
//! modulated (scale, shift) by a conditioning vector built from a timestep
//! embedding plus a class embedding. Modulation layers and the output head
//! start at zero, so an untrained network predicts zero noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_in_place, film, film_backward, join, patchify, silu, silu_backward, sinusoidal, unpatchify,
    DwConv3d, Embedding, GridShape, LayerNorm, Linear, Module, Param, Patch,
};
use crate::video::{Video, VideoShape};

/// Residual block: `x + fc2(silu(fc1(mod(norm(dwconv(x))))))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub dim: usize,
    pub conv: DwConv3d,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Default)]
pub struct BlockCache {
    x: Vec<f32>,
    ln: LayerNorm,
    modulated: Vec<f32>,
    pre: Vec<f32>,
    act: Vec<f32>,
}

impl Block {
    pub fn new(dim: usize, hidden: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dim,
            conv: DwConv3d::new(dim, dilation, rng),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::zeroed(hidden, dim),
        }
    }

    /// `mods` holds one `[scale | shift]` row per batch item, or `None` for no modulation.
    pub fn forward(&self, x: &[f32], mods: Option<&[f32]>, grid: GridShape, cache: Option<&mut BlockCache>) -> Vec<f32> {
        let a = self.conv.forward(x, grid);
        let mut ln = LayerNorm::default();
        let n = ln.forward(&a, self.dim);
        let m = match mods {
            Some(mods) => film(&n, mods, self.dim, grid.tokens_per_item()),
            None => n,
        };
        let pre = self.fc1.forward(&m);
        let act = silu(&pre);
        let mut y = self.fc2.forward(&act);
        add_in_place(&mut y, x);
        if let Some(c) = cache {
            *c = BlockCache { x: x.to_vec(), ln, modulated: m, pre, act };
        }
        y
    }

    /// Returns `(dx, dmods)`; `dmods` is empty without modulation.
    pub fn backward(&mut self, cache: &BlockCache, dy: &[f32], mods: Option<&[f32]>, grid: GridShape) -> (Vec<f32>, Vec<f32>) {
        let dact = self.fc2.backward(&cache.act, dy);
        let dpre = silu_backward(&cache.pre, &dact);
        let dm = self.fc1.backward(&cache.modulated, &dpre);
        let (dn, dmods) = match mods {
            Some(mods) => film_backward(&cache.ln.normed, mods, &dm, self.dim, grid.tokens_per_item()),
            None => (dm, Vec::new()),
        };
        let da = cache.ln.backward(&dn, self.dim);
        let mut dx = self.conv.backward(&cache.x, &da, grid);
        add_in_place(&mut dx, dy);
        (dx, dmods)
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub patch: Patch,
    /// Channels of the diffused video (3 for pixels, the codec's latent channels otherwise).
    pub channels: usize,
    pub dim: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub time_features: usize,
    /// Number of real classes; index `num_classes` is the null (unconditional) token.
    pub num_classes: usize,
    /// One entry per block.
    pub dilations: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            patch: Patch { frames: 2, height: 4, width: 4 },
            channels: 3,
            dim: 48,
            hidden: 96,
            cond_dim: 64,
            time_features: 32,
            num_classes: crate::toydata::NUM_CLASSES,
            dilations: vec![1, 2, 1, 2, 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub config: NetConfig,
    embed: Linear,
    time1: Linear,
    time2: Linear,
    classes: Embedding,
    blocks: Vec<Block>,
    block_mods: Vec<Linear>,
    head_mod: Linear,
    head: Linear,
    /// Per-feature gate on the input tokens, added to the head output. Lets
    /// the network pass low-noise residuals through the token bottleneck.
    skip_gate: Linear,
}

/// Activations kept for the backward pass.
#[derive(Debug, Default)]
pub struct NetCache {
    grid: Option<GridShape>,
    tokens: Vec<f32>,
    ids: Vec<usize>,
    tfeat: Vec<f32>,
    t1_pre: Vec<f32>,
    t1_act: Vec<f32>,
    cond_pre: Vec<f32>,
    cond: Vec<f32>,
    block_mods: Vec<Vec<f32>>,
    blocks: Vec<BlockCache>,
    head_ln: LayerNorm,
    head_mods: Vec<f32>,
    head_in: Vec<f32>,
    gates: Vec<f32>,
}

/// One network input: a noisy video, its class index and its noise position in `(0, 1]`.
pub struct NetInput<'a> {
    pub video: &'a Video,
    pub class_index: usize,
    pub time: f32,
}

impl DenoiserNet {
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.patch.features(config.channels);
        let (d, c) = (config.dim, config.cond_dim);
        Self {
            embed: Linear::new(p, d, &mut rng),
            time1: Linear::new(config.time_features, c, &mut rng),
            time2: Linear::new(c, c, &mut rng),
            classes: Embedding::new(config.num_classes + 1, c, &mut rng),
            blocks: config.dilations.iter().map(|&dl| Block::new(d, config.hidden, dl, &mut rng)).collect(),
            block_mods: config.dilations.iter().map(|_| Linear::zeroed(c, 2 * d)).collect(),
            head_mod: Linear::zeroed(c, 2 * d),
            head: Linear::zeroed(d, p),
            skip_gate: Linear::zeroed(c, p),
            config,
        }
    }

    pub fn null_index(&self) -> usize {
        self.config.num_classes
    }

    pub fn check_shape(&self, shape: VideoShape) -> Result<()> {
        if shape.channels != self.config.channels {
            return Err(Error::ShapeMismatch {
                left: format!("{} channels expected", self.config.channels),
                right: shape.to_string(),
            });
        }
        self.config.patch.check(shape)
    }

    pub fn forward(&self, inputs: &[NetInput<'_>], cache: Option<&mut NetCache>) -> Result<Vec<Video>> {
        let first = inputs.first().ok_or_else(|| Error::invalid("batch", "empty"))?;
        let shape = first.video.shape();
        for inp in inputs {
            inp.video.ensure_same_shape(first.video)?;
            if inp.class_index > self.config.num_classes {
                return Err(Error::invalid("class_id", format!("{} out of range", inp.class_index)));
            }
        }
        self.check_shape(shape)?;
        let cfg = &self.config;
        let (gf, gh, gw) = cfg.patch.grid(shape);
        let grid = GridShape { batch: inputs.len(), frames: gf, rows: gh, cols: gw };
        let (d, p) = (cfg.dim, cfg.patch.features(cfg.channels));

        let mut tokens = Vec::with_capacity(inputs.len() * grid.tokens_per_item() * p);
        for inp in inputs {
            tokens.extend(patchify(inp.video, cfg.patch)?);
        }
        let ids: Vec<usize> = inputs.iter().map(|i| i.class_index).collect();
        let tfeat: Vec<f32> = inputs.iter().flat_map(|i| sinusoidal(i.time, cfg.time_features)).collect();
        let t1_pre = self.time1.forward(&tfeat);
        let t1_act = silu(&t1_pre);
        let mut cond_pre = self.time2.forward(&t1_act);
        add_in_place(&mut cond_pre, &self.classes.forward(&ids));
        let cond = silu(&cond_pre);

        let mut h = self.embed.forward(&tokens);
        let mut block_mods = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (block, modl) in self.blocks.iter().zip(&self.block_mods) {
            let mods = modl.forward(&cond);
            let mut bc = BlockCache::default();
            h = block.forward(&h, Some(&mods), grid, cache.is_some().then_some(&mut bc));
            block_mods.push(mods);
            block_caches.push(bc);
        }
        let mut head_ln = LayerNorm::default();
        let n = head_ln.forward(&h, d);
        let head_mods = self.head_mod.forward(&cond);
        let head_in = film(&n, &head_mods, d, grid.tokens_per_item());
        let mut out = self.head.forward(&head_in);
        let gates = self.skip_gate.forward(&cond);
        let per_item = grid.tokens_per_item() * p;
        for (b, (o, x)) in out.chunks_mut(per_item).zip(tokens.chunks(per_item)).enumerate() {
            let g = &gates[b * p..(b + 1) * p];
            for (or, xr) in o.chunks_mut(p).zip(x.chunks(p)) {
                for k in 0..p {
                    or[k] += g[k] * xr[k];
                }
            }
        }

        let per = grid.tokens_per_item() * p;
        let videos = out.chunks(per).map(|c| unpatchify(c, shape, cfg.patch)).collect::<Result<Vec<_>>>()?;
        if let Some(c) = cache {
            *c = NetCache {
                grid: Some(grid),
                tokens,
                ids,
                tfeat,
                t1_pre,
                t1_act,
                cond_pre,
                cond,
                block_mods,
                blocks: block_caches,
                head_ln,
                head_mods,
                head_in,
                gates,
            };
        }
        Ok(videos)
    }

    /// Accumulates parameter gradients for upstream gradients on the outputs.
    pub fn backward(&mut self, cache: &NetCache, grads: &[Video]) -> Result<()> {
        let grid = cache.grid.ok_or_else(|| Error::Missing("forward cache".into()))?;
        let cfg = self.config.clone();
        let d = cfg.dim;
        let mut dout = Vec::new();
        for g in grads {
            dout.extend(patchify(g, cfg.patch)?);
        }
        let p = cfg.patch.features(cfg.channels);
        let per_item = grid.tokens_per_item() * p;
        let mut dgates = vec![0.0; cache.gates.len()];
        for (b, (dout_b, x_b)) in dout.chunks(per_item).zip(cache.tokens.chunks(per_item)).enumerate() {
            let dg = &mut dgates[b * p..(b + 1) * p];
            for (dr, xr) in dout_b.chunks(p).zip(x_b.chunks(p)) {
                for k in 0..p {
                    dg[k] += dr[k] * xr[k];
                }
            }
        }
        let dhead_in = self.head.backward(&cache.head_in, &dout);
        let (dn, dhead_mods) = film_backward(&cache.head_ln.normed, &cache.head_mods, &dhead_in, d, grid.tokens_per_item());
        let mut dcond = self.head_mod.backward(&cache.cond, &dhead_mods);
        add_in_place(&mut dcond, &self.skip_gate.backward(&cache.cond, &dgates));
        let mut dh = cache.head_ln.backward(&dn, d);
        for i in (0..self.blocks.len()).rev() {
            let (dx, dmods) = self.blocks[i].backward(&cache.blocks[i], &dh, Some(&cache.block_mods[i]), grid);
            add_in_place(&mut dcond, &self.block_mods[i].backward(&cache.cond, &dmods));
            dh = dx;
        }
        self.embed.backward(&cache.tokens, &dh);
        let dcond_pre = silu_backward(&cache.cond_pre, &dcond);
        self.classes.backward(&cache.ids, &dcond_pre);
        let dt1_act = self.time2.backward(&cache.t1_act, &dcond_pre);
        let dt1_pre = silu_backward(&cache.t1_pre, &dt1_act);
        self.time1.backward(&cache.tfeat, &dt1_pre);
        Ok(())
    }
}

impl Module for DenoiserNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.time1.visit(&join(prefix, "time1"), f);
        self.time2.visit(&join(prefix, "time2"), f);
        self.classes.visit(&join(prefix, "classes"), f);
        for (i, (b, m)) in self.blocks.iter().zip(&self.block_mods).enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
            m.visit(&join(prefix, &format!("block_mods.{i}")), f);
        }
        self.head_mod.visit(&join(prefix, "head_mod"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.skip_gate.visit(&join(prefix, "skip_gate"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.time1.visit_mut(&join(prefix, "time1"), f);
        self.time2.visit_mut(&join(prefix, "time2"), f);
        self.classes.visit_mut(&join(prefix, "classes"), f);
        for (i, (b, m)) in self.blocks.iter_mut().zip(&mut self.block_mods).enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
            m.visit_mut(&join(prefix, &format!("block_mods.{i}")), f);
        }
        self.head_mod.visit_mut(&join(prefix, "head_mod"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.skip_gate.visit_mut(&join(prefix, "skip_gate"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_close, numeric};
    use crate::nn::zero_grads;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small() -> NetConfig {
        NetConfig {
            patch: Patch { frames: 1, height: 2, width: 2 },
            channels: 2,
            dim: 4,
            hidden: 6,
            cond_dim: 5,
            time_features: 4,
            num_classes: 2,
            dilations: vec![1, 2],
        }
    }

    fn randomize(net: &mut DenoiserNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.visit_mut("", &mut |_, p| {
            for v in &mut p.value {
                *v = 0.3 * rng.sample::<f32, _>(StandardNormal);
            }
        });
    }

    #[test]
    fn untrained_net_predicts_zero() {
        let net = DenoiserNet::new(NetConfig::default(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Video::randn(VideoShape::new(4, 3, 8, 8), &mut rng);
        let out = net.forward(&[NetInput { video: &v, class_index: 1, time: 0.5 }], None).unwrap();
        assert!(out[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = DenoiserNet::new(NetConfig::default(), 0);
        let v = Video::zeros(VideoShape::new(3, 3, 8, 8));
        assert!(net.forward(&[NetInput { video: &v, class_index: 0, time: 0.5 }], None).is_err());
        let v = Video::zeros(VideoShape::new(2, 1, 8, 8));
        assert!(net.forward(&[NetInput { video: &v, class_index: 0, time: 0.5 }], None).is_err());
    }

    #[test]
    fn full_network_gradient_check() {
        let mut net = DenoiserNet::new(small(), 3);
        randomize(&mut net, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = VideoShape::new(2, 2, 4, 4);
        let xa = Video::randn(shape, &mut rng);
        let xb = Video::randn(shape, &mut rng);
        let wa = Video::randn(shape, &mut rng);
        let wb = Video::randn(shape, &mut rng);
        let loss = |net: &DenoiserNet| -> f64 {
            let out = net
                .forward(
                    &[
                        NetInput { video: &xa, class_index: 0, time: 0.3 },
                        NetInput { video: &xb, class_index: 2, time: 0.9 },
                    ],
                    None,
                )
                .unwrap();
            out[0].data().iter().zip(wa.data()).chain(out[1].data().iter().zip(wb.data())).map(|(a, b)| (a * b) as f64).sum()
        };
        let mut cache = NetCache::default();
        net.forward(
            &[
                NetInput { video: &xa, class_index: 0, time: 0.3 },
                NetInput { video: &xb, class_index: 2, time: 0.9 },
            ],
            Some(&mut cache),
        )
        .unwrap();
        zero_grads(&mut net);
        net.backward(&cache, &[wa.clone(), wb.clone()]).unwrap();

        let mut names = Vec::new();
        net.visit("", &mut |n, p| names.push((n.to_string(), p.len())));
        for (name, len) in names {
            for i in (0..len).step_by(len.div_ceil(3)) {
                let mut analytic = 0.0;
                let mut value = Vec::new();
                net.visit("", &mut |n, p| {
                    if n == name {
                        analytic = p.grad[i] as f64;
                        value = p.value.clone();
                    }
                });
                let mut f = |v: &[f32]| {
                    let mut probe = net.clone();
                    probe.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value = v.to_vec();
                        }
                    });
                    loss(&probe)
                };
                assert_close(analytic, numeric(&mut f, &value, i, 1e-2), &format!("{name}[{i}]"));
            }
        }
    }
}

#[cfg(test)]
mod batch_tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn batched_forward_matches_single_items() {
        let mut net = DenoiserNet::new(NetConfig::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        net.visit_mut("", &mut |_, p| {
            for v in &mut p.value {
                *v = 0.1 * rng.sample::<f32, _>(StandardNormal);
            }
        });
        let shape = VideoShape::new(4, 3, 8, 8);
        let a = Video::randn(shape, &mut rng);
        let b = Video::randn(shape, &mut rng);
        let both = net
            .forward(&[NetInput { video: &a, class_index: 0, time: 0.2 }, NetInput { video: &b, class_index: 2, time: 0.7 }], None)
            .unwrap();
        let sa = net.forward(&[NetInput { video: &a, class_index: 0, time: 0.2 }], None).unwrap();
        let sb = net.forward(&[NetInput { video: &b, class_index: 2, time: 0.7 }], None).unwrap();
        assert!(both[0].max_abs_diff(&sa[0]).unwrap() < 1e-4);
        assert!(both[1].max_abs_diff(&sb[0]).unwrap() < 1e-4);
    }
}
