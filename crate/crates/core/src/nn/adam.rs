use super::{Module, Param};

/// AdamW with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    step: u32,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0), step: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, module: &mut dyn Module) -> f32 {
        let mut sq = 0.0f64;
        module.visit("", &mut |_, p| sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>());
        let norm = sq.sqrt() as f32;
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        module.visit_mut("", &mut |_, p: &mut Param| {
            if p.m.is_empty() {
                p.m = vec![0.0; p.len()];
                p.v = vec![0.0; p.len()];
            }
            for i in 0..p.value.len() {
                let g = p.grad[i] * scale;
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.value[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.value[i]);
            }
        });
        norm
    }
}
