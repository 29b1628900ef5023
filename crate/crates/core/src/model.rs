//! Encoder, classifier head and projection head with hand-written reverse
//! mode, AdamW, and the EMA teacher.
//!
//! All parameters of a model live in one flat `Vec<f64>`; layers are views
//! into it. Optimizer moments, EMA and checkpoints all work on that vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize, FeatureVector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    /// Encoder widths; the last one is the latent size.
    pub hidden: Vec<usize>,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl ModelShape {
    pub fn latent_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.n_classes));
        dims.push((prev, self.proj_hidden));
        dims.push((self.proj_hidden, self.embed_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Dense {
    n_in: usize,
    n_out: usize,
    offset: usize,
}

impl Dense {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.n_in * self.n_out]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.n_in * self.n_out;
        &params[start..start + self.n_out]
    }

    fn forward(&self, params: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
        let w = self.weights(params);
        let b = self.bias(params);
        (0..self.n_out)
            .map(|o| {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                let z = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }

    /// Accumulates parameter gradients for upstream `gy` and returns the
    /// gradient with respect to the input.
    fn backward(&self, params: &[f64], x: &[f64], gy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = self.weights(params);
        let mut gx = vec![0.0; self.n_in];
        let (gw, gb) = grads[self.offset..self.offset + self.n_in * self.n_out + self.n_out]
            .split_at_mut(self.n_in * self.n_out);
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut gw[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        gx
    }
}

fn relu_mask(grad: &mut [f64], activation: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptModel {
    shape: ModelShape,
    encoder: Vec<Dense>,
    head: Dense,
    proj1: Dense,
    proj2: Dense,
    params: Vec<f64>,
    #[serde(skip)]
    version: u64,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    encoder_out: Vec<Vec<f64>>,
    proj_hidden: Vec<f64>,
    embedding: Option<FeatureVector>,
    raw_norm: f64,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// `None` when the projection output is (numerically) zero.
    pub embedding: Option<FeatureVector>,
    pub cache: ForwardCache,
}

impl Forward {
    pub fn unit(&self) -> Result<&FeatureVector> {
        self.embedding
            .as_ref()
            .ok_or_else(|| Error::Degenerate("projection output has zero norm".into()))
    }
}

impl AdaptModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        let mut model = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Dense> = model.layers().collect();
        for layer in layers {
            let a = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut model.params[layer.offset..layer.offset + layer.n_in * layer.n_out] {
                *w = rng.random_range(-a..=a);
            }
        }
        model
    }

    pub fn zeros(shape: ModelShape) -> Self {
        let dims = shape.layer_dims();
        let mut offset = 0;
        let mut layers = Vec::with_capacity(dims.len());
        for (n_in, n_out) in dims {
            layers.push(Dense { n_in, n_out, offset });
            offset += n_in * n_out + n_out;
        }
        let proj2 = layers.pop().expect("projection output layer");
        let proj1 = layers.pop().expect("projection hidden layer");
        let head = layers.pop().expect("classifier head");
        AdaptModel {
            shape,
            encoder: layers,
            head,
            proj1,
            proj2,
            params: vec![0.0; offset],
            version: 0,
        }
    }

    fn layers(&self) -> impl Iterator<Item = Dense> + '_ {
        self.encoder
            .iter()
            .copied()
            .chain([self.head, self.proj1, self.proj2])
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version = self.version.wrapping_add(1);
        &mut self.params
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.input_dim {
            return Err(Error::contract(format!(
                "input dim {} != model input dim {}",
                x.len(),
                self.shape.input_dim
            )));
        }
        Ok(())
    }

    fn encode(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut outs = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let input = outs.last().map_or(x, |v: &Vec<f64>| v.as_slice());
            let out = layer.forward(&self.params, input, true);
            outs.push(out);
        }
        outs
    }

    /// Classifier logits only.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let enc = self.encode(x);
        let latent = enc.last().map_or(x, Vec::as_slice);
        Ok(self.head.forward(&self.params, latent, false))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let encoder_out = self.encode(x);
        let latent = encoder_out.last().map_or(x, Vec::as_slice);
        let logits = self.head.forward(&self.params, latent, false);
        let proj_hidden = self.proj1.forward(&self.params, latent, true);
        let raw = self.proj2.forward(&self.params, &proj_hidden, false);
        let (embedding, raw_norm) = match l2_normalize(&raw) {
            Ok((f, n)) => (Some(f), n),
            Err(Error::Degenerate(_)) => (None, 0.0),
            Err(e) => return Err(e),
        };
        Ok(Forward {
            logits,
            embedding: embedding.clone(),
            cache: ForwardCache {
                input: x.to_vec(),
                encoder_out,
                proj_hidden,
                embedding,
                raw_norm,
                version: self.version,
            },
        })
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradients with respect to the logits and the unit-norm embedding are
    /// given. The embedding gradient goes through `(I - f f^T) / |v|` first.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grad_embedding: Option<&[f64]>,
        grads: &mut [f64],
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::contract("forward cache is stale"));
        }
        if grads.len() != self.params.len() || grad_logits.len() != self.shape.n_classes {
            return Err(Error::contract("gradient buffer shape mismatch"));
        }
        let latent = cache.encoder_out.last().map_or(cache.input.as_slice(), Vec::as_slice);
        let mut g_latent = self.head.backward(&self.params, latent, grad_logits, grads);

        if let Some(gf) = grad_embedding {
            if gf.len() != self.shape.embed_dim {
                return Err(Error::contract("embedding gradient has wrong dimension"));
            }
            let f = cache
                .embedding
                .as_ref()
                .ok_or_else(|| Error::contract("embedding gradient for a degenerate projection"))?;
            let g_raw = normalization_backward(f, cache.raw_norm, gf);
            let mut g_hidden = self.proj2.backward(&self.params, &cache.proj_hidden, &g_raw, grads);
            relu_mask(&mut g_hidden, &cache.proj_hidden);
            let g = self.proj1.backward(&self.params, latent, &g_hidden, grads);
            for (a, b) in g_latent.iter_mut().zip(g) {
                *a += b;
            }
        }

        let mut g = g_latent;
        for (i, layer) in self.encoder.iter().enumerate().rev() {
            relu_mask(&mut g, &cache.encoder_out[i]);
            let input = if i == 0 {
                cache.input.as_slice()
            } else {
                cache.encoder_out[i - 1].as_slice()
            };
            g = layer.backward(&self.params, input, &g, grads);
        }
        Ok(())
    }
}

/// Chains a gradient through `f = v / |v|`.
pub fn normalization_backward(f: &[f64], norm: f64, grad_f: &[f64]) -> Vec<f64> {
    let along: f64 = f.iter().zip(grad_f).map(|(a, b)| a * b).sum();
    f.iter()
        .zip(grad_f)
        .map(|(fi, gi)| (gi - along * fi) / norm)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing changed.
    Rejected,
}

impl AdamW {
    /// Decoupled weight decay followed by a bias-corrected Adam step.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> StepOutcome {
        assert_eq!(params.len(), grads.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return StepOutcome::Rejected;
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            params[i] -= lr * self.weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        StepOutcome::Applied
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherStudent {
    pub student: AdaptModel,
    pub teacher: AdaptModel,
    pub ema_beta: f64,
}

impl TeacherStudent {
    /// The teacher starts as a copy of the student.
    pub fn new(student: AdaptModel, ema_beta: f64) -> Self {
        TeacherStudent {
            teacher: student.clone(),
            student,
            ema_beta,
        }
    }

    /// `teacher = beta * teacher + (1 - beta) * student`.
    pub fn ema_update(&mut self) {
        let beta = self.ema_beta;
        let student = self.student.params();
        for (t, s) in self.teacher.params_mut().iter_mut().zip(student) {
            *t += (1.0 - beta) * (s - *t);
        }
    }
}
