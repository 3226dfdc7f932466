//! The transformer itself: patch embedding, pre-norm blocks in vanilla and
//! adaptive variants, gate readouts, and the full halting forward pass that
//! wires blocks, stabilizer and controller together.

mod config;

pub use config::{ConfigError, MaskMode, ModelConfig, ModelVariant, TargetDepth, TpcConfig};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::{self, BreakRecord, ControllerError, HaltMode, TokenHaltState};
use crate::losses::{self, LossError};
use crate::stabilizer::{build_plan, dense_attention, sparse_attention};
use crate::tensor::{concat_cols, concat_rows, RawTensor, Tape, Tensor, TensorError};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("image buffer has {got} values, expected {expected}")]
    BadImage { got: usize, expected: usize },
}

/// One learnable tensor with its stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: RawTensor,
}

/// Model parameters plus configuration; forward passes run through
/// [`Model::bind`] which places every parameter on a fresh tape.
pub struct Model {
    pub config: ModelConfig,
    params: Vec<NamedParam>,
    index: BTreeMap<String, usize>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std;
        if z.abs() <= 2.0 * std {
            return z;
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let n = config.tokens();
        let patch_dim = config.channels * config.patch_size * config.patch_size;
        let hidden = config.mlp_hidden();

        let mut params: Vec<NamedParam> = Vec::new();
        let dtype = config.dtype;
        let weight = |name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| trunc_normal(rng, 0.02)).collect();
            NamedParam {
                name: name.to_string(),
                value: RawTensor::new(dtype, shape, data),
            }
        };
        let filled = |name: &str, shape: Vec<usize>, v: f64| {
            let numel: usize = shape.iter().product();
            NamedParam {
                name: name.to_string(),
                value: RawTensor::new(dtype, shape, vec![v; numel]),
            }
        };

        params.push(weight("patch_embed.weight", vec![patch_dim, d], &mut rng));
        params.push(filled("patch_embed.bias", vec![d], 0.0));
        params.push(weight("cls_token", vec![1, d], &mut rng));
        params.push(weight("pos_embed", vec![n, d], &mut rng));
        for l in 0..config.depth {
            params.push(filled(&format!("layer{l}.ln1.gain"), vec![d], 1.0));
            params.push(filled(&format!("layer{l}.ln1.bias"), vec![d], 0.0));
            params.push(weight(&format!("layer{l}.qkv.weight"), vec![d, 3 * d], &mut rng));
            params.push(filled(&format!("layer{l}.qkv.bias"), vec![3 * d], 0.0));
            params.push(weight(&format!("layer{l}.proj.weight"), vec![d, d], &mut rng));
            params.push(filled(&format!("layer{l}.proj.bias"), vec![d], 0.0));
            params.push(filled(&format!("layer{l}.ln2.gain"), vec![d], 1.0));
            params.push(filled(&format!("layer{l}.ln2.bias"), vec![d], 0.0));
            params.push(weight(&format!("layer{l}.mlp1.weight"), vec![d, hidden], &mut rng));
            params.push(filled(&format!("layer{l}.mlp1.bias"), vec![hidden], 0.0));
            params.push(weight(&format!("layer{l}.mlp2.weight"), vec![hidden, d], &mut rng));
            params.push(filled(&format!("layer{l}.mlp2.bias"), vec![d], 0.0));
        }
        params.push(filled("norm.gain", vec![d], 1.0));
        params.push(filled("norm.bias", vec![d], 0.0));
        params.push(weight("head.weight", vec![d, config.num_classes], &mut rng));
        params.push(filled("head.bias", vec![config.num_classes], 0.0));
        if config.tpc.learnable_gates {
            params.push(filled("gate.gamma", vec![1], config.tpc.gamma));
            params.push(filled("gate.beta", vec![1], config.tpc.beta));
        }

        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model { config, params, index })
    }

    pub fn from_params(config: ModelConfig, params: Vec<NamedParam>) -> Result<Self, ConfigError> {
        config.validate()?;
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model { config, params, index })
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    /// Total learnable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// Place every parameter on a fresh tape for one forward/backward pass.
    pub fn bind(&self) -> BoundModel<'_> {
        let tape = Tape::new(self.config.dtype);
        let tensors = self
            .params
            .iter()
            .map(|p| tape.param(p.value.data.clone(), p.value.shape.clone()))
            .collect();
        BoundModel { model: self, tape, tensors }
    }
}

/// Output of one adaptive forward pass on a single image.
pub struct TpcForward {
    pub logits: Tensor,
    pub task: Option<Tensor>,
    pub ponder: Tensor,
    pub distribution: Tensor,
    pub state: TokenHaltState,
    pub records: Vec<BreakRecord>,
    /// Tokens that participated in each layer's block.
    pub active_per_layer: Vec<usize>,
}

/// Output of one fixed-depth (vanilla) forward pass.
pub struct VanillaForward {
    pub logits: Tensor,
    pub task: Option<Tensor>,
}

/// A model with its parameters bound to a tape.
pub struct BoundModel<'m> {
    pub model: &'m Model,
    pub tape: Tape,
    tensors: Vec<Tensor>,
}

impl<'m> BoundModel<'m> {
    fn t(&self, name: &str) -> &Tensor {
        let idx = *self
            .model
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[idx]
    }

    /// Parameter tensors in declaration order, paired with their names.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.model
            .params
            .iter()
            .zip(&self.tensors)
            .map(|(p, t)| (p.name.as_str(), t))
    }

    /// Patchify, project, prepend CLS and add positional embeddings.
    pub fn patch_embed(&self, image: &[f64]) -> Result<Tensor, ModelError> {
        let c = &self.model.config;
        let expected = c.channels * c.image_size * c.image_size;
        if image.len() != expected {
            return Err(ModelError::BadImage { got: image.len(), expected });
        }
        let ps = c.patch_size;
        let side = c.image_size / ps;
        let hw = c.image_size * c.image_size;
        let patch_dim = c.channels * ps * ps;
        let mut patches = Vec::with_capacity(side * side * patch_dim);
        for gy in 0..side {
            for gx in 0..side {
                for ch in 0..c.channels {
                    for py in 0..ps {
                        for px in 0..ps {
                            let y = gy * ps + py;
                            let x = gx * ps + px;
                            patches.push(image[ch * hw + y * c.image_size + x]);
                        }
                    }
                }
            }
        }
        let patches = self.tape.constant(patches, vec![side * side, patch_dim]);
        let projected = patches
            .matmul(self.t("patch_embed.weight"))?
            .add_row(self.t("patch_embed.bias"))?;
        let tokens = concat_rows(&[self.t("cls_token"), &projected])?;
        Ok(tokens.add(self.t("pos_embed"))?)
    }

    fn msa(
        &self,
        layer: usize,
        x_norm: &Tensor,
        sparse_kappa: Option<usize>,
    ) -> Result<Tensor, TensorError> {
        let c = &self.model.config;
        let d = c.embed_dim;
        let dh = c.head_dim();
        let qkv = x_norm
            .matmul(self.t(&format!("layer{layer}.qkv.weight")))?
            .add_row(self.t(&format!("layer{layer}.qkv.bias")))?;
        let n = qkv.shape()[0];
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qcols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let kcols: Vec<usize> = qcols.iter().map(|j| j + d).collect();
            let vcols: Vec<usize> = qcols.iter().map(|j| j + 2 * d).collect();
            let q = qkv.gather_cols(&qcols)?;
            let k = qkv.gather_cols(&kcols)?;
            let v = qkv.gather_cols(&vcols)?;
            let out = match sparse_kappa {
                Some(kappa) if kappa < n => {
                    let plan = build_plan(&q, &k, kappa);
                    sparse_attention(&q, &k, &v, &plan, c.tpc.attn_scale_mode)?
                }
                _ => dense_attention(&q, &k, &v, c.tpc.attn_scale_mode)?,
            };
            heads.push(out);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        concat_cols(&refs)?
            .matmul(self.t(&format!("layer{layer}.proj.weight")))?
            .add_row(self.t(&format!("layer{layer}.proj.bias")))
    }

    /// Pre-norm transformer block: x + MSA(LN(x)), then + MLP(LN(.)).
    fn block(
        &self,
        layer: usize,
        x: &Tensor,
        sparse_kappa: Option<usize>,
    ) -> Result<Tensor, TensorError> {
        let n1 = x.layernorm(
            self.t(&format!("layer{layer}.ln1.gain")),
            self.t(&format!("layer{layer}.ln1.bias")),
            LN_EPS,
        )?;
        let x = x.add(&self.msa(layer, &n1, sparse_kappa)?)?;
        let n2 = x.layernorm(
            self.t(&format!("layer{layer}.ln2.gain")),
            self.t(&format!("layer{layer}.ln2.bias")),
            LN_EPS,
        )?;
        let h = n2
            .matmul(self.t(&format!("layer{layer}.mlp1.weight")))?
            .add_row(self.t(&format!("layer{layer}.mlp1.bias")))?
            .gelu()
            .matmul(self.t(&format!("layer{layer}.mlp2.weight")))?
            .add_row(self.t(&format!("layer{layer}.mlp2.bias")))?;
        x.add(&h)
    }

    /// Fixed token-count block, dense attention.
    pub fn vanilla_block(&self, layer: usize, x: &Tensor) -> Result<Tensor, TensorError> {
        self.block(layer, x, None)
    }

    fn sparse_kappa_for(&self, active: usize) -> Option<usize> {
        let t = &self.model.config.tpc;
        if t.stabilizer && t.kappa < active {
            Some(t.kappa)
        } else {
            None
        }
    }

    /// Variable-token block: masked tokens are either zeroed in place or
    /// dropped from the block entirely, per `mask_mode`.
    pub fn tpc_block(&self, layer: usize, x: &Tensor, active: &[bool]) -> Result<Tensor, ModelError> {
        let c = &self.model.config;
        let n = x.shape()[0];
        let d = c.embed_dim;
        assert_eq!(active.len(), n);
        let active_idx: Vec<usize> = (0..n).filter(|&k| active[k]).collect();
        match c.tpc.mask_mode {
            MaskMode::Zero => {
                let mask: Vec<f64> = active
                    .iter()
                    .flat_map(|&a| std::iter::repeat(if a { 1.0 } else { 0.0 }).take(d))
                    .collect();
                let masked = x.mul(&self.tape.constant(mask, vec![n, d]))?;
                Ok(self.block(layer, &masked, self.sparse_kappa_for(n))?)
            }
            MaskMode::Drop => {
                if active_idx.len() == n {
                    return Ok(self.block(layer, x, self.sparse_kappa_for(n))?);
                }
                let xa = x.gather_rows(&active_idx)?;
                let ya = self.block(layer, &xa, self.sparse_kappa_for(active_idx.len()))?;
                let scattered = ya.scatter_rows(&active_idx, n)?;
                let keep: Vec<f64> = active
                    .iter()
                    .flat_map(|&a| std::iter::repeat(if a { 0.0 } else { 1.0 }).take(d))
                    .collect();
                let carried = x.mul(&self.tape.constant(keep, vec![n, d]))?;
                Ok(scattered.add(&carried)?)
            }
        }
    }

    /// Pause and non-restart probabilities read from the reserved embedding
    /// dimensions of the updated tokens.
    pub fn gate_probs(&self, tokens: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let t = &self.model.config.tpc;
        let read = |dim: usize| -> Result<Tensor, TensorError> {
            let col = tokens.gather_cols(&[dim])?.flatten();
            if t.learnable_gates {
                col.scale_by(self.t("gate.gamma"))?
                    .add_row(self.t("gate.beta"))
                    .map(|v| v.sigmoid())
            } else {
                Ok(col.scale(t.gamma).add_const(t.beta).sigmoid())
            }
        };
        Ok((read(t.gate_dims.0)?, read(t.gate_dims.1)?))
    }

    /// Standard fixed-depth forward: every block over every token, CLS at
    /// the final layer feeds the head.
    pub fn forward_vanilla(
        &self,
        image: &[f64],
        label: Option<usize>,
    ) -> Result<VanillaForward, ModelError> {
        let c = &self.model.config;
        let mut tokens = self.patch_embed(image)?;
        for l in 0..c.depth {
            tokens = self.vanilla_block(l, &tokens)?;
        }
        let cls = tokens.gather_rows(&[0])?;
        let logits = self.head(&cls)?;
        let task = label.map(|y| losses::cross_entropy(&logits, y)).transpose()?;
        Ok(VanillaForward { logits, task })
    }

    fn head(&self, cls: &Tensor) -> Result<Tensor, TensorError> {
        cls.layernorm(self.t("norm.gain"), self.t("norm.bias"), LN_EPS)?
            .matmul(self.t("head.weight"))?
            .add_row(self.t("head.bias"))
    }

    /// Forward pass with an externally fixed participation schedule, used
    /// for throughput measurement: no gates, no halting bookkeeping, just
    /// the blocks over the given per-layer active sets and the head on the
    /// final CLS state.
    pub fn forward_scheduled(
        &self,
        image: &[f64],
        masks: &[Vec<bool>],
    ) -> Result<Tensor, ModelError> {
        assert_eq!(masks.len(), self.model.config.depth);
        let mut tokens = self.patch_embed(image)?;
        for (l, mask) in masks.iter().enumerate() {
            tokens = self.tpc_block(l, &tokens, mask)?;
        }
        let cls = tokens.gather_rows(&[0])?;
        Ok(self.head(&cls)?)
    }

    /// Full adaptive forward pass on one image.
    ///
    /// Halting decisions (threshold crossings, top-k selection) come from
    /// forward values only; gradients flow through break probabilities,
    /// remainders and the CLS aggregation weights.
    pub fn forward_tpc(
        &self,
        image: &[f64],
        label: Option<usize>,
    ) -> Result<TpcForward, ModelError> {
        let c = &self.model.config;
        let t = &c.tpc;
        let depth = c.depth;
        let n = c.tokens();
        let tape = &self.tape;

        let mut tokens = self.patch_embed(image)?;
        let mut state = TokenHaltState::new(n, t.halt_mode, Some(0));
        let mut cum_w = tape.zeros(vec![n]);
        let mut r_vec = tape.zeros(vec![n]);
        let mut cls_agg = tape.zeros(vec![1, c.embed_dim]);
        let mut d_scalars: Vec<Tensor> = Vec::with_capacity(depth);
        let mut records = Vec::new();
        let mut active_per_layer = Vec::with_capacity(depth);
        let mut skip_next = vec![false; n];

        for l in 1..=depth {
            let mut active = state.mask.clone();
            if t.halt_mode == HaltMode::PauseRestart {
                for k in 1..n {
                    if skip_next[k] {
                        active[k] = false;
                    }
                }
            }
            let participating: Vec<bool> = active.clone();
            active_per_layer.push(active.iter().filter(|a| **a).count());

            let t_next = self.tpc_block(l - 1, &tokens, &active)?;

            let (b_raw, pause_vals, nonrestart_vals) = if l < depth {
                let (p1, p2) = self.gate_probs(&t_next)?;
                let pv = p1.value();
                let nv = p2.value();
                (p1.mul(&p2)?, pv, nv)
            } else {
                (tape.ones(vec![n]), vec![1.0; n], vec![1.0; n])
            };

            // token distribution regularizer over the participating set
            let active_f: Vec<f64> = participating
                .iter()
                .map(|&a| if a { 1.0 } else { 0.0 })
                .collect();
            let count = active_f.iter().sum::<f64>().max(1.0);
            let active_const = tape.constant(active_f, vec![n]);
            let mean_b = b_raw.mul(&active_const)?.sum_all().scale(1.0 / count);
            let mean_vec = tape.ones(vec![n]).scale_by(&mean_b)?;
            let b_reg = b_raw.scale(t.zeta).add(&mean_vec.scale(1.0 - t.zeta))?;
            let b_for_weights = if t.regularize_cumulation_only {
                b_raw.clone()
            } else {
                b_reg.clone()
            };

            let was_halted: Vec<bool> = (0..n).map(|k| state.halted(k)).collect();
            let w_vals = controller::step(&mut state, &b_reg.value(), l, t.delta, depth)?;

            let m_pre: Vec<f64> = (0..n)
                .map(|k| {
                    if !was_halted[k] && state.halting_layer[k] != Some(l) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let m_halt: Vec<f64> = (0..n)
                .map(|k| if state.halting_layer[k] == Some(l) { 1.0 } else { 0.0 })
                .collect();
            let m_active: Vec<f64> = was_halted
                .iter()
                .map(|&h| if h { 0.0 } else { 1.0 })
                .collect();
            let m_pre_c = tape.constant(m_pre, vec![n]);
            let m_halt_c = tape.constant(m_halt, vec![n]);
            let m_active_c = tape.constant(m_active, vec![n]);

            let remainder_vec = tape.ones(vec![n]).sub(&cum_w)?;
            let w_l = b_for_weights
                .mul(&m_pre_c)?
                .add(&remainder_vec.mul(&m_halt_c)?)?;
            r_vec = r_vec.add(&remainder_vec.mul(&m_halt_c)?)?;

            let w_cls = w_l.gather_rows(&[0])?;
            let cls_row = t_next.gather_rows(&[0])?;
            cls_agg = cls_agg.add(&cls_row.scale_by(&w_cls)?)?;

            cum_w = cum_w.add(&b_for_weights.mul(&m_active_c)?)?;
            d_scalars.push(w_l.mean_all());

            let b_raw_vals = b_raw.value();
            let b_reg_vals = b_reg.value();
            for k in 0..n {
                if was_halted[k] {
                    continue;
                }
                records.push(BreakRecord {
                    token: k,
                    layer: l,
                    pause: pause_vals[k],
                    restart: 1.0 - nonrestart_vals[k],
                    non_restart: nonrestart_vals[k],
                    b_raw: b_raw_vals[k],
                    b_reg: b_reg_vals[k],
                    weight: w_vals[k],
                });
            }

            if t.halt_mode == HaltMode::PauseRestart && l < depth {
                for k in 1..n {
                    if !participating[k] {
                        // skipped tokens rejoin next layer
                        skip_next[k] = false;
                    } else {
                        let restart = 1.0 - nonrestart_vals[k];
                        skip_next[k] = pause_vals[k] > 0.5 && restart <= 0.5;
                    }
                }
            }

            tokens = t_next;
        }

        let logits = self.head(&cls_agg)?;
        let task = label.map(|y| losses::cross_entropy(&logits, y)).transpose()?;

        // a token can only fail to halt when its break probabilities went
        // non-finite; count it at full depth and let the loss check catch it
        let mean_m: f64 = state
            .halting_layer
            .iter()
            .map(|m| m.unwrap_or(depth) as f64)
            .sum::<f64>()
            / n as f64;
        let ponder = r_vec.mean_all().add_const(mean_m);

        let target_center = c
            .resolved_target_depth()
            .unwrap_or_else(|| state.mean_halting_layer(depth));
        let target = losses::gaussian_target(depth, target_center);
        let mut sum_d = d_scalars[0].clone();
        for s in &d_scalars[1..] {
            sum_d = sum_d.add(s)?;
        }
        let mut kl: Option<Tensor> = None;
        for (l, d_l) in d_scalars.iter().enumerate() {
            let dhat = d_l.div(&sum_d)?;
            let term = dhat.mul(
                &dhat
                    .add_const(losses::KL_EPS)
                    .ln()
                    .add_const(-target[l].ln()),
            )?;
            kl = Some(match kl {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let distribution = kl.expect("depth >= 1");

        Ok(TpcForward {
            logits,
            task,
            ponder,
            distribution,
            state,
            records,
            active_per_layer,
        })
    }
}
