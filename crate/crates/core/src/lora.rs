//! Low-rank adapters on attention projections.
//!
//! An adapted projection computes `W x + (alpha / r) * B (A x)` with `W`
//! frozen. `B` starts at zero so injection leaves the network unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Ctx, Linear, ParamId, ParamKind, ParamSet, Part, SegModel};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::scalar::Scalar;

pub const RANKS: [usize; 4] = [8, 16, 32, 64];
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    Out,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::Out];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `2 * rank`.
    pub alpha: Option<f64>,
    pub apply_to_encoder: bool,
    pub apply_to_decoder: bool,
    pub targets: Vec<Projection>,
    pub init_seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: None,
            apply_to_encoder: true,
            apply_to_decoder: true,
            targets: Projection::ALL.to_vec(),
            init_seed: 1,
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !self.apply_to_encoder && !self.apply_to_decoder {
            return Err(Error::Config(
                "LoRA must apply to the encoder, the decoder, or both".into(),
            ));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target projection".into()));
        }
        if !self.alpha().is_finite() || self.alpha() <= 0.0 {
            return Err(Error::Config(format!("LoRA alpha {} must be positive", self.alpha())));
        }
        Ok(())
    }

    fn applies_to(&self, part: Part) -> bool {
        match part {
            Part::Encoder => self.apply_to_encoder,
            Part::Decoder => self.apply_to_decoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterState {
    Attached,
    /// Folded into the base weight; `a` and `b` no longer exist.
    Merged,
}

/// `A [r, d_in]` and `B [d_out, r]` living in the model's parameter set.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub state: AdapterState,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn is_attached(&self) -> bool {
        self.state == AdapterState::Attached
    }

    /// `y + scale * B (A x)` on the tape.
    pub fn add_delta<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (ctx.p(self.a), ctx.p(self.b));
        let h = ctx.tape.linear(x, a, None)?;
        let d = ctx.tape.linear(h, b, None)?;
        let d = ctx.tape.scale(d, T::lit(self.scale()));
        ctx.tape.add(y, d)
    }
}

/// Adapted forward of one projection: `W x + b + (alpha / r) * B (A x)`.
pub fn lora_forward<T: Scalar>(ctx: &mut Ctx<T>, layer: &Linear, x: Var) -> Result<Var> {
    let d_in = *ctx.tape.shape(x).last().unwrap_or(&0);
    if d_in != layer.d_in {
        return Err(Error::shape("lora_forward", ctx.tape.shape(x), &[layer.d_out, layer.d_in]));
    }
    layer.forward(ctx, x)
}

/// One adapted projection, as reported by [`adapters`].
#[derive(Debug, Clone)]
pub struct AdapterSite {
    pub layer: String,
    pub part: Part,
    pub projection: Projection,
    pub adapter: LoraAdapter,
}

/// Every attached adapter in model order.
pub fn adapters<T: Scalar>(model: &SegModel<T>) -> Vec<AdapterSite> {
    let mut out = Vec::new();
    for (part, attn) in model.net.attention_blocks() {
        for (proj, layer) in Projection::ALL.into_iter().zip(attn.projections()) {
            if let Some(a) = layer.lora.as_ref().filter(|a| a.is_attached()) {
                out.push(AdapterSite {
                    layer: layer.name.clone(),
                    part,
                    projection: proj,
                    adapter: a.clone(),
                });
            }
        }
    }
    out
}

fn attach<T: Scalar>(
    params: &mut ParamSet<T>,
    layer: &mut Linear,
    cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) {
    let a = Tensor::randn(&[cfg.rank, layer.d_in], INIT_STD, rng).with_requires_grad(true);
    let b = Tensor::zeros(&[layer.d_out, cfg.rank]).with_requires_grad(true);
    layer.lora = Some(LoraAdapter {
        a: params.add(format!("{}.lora_a", layer.name), ParamKind::LoraA, a),
        b: params.add(format!("{}.lora_b", layer.name), ParamKind::LoraB, b),
        rank: cfg.rank,
        alpha: cfg.alpha(),
        state: AdapterState::Attached,
    });
}

/// Wraps every targeted projection, then freezes everything except the new
/// adapters. Previously merged adapters are replaced by fresh ones.
pub fn inject<T: Scalar>(model: &mut SegModel<T>, cfg: &LoraConfig) -> Result<Vec<AdapterSite>> {
    cfg.validate()?;
    if !adapters(model).is_empty() {
        return Err(Error::AlreadyInjected);
    }
    model.freeze_all();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let SegModel { net, params } = model;
    for (part, attn) in net.attention_blocks_mut() {
        if !cfg.applies_to(part) {
            continue;
        }
        for (proj, layer) in Projection::ALL.into_iter().zip(attn.projections_mut()) {
            if cfg.targets.contains(&proj) {
                attach(params, layer, cfg, &mut rng);
            }
        }
    }
    Ok(adapters(model))
}

fn merge_layer<T: Scalar>(params: &mut ParamSet<T>, layer: &mut Linear) -> Result<()> {
    let Some(adapter) = layer.lora.as_mut() else {
        return Err(Error::Config(format!("{} has no adapter", layer.name)));
    };
    if !adapter.is_attached() {
        return Err(Error::AlreadyMerged(layer.name.clone()));
    }
    let (r, d_in, d_out) = (adapter.rank, layer.d_in, layer.d_out);
    let a = params.remove(adapter.a).expect("adapter A present while attached").tensor;
    let b = params.remove(adapter.b).expect("adapter B present while attached").tensor;
    // Accumulate the update in f64 so merging adds a single rounding step.
    let mut delta = vec![0.0f64; d_out * d_in];
    for o in 0..d_out {
        for k in 0..r {
            let bk = b.data()[o * r + k].as_f64();
            let row = &a.data()[k * d_in..(k + 1) * d_in];
            for (dst, &av) in delta[o * d_in..(o + 1) * d_in].iter_mut().zip(row) {
                *dst += bk * av.as_f64();
            }
        }
    }
    let scale = adapter.scale();
    let w = params.tensor_mut(layer.weight);
    for (wv, dv) in w.data_mut().iter_mut().zip(delta) {
        *wv = T::lit(wv.as_f64() + scale * dv);
    }
    adapter.state = AdapterState::Merged;
    Ok(())
}

/// Folds the adapter of the named projection into its base weight.
pub fn merge<T: Scalar>(model: &mut SegModel<T>, layer_name: &str) -> Result<()> {
    let SegModel { net, params } = model;
    for (_, attn) in net.attention_blocks_mut() {
        for layer in attn.projections_mut() {
            if layer.name == layer_name {
                return merge_layer(params, layer);
            }
        }
    }
    Err(Error::Config(format!("no projection named {layer_name}")))
}

/// Merges every attached adapter; returns how many were merged.
pub fn merge_all<T: Scalar>(model: &mut SegModel<T>) -> Result<usize> {
    let names: Vec<String> = adapters(model).into_iter().map(|s| s.layer).collect();
    for name in &names {
        merge(model, name)?;
    }
    Ok(names.len())
}

/// Trainable weights over the weights of the original network, adapters
/// excluded from the denominator.
pub fn trainable_fraction<T: Scalar>(model: &SegModel<T>) -> f64 {
    let base = model.base_param_count();
    if base == 0 {
        return 0.0;
    }
    model.trainable_param_count() as f64 / base as f64
}

/// Adapter weights needed to rebuild `model` from its base: `A`/`B` by name.
pub fn adapter_tensors<T: Scalar>(model: &SegModel<T>) -> Vec<(String, Tensor<T>)> {
    model
        .params
        .iter()
        .filter(|(_, p)| p.kind.is_adapter())
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect()
}

/// Overwrites adapter weights by name; every name must match an attached adapter.
pub fn load_adapter_tensors<T: Scalar>(model: &mut SegModel<T>, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let expected = model.params.iter().filter(|(_, p)| p.kind.is_adapter()).count();
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} adapter tensors, model expects {expected}",
            tensors.len()
        )));
    }
    for (name, t) in tensors {
        let id = model
            .params
            .find(name)
            .filter(|&id| model.params.get(id).kind.is_adapter())
            .ok_or_else(|| Error::Checkpoint(format!("unknown adapter tensor {name}")))?;
        let slot = model.params.tensor_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match model {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
