//! Float network built from a resolved config: parameters, gate specs, and
//! forward passes on and off the autograd tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{ActShape, ActivationVariant, GateKind, GroupSource, LayerConfig, NoiseConfig, ResolvedNetwork};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grouping::uniform_patches;
use crate::relu_variants::{self, GateWeights, GroupingSpec};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Gate state of one shared-gate activation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// Groups and, for one-hot modes, the gate sources. In learned mode the
    /// weights live in `weights` and the spec's copy is refreshed on demand.
    pub spec: GroupingSpec,
    /// Learned `[C, H*W]` gate weights.
    pub weights: Option<Tensor>,
    pub kind: GateKind,
    pub noise: Option<NoiseConfig>,
}

impl GateParams {
    /// The spec with the current learned weights folded in.
    pub fn effective_spec(&self) -> GroupingSpec {
        let mut spec = self.spec.clone();
        if let Some(w) = &self.weights {
            spec.gate = GateWeights::Learned {
                weights: w.data().chunks(w.shape()[1]).map(<[f64]>::to_vec).collect(),
            };
        }
        spec
    }

    /// Whether gate weights stay secret at inference and must be evaluated
    /// under sharing.
    pub fn private_weights(&self) -> bool {
        self.weights.is_some() && self.kind == GateKind::LearnedPrivate
    }

    pub fn inference_noise(&self) -> Option<f64> {
        self.noise.filter(|n| n.at_inference).map(|n| n.p_keep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv { w: Tensor, b: Tensor },
    Linear { w: Tensor, b: Tensor },
    Gate(GateParams),
}

/// Forward-pass mode for [`Model::forward_tape`].
pub enum Mode<'a> {
    /// Samples dropout masks and training-time gate noise from `rng`.
    Train(&'a mut ChaCha8Rng),
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    net: ResolvedNetwork,
    seed: u64,
    layers: Vec<LayerParams>,
    /// Straight-through surrogate temperature of gated layers.
    pub temperature: f64,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn plane_dims(shape: ActShape) -> Result<(usize, usize, usize)> {
    match shape {
        ActShape::Map { channels, height, width } => Ok((channels, height, width)),
        ActShape::Flat(n) => Ok((n, 1, 1)),
    }
}

/// Expected group count of a clustered layer: `min(k, cells)` per window.
pub fn clustered_group_count(height: usize, width: usize, window: usize, k: usize) -> usize {
    let mut total = 0;
    for y0 in (0..height).step_by(window) {
        for x0 in (0..width).step_by(window) {
            let cells = (window.min(height - y0)) * (window.min(width - x0));
            total += k.min(cells);
        }
    }
    total
}

impl Model {
    /// Fresh parameters for `net`. Clustered layers take their spec from
    /// `specs` (keyed by layer name) or else from the file named in the config.
    pub fn new(net: &ResolvedNetwork, seed: u64, specs: &BTreeMap<String, GroupingSpec>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            let params = match (&l.config, &l.activation) {
                (
                    LayerConfig::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    _,
                ) => LayerParams::Conv {
                    w: kaiming_uniform(
                        &[*out_channels, *in_channels, *kernel, *kernel],
                        in_channels * kernel * kernel,
                        &mut rng,
                    ),
                    b: Tensor::zeros(&[*out_channels]),
                },
                (
                    LayerConfig::Linear {
                        in_features,
                        out_features,
                        ..
                    },
                    _,
                ) => LayerParams::Linear {
                    w: kaiming_uniform(&[*in_features, *out_features], *in_features, &mut rng),
                    b: Tensor::zeros(&[*out_features]),
                },
                (LayerConfig::Activation { name }, Some(ActivationVariant::Grelu(g))) => {
                    let (c, h, w) = plane_dims(l.input)?;
                    let spec = match &g.groups {
                        GroupSource::Uniform(k) => uniform_patches(h, w, *k)?,
                        GroupSource::Clustered { window, k, file } => {
                            let spec = match specs.get(name) {
                                Some(s) => s.clone(),
                                None => load_spec_file(net, name, file.as_deref())?,
                            };
                            spec.check_against(c, h, w)?;
                            let want = clustered_group_count(h, w, *window, *k);
                            for ch in 0..c {
                                if spec.group_count(ch) != want {
                                    return Err(Error::config(format!(
                                        "layer `{name}`: grouping has {} groups in channel {ch}, but ({window}x{window}, {k}) clustering gives {want}",
                                        spec.group_count(ch)
                                    )));
                                }
                            }
                            spec
                        }
                    };
                    let spec = match g.gate {
                        GateKind::Middle => spec,
                        GateKind::LearnedPrivate | GateKind::LearnedPublic => match spec.gate {
                            GateWeights::Learned { .. } => spec,
                            _ => spec.with_learned_gates(c),
                        },
                    };
                    gate_params(spec, g.gate, g.noise)?
                }
                _ => LayerParams::None,
            };
            layers.push(params);
        }
        Ok(Model {
            net: net.clone(),
            seed,
            layers,
            temperature: 1.0,
        })
    }

    /// Rebuilds a model from a checkpoint written for the same variant.
    pub fn from_checkpoint(net: &ResolvedNetwork, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.network != net.name {
            return Err(Error::format(format!(
                "checkpoint is for network `{}`, config describes `{}`",
                ckpt.meta.network, net.name
            )));
        }
        let specs: BTreeMap<String, GroupingSpec> = ckpt.specs.iter().cloned().collect();
        let mut model = Model::new(net, ckpt.meta.seed, &specs)?;
        for (i, l) in net.layers.iter().enumerate() {
            if let LayerParams::Gate(g) = &mut model.layers[i] {
                let saved = specs.get(l.name()).ok_or_else(|| {
                    Error::format(format!(
                        "checkpoint has no grouping for layer `{}`; was it trained for variant `{}`?",
                        l.name(),
                        net.variant
                    ))
                })?;
                if saved.groups != g.spec.groups {
                    return Err(Error::format(format!(
                        "checkpoint grouping for `{}` differs from the configured one",
                        l.name()
                    )));
                }
            }
        }
        let names = model.parameter_names();
        let mut found = 0;
        for (name, t) in &ckpt.tensors {
            let idx = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::format(format!("checkpoint tensor `{name}` has no place in the model")))?;
            let dst = model.parameters_mut().swap_remove(idx);
            if dst.shape() != t.shape() {
                return Err(Error::format(format!(
                    "checkpoint tensor `{name}` is {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
            found += 1;
        }
        if found != names.len() {
            return Err(Error::format(format!(
                "checkpoint holds {found} of the model's {} parameters",
                names.len()
            )));
        }
        Ok(model)
    }

    /// Copies every checkpoint tensor whose name and shape match. Returns the
    /// names copied.
    pub fn load_matching(&mut self, ckpt: &Checkpoint) -> Vec<String> {
        let names = self.parameter_names();
        let mut copied = Vec::new();
        let mut params = self.parameters_mut();
        for (name, t) in &ckpt.tensors {
            if let Some(i) = names.iter().position(|n| n == name) {
                if params[i].shape() == t.shape() {
                    *params[i] = t.clone();
                    copied.push(name.clone());
                }
            }
        }
        copied
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                network: self.net.name.clone(),
                variant: self.net.variant.clone(),
                seed: self.seed,
            },
            tensors: self
                .parameter_names()
                .into_iter()
                .zip(self.parameters().into_iter().cloned())
                .collect(),
            specs: self
                .net
                .layers
                .iter()
                .zip(&self.layers)
                .filter_map(|(l, p)| match p {
                    LayerParams::Gate(g) => Some((l.name().to_string(), g.effective_spec())),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn network(&self) -> &ResolvedNetwork {
        &self.net
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn is_activation(&self, layer: usize) -> bool {
        self.net
            .layers
            .get(layer)
            .is_some_and(|l| matches!(l.config, LayerConfig::Activation { .. }))
    }

    /// `[C, H, W]` of the tensor entering `layer`.
    pub fn layer_input_shape(&self, layer: usize) -> Result<[usize; 3]> {
        let l = self
            .net
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        match l.input {
            ActShape::Map { channels, height, width } => Ok([channels, height, width]),
            ActShape::Flat(n) => Ok([n, 1, 1]),
        }
    }

    pub fn gate(&self, layer: usize) -> Option<&GateParams> {
        match self.layers.get(layer) {
            Some(LayerParams::Gate(g)) => Some(g),
            _ => None,
        }
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, p) in self.net.layers.iter().zip(&self.layers) {
            match p {
                LayerParams::Conv { .. } | LayerParams::Linear { .. } => {
                    names.push(format!("{}.weight", l.name()));
                    names.push(format!("{}.bias", l.name()));
                }
                LayerParams::Gate(GateParams { weights: Some(_), .. }) => names.push(format!("{}.gate", l.name())),
                _ => {}
            }
        }
        names
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.layers {
            match p {
                LayerParams::Conv { w, b } | LayerParams::Linear { w, b } => {
                    out.push(w);
                    out.push(b);
                }
                LayerParams::Gate(GateParams { weights: Some(w), .. }) => out.push(w),
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.layers {
            match p {
                LayerParams::Conv { w, b } | LayerParams::Linear { w, b } => {
                    out.push(w);
                    out.push(b);
                }
                LayerParams::Gate(GateParams { weights: Some(w), .. }) => out.push(w),
                _ => {}
            }
        }
        out
    }

    /// Inference-time flip mask of one image at `layer`, fixed by the model
    /// seed so that every evaluation of the same model agrees.
    pub fn inference_flips(&self, layer: usize) -> Result<Option<Vec<bool>>> {
        let Some(p_keep) = self.gate(layer).and_then(GateParams::inference_noise) else {
            return Ok(None);
        };
        let len = self.net.layers[layer].input.numel();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(layer as u64 + 1));
        Ok(Some(relu_variants::sample_flips(len, p_keep, &mut rng)?))
    }

    fn batch_flips(&self, layer: usize, batch: usize) -> Result<Option<Vec<bool>>> {
        Ok(self.inference_flips(layer)?.map(|f| f.repeat(batch)))
    }

    /// Records the forward pass on `tape`. Returns the logits and the
    /// parameter leaves in [`Model::parameters`] order.
    pub fn forward_tape(&self, tape: &mut Tape, x: Tensor, mut mode: Mode<'_>) -> Result<(Var, Vec<Var>)> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut h = tape.leaf(x, false);
        let mut params = Vec::new();
        for (i, (l, p)) in self.net.layers.iter().zip(&self.layers).enumerate() {
            h = match (&l.config, p) {
                (LayerConfig::Conv { stride, padding, .. }, LayerParams::Conv { w, b }) => {
                    let (wv, bv) = (tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
                    params.extend([wv, bv]);
                    tape.conv2d(h, wv, bv, *stride, *padding)?
                }
                (LayerConfig::Linear { .. }, LayerParams::Linear { w, b }) => {
                    let (wv, bv) = (tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
                    params.extend([wv, bv]);
                    tape.dense(h, wv, bv)?
                }
                (LayerConfig::Avgpool { kernel, stride, .. }, _) => tape.avgpool2d(h, *kernel, *stride)?,
                (LayerConfig::Dropout { rate, .. }, _) => match &mut mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let mask = (0..tape.value(h).len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        tape.scale(h, mask)?
                    }
                    _ => h,
                },
                (LayerConfig::Activation { .. }, LayerParams::Gate(g)) => {
                    let wv = g.weights.as_ref().map(|w| tape.leaf(w.clone(), true));
                    params.extend(wv);
                    let flips = match (&mut mode, g.noise) {
                        (Mode::Train(rng), Some(n)) => Some(relu_variants::sample_flips(tape.value(h).len(), n.p_keep, *rng)?),
                        (Mode::Eval, _) => self.batch_flips(i, batch)?,
                        _ => None,
                    };
                    tape.gate(h, &g.spec, wv, self.temperature, flips.as_deref())?
                }
                (LayerConfig::Activation { .. }, _) => tape.relu(h)?,
                _ => return Err(Error::config(format!("layer `{}` has mismatched parameters", l.name()))),
            };
        }
        Ok((h, params))
    }

    /// Plaintext float forward pass returning every layer's output.
    pub fn trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.trace_until(x, self.net.layers.len())
    }

    fn trace_until(&self, x: &Tensor, end: usize) -> Result<Vec<Tensor>> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut outs: Vec<Tensor> = Vec::with_capacity(end);
        for (i, (l, p)) in self.net.layers.iter().zip(&self.layers).enumerate().take(end) {
            let input = outs.last().unwrap_or(x);
            let out = match (&l.config, p) {
                (LayerConfig::Conv { stride, padding, .. }, LayerParams::Conv { w, b }) => {
                    kernels::conv2d_forward(input, w, b, *stride, *padding)?
                }
                (LayerConfig::Linear { .. }, LayerParams::Linear { w, b }) => kernels::dense_forward(input, w, b)?,
                (LayerConfig::Avgpool { kernel, stride, .. }, _) => kernels::avgpool_forward(input, *kernel, *stride)?,
                (LayerConfig::Dropout { .. }, _) => input.clone(),
                (LayerConfig::Activation { .. }, LayerParams::Gate(g)) => {
                    let flips = self.batch_flips(i, batch)?;
                    let x4 = as_planes(input, l.input)?;
                    let (y, _) = relu_variants::soft_gate_forward_with_flips(&x4, &g.effective_spec(), 1.0, flips.as_deref())?;
                    y.reshape(input.shape())?
                }
                (LayerConfig::Activation { .. }, _) => relu_variants::relu(input),
                _ => return Err(Error::config(format!("layer `{}` has mismatched parameters", l.name()))),
            };
            out.ensure_finite(l.name())?;
            outs.push(out);
        }
        Ok(outs)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trace(x)?.pop().expect("at least one layer"))
    }

    /// The tensor entering `layer` (the pre-activation for activation layers).
    pub fn activation_input(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        if layer == 0 {
            return Ok(x.clone());
        }
        Ok(self.trace_until(x, layer)?.pop().expect("non-empty trace"))
    }

    /// Predicted classes for every example, evaluated in parallel chunks.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let chunks: Vec<Vec<usize>> = (0..data.len()).collect::<Vec<_>>().chunks(128).map(<[usize]>::to_vec).collect();
        let preds = chunks
            .par_iter()
            .map(|idx| {
                let (x, _) = data.batch(idx)?;
                Ok(self.forward(&x)?.argmax_rows())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(preds.concat())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let preds = self.predict(data)?;
        let hits = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

fn gate_params(spec: GroupingSpec, kind: GateKind, noise: Option<NoiseConfig>) -> Result<LayerParams> {
    spec.validate()?;
    let weights = match &spec.gate {
        GateWeights::Learned { weights } => {
            let hw = spec.plane_len();
            Some(Tensor::new(vec![weights.len(), hw], weights.concat())?)
        }
        _ => None,
    };
    Ok(LayerParams::Gate(GateParams {
        spec,
        weights,
        kind,
        noise,
    }))
}

fn load_spec_file(net: &ResolvedNetwork, layer: &str, file: Option<&str>) -> Result<GroupingSpec> {
    let Some(file) = file else {
        return Err(Error::config(format!(
            "layer `{layer}` uses clustered groups but names no grouping file"
        )));
    };
    let path = net.resolve_path(file);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::config(format!(
            "grouping file {} for layer `{layer}`: {e} (run the cluster command first)",
            path.display()
        ))
    })?;
    let spec: GroupingSpec = serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

fn as_planes(x: &Tensor, shape: ActShape) -> Result<Tensor> {
    let (c, h, w) = plane_dims(shape)?;
    let n = x.len() / (c * h * w).max(1);
    x.clone().reshape(&[n, c, h, w])
}
