//! Fixed-point network evaluation: a plaintext reference engine and the
//! shared evaluation it must match bit for bit.

use std::collections::BTreeMap;

use serde::Serialize;

use super::fixed::FixedPoint;
use super::ledger::{MessageLog, Party};
use super::protocols::Session;
use super::ring::Ring;
use super::shares::{ShareTriple, SharedTensor};
use crate::config::{ActShape, LayerConfig};
use crate::cost::{cost_network, CostReport, NetworkDescriptor, OpTag};
use crate::error::{Error, Result};
use crate::model::{LayerParams, Model};
use crate::relu_variants::{GateWeights, GroupingSpec};
use crate::tensor::kernels::{im2col, ConvGeometry};

/// Gate weights as seen by the evaluating parties.
#[derive(Debug, Clone, PartialEq)]
pub enum GateSecret {
    /// One-hot gates; nothing to multiply.
    None,
    /// Learned `[C, H*W]` weights published with the architecture.
    Public(Vec<u64>),
    /// Learned weights kept secret-shared.
    Private(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixedLayer {
    Conv {
        name: String,
        geom: ConvGeometry,
        out_channels: usize,
        /// `[out_channels, C*f*f]`.
        w: Vec<u64>,
        b: Vec<u64>,
    },
    Linear {
        name: String,
        n: usize,
        v: usize,
        /// `[n, v]`.
        w: Vec<u64>,
        b: Vec<u64>,
    },
    Avgpool {
        name: String,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        out_height: usize,
        out_width: usize,
    },
    Dropout {
        name: String,
    },
    Gate {
        name: String,
        channels: usize,
        spec: GroupingSpec,
        weights: GateSecret,
        flips: Option<Vec<bool>>,
    },
}

impl FixedLayer {
    pub fn name(&self) -> &str {
        match self {
            FixedLayer::Conv { name, .. }
            | FixedLayer::Linear { name, .. }
            | FixedLayer::Avgpool { name, .. }
            | FixedLayer::Dropout { name }
            | FixedLayer::Gate { name, .. } => name,
        }
    }
}

/// A model with every parameter encoded in the ring, plus the cost
/// prediction its shared evaluation must reconcile with.
#[derive(Debug, Clone)]
pub struct FixedModel {
    pub fp: FixedPoint,
    pub log_p: u32,
    pub input_len: usize,
    pub layers: Vec<FixedLayer>,
    pub report: CostReport,
}

fn map_dims(shape: ActShape) -> (usize, usize, usize) {
    match shape {
        ActShape::Map { channels, height, width } => (channels, height, width),
        ActShape::Flat(n) => (n, 1, 1),
    }
}

impl FixedModel {
    pub fn from_model(model: &Model) -> Result<Self> {
        let net = model.network();
        let proto = &net.protocol;
        let fp = FixedPoint::new(Ring::new(proto.ring_bits)?, proto.scale_bits)?;
        let encode = |t: &crate::tensor::Tensor, what: &str| {
            fp.encode_all(t.data())
                .map_err(|e| Error::invalid(format!("encoding {what}: {e}")))
        };
        let mut layers = Vec::with_capacity(net.layers.len());
        for (i, (l, p)) in net.layers.iter().zip(model.layers()).enumerate() {
            let name = l.name().to_string();
            let layer = match (&l.config, p) {
                (LayerConfig::Conv { out_channels, kernel, stride, padding, .. }, LayerParams::Conv { w, b }) => {
                    let (c, h, wd) = map_dims(l.input);
                    FixedLayer::Conv {
                        geom: ConvGeometry::new(c, h, wd, *kernel, *stride, *padding)?,
                        out_channels: *out_channels,
                        w: encode(w, &format!("{name}.weight"))?,
                        b: encode(b, &format!("{name}.bias"))?,
                        name,
                    }
                }
                (LayerConfig::Linear { in_features, out_features, .. }, LayerParams::Linear { w, b }) => FixedLayer::Linear {
                    n: *in_features,
                    v: *out_features,
                    w: encode(w, &format!("{name}.weight"))?,
                    b: encode(b, &format!("{name}.bias"))?,
                    name,
                },
                (LayerConfig::Avgpool { kernel, stride, .. }, _) => {
                    let (channels, height, width) = map_dims(l.input);
                    let (_, out_height, out_width) = map_dims(l.output);
                    FixedLayer::Avgpool {
                        name,
                        channels,
                        height,
                        width,
                        kernel: *kernel,
                        stride: *stride,
                        out_height,
                        out_width,
                    }
                }
                (LayerConfig::Dropout { .. }, _) => FixedLayer::Dropout { name },
                (LayerConfig::Activation { .. }, LayerParams::Gate(g)) => {
                    let (channels, h, w) = map_dims(l.input);
                    g.spec.check_against(channels, h, w)?;
                    let weights = match &g.weights {
                        None => GateSecret::None,
                        Some(t) if g.private_weights() => GateSecret::Private(encode(t, &format!("{name}.gate"))?),
                        Some(t) => GateSecret::Public(encode(t, &format!("{name}.gate"))?),
                    };
                    FixedLayer::Gate {
                        channels,
                        spec: g.spec.clone(),
                        weights,
                        flips: model.inference_flips(i)?,
                        name,
                    }
                }
                (LayerConfig::Activation { .. }, _) => {
                    let (channels, h, w) = map_dims(l.input);
                    FixedLayer::Gate {
                        name,
                        channels,
                        spec: GroupingSpec::one_hot_self(h, w),
                        weights: GateSecret::None,
                        flips: None,
                    }
                }
                _ => return Err(Error::config(format!("layer `{name}` has mismatched parameters"))),
            };
            layers.push(layer);
        }
        let report = cost_network(&NetworkDescriptor::from_model(model)?, &proto.params())?;
        Ok(FixedModel {
            fp,
            log_p: proto.log_p,
            input_len: net.input.channels * net.input.height * net.input.width,
            layers,
            report,
        })
    }

    pub fn ring(&self) -> Ring {
        self.fp.ring
    }

    pub fn encode_input(&self, x: &[f64]) -> Result<Vec<u64>> {
        if x.len() != self.input_len {
            return Err(Error::shape(format!("input has {} values, the network takes {}", x.len(), self.input_len)));
        }
        self.fp.encode_all(x)
    }

    /// Plaintext fixed-point forward pass with every intermediate checked to
    /// fit the signed ring range. Returns each layer's output.
    pub fn reference(&self, x: &[u64]) -> Result<Vec<Vec<u64>>> {
        let r = Reference { ring: self.ring(), s: self.fp.scale_bits };
        let mut outs: Vec<Vec<u64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outs.last().map_or(x, Vec::as_slice);
            let out = r.layer(layer, input)?;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Shared forward pass. Returns each layer's output shares.
    pub fn evaluate(&self, session: &mut Session, x: &[u64]) -> Result<Vec<SharedTensor>> {
        let mut h = session.share(Party::P1, x);
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = sim_layer(layer, &h, session)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

struct Reference {
    ring: Ring,
    s: u32,
}

impl Reference {
    fn fit(&self, v: i128, layer: &str, element: usize) -> Result<i128> {
        if self.ring.fits(v) {
            Ok(v)
        } else {
            Err(Error::Overflow {
                layer: layer.to_string(),
                element,
            })
        }
    }

    fn signed(&self, x: u64) -> i128 {
        i128::from(self.ring.to_signed(x))
    }

    fn back(&self, v: i128) -> u64 {
        self.ring.from_signed(v as i64)
    }

    /// `acc >> s + bias`, both steps range-checked.
    fn rescale(&self, acc: i128, bias: u64, layer: &str, element: usize) -> Result<u64> {
        let acc = self.fit(acc, layer, element)?;
        let v = self.fit((acc >> self.s) + self.signed(bias), layer, element)?;
        Ok(self.back(v))
    }

    fn layer(&self, layer: &FixedLayer, x: &[u64]) -> Result<Vec<u64>> {
        let name = layer.name();
        match layer {
            FixedLayer::Conv { geom, out_channels, w, b, .. } => {
                check_len(x, geom.input_len(), name)?;
                let cols = im2col(x, geom);
                let (k, p) = (geom.patch_len(), geom.positions());
                let mut out = Vec::with_capacity(out_channels * p);
                for o in 0..*out_channels {
                    for q in 0..p {
                        let acc: i128 = (0..k).map(|j| self.signed(w[o * k + j]) * self.signed(cols[j * p + q])).sum();
                        out.push(self.rescale(acc, b[o], name, o * p + q)?);
                    }
                }
                Ok(out)
            }
            FixedLayer::Linear { n, v, w, b, .. } => {
                check_len(x, *n, name)?;
                (0..*v)
                    .map(|j| {
                        let acc: i128 = (0..*n).map(|i| self.signed(x[i]) * self.signed(w[i * v + j])).sum();
                        self.rescale(acc, b[j], name, j)
                    })
                    .collect()
            }
            FixedLayer::Avgpool { channels, height, width, kernel, stride, out_height, out_width, .. } => {
                check_len(x, channels * height * width, name)?;
                let c = i128::from(self.ring.to_signed(pool_factor(self.s, *kernel)));
                let mut out = Vec::with_capacity(channels * out_height * out_width);
                for ch in 0..*channels {
                    for oy in 0..*out_height {
                        for ox in 0..*out_width {
                            let element = out.len();
                            let mut acc = 0i128;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let (y, xx) = (oy * stride + ky, ox * stride + kx);
                                    acc += self.signed(x[(ch * height + y) * width + xx]);
                                }
                            }
                            let acc = self.fit(acc, name, element)?;
                            let v = self.fit(acc * c, name, element)? >> self.s;
                            out.push(self.back(v));
                        }
                    }
                }
                Ok(out)
            }
            FixedLayer::Dropout { .. } => Ok(x.to_vec()),
            FixedLayer::Gate { channels, spec, weights, flips, .. } => {
                let hw = spec.plane_len();
                check_len(x, channels * hw, name)?;
                let mut out = vec![0u64; x.len()];
                for ch in 0..*channels {
                    let plane = &x[ch * hw..(ch + 1) * hw];
                    for (gi, members) in spec.groups(ch).iter().enumerate() {
                        let gate = match (&spec.gate, weights) {
                            (GateWeights::OneHotSelf, _) => self.signed(plane[members[0]]),
                            (GateWeights::OneHotSource { sources }, _) => self.signed(plane[sources.get(ch)[gi]]),
                            (GateWeights::Learned { .. }, GateSecret::Public(w) | GateSecret::Private(w)) => {
                                let acc: i128 = members
                                    .iter()
                                    .map(|&p| self.signed(w[ch * hw + p]) * self.signed(plane[p]))
                                    .sum();
                                self.fit(acc, name, ch * hw + members[0])? >> self.s
                            }
                            (GateWeights::Learned { .. }, GateSecret::None) => {
                                return Err(Error::config(format!("layer `{name}` has learned gates but no weights")))
                            }
                        };
                        for &p in members {
                            let i = ch * hw + p;
                            let pass = (gate >= 0) != flips.as_ref().is_some_and(|f| f[i]);
                            if pass {
                                out[i] = x[i];
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

fn check_len<T>(x: &[T], want: usize, layer: &str) -> Result<()> {
    if x.len() == want {
        Ok(())
    } else {
        Err(Error::shape(format!("layer `{layer}` expects {want} inputs, got {}", x.len())))
    }
}

/// Public multiplier `round(2^s / k^2)` of a `k x k` average.
pub fn pool_factor(scale_bits: u32, kernel: usize) -> u64 {
    ((1u64 << scale_bits) as f64 / (kernel * kernel) as f64).round() as u64
}

/// Shared `x (1 x n) . W (n x v)` followed by truncation.
pub fn sim_linear(x: &SharedTensor, w: &SharedTensor, n: usize, v: usize, session: &mut Session) -> Result<SharedTensor> {
    let z = session.matmul(x, w, 1, n, v, OpTag::Linear)?;
    Ok(session.truncate(&z))
}

/// Shared convolution of one `[C, H, W]` image by `[O, C*f*f]` filters,
/// followed by truncation. Output is `[O, H', W']`.
pub fn sim_conv(x: &SharedTensor, w: &SharedTensor, geom: &ConvGeometry, out_channels: usize, session: &mut Session) -> Result<SharedTensor> {
    x.check_len(geom.input_len(), "convolution input")?;
    let cols = SharedTensor {
        s0: im2col(&x.s0, geom),
        s1: im2col(&x.s1, geom),
    };
    let z = session.matmul(w, &cols, out_channels, geom.patch_len(), geom.positions(), OpTag::Conv)?;
    Ok(session.truncate(&z))
}

/// Shared sign bit of one shared value.
pub fn sim_drelu(t: ShareTriple, session: &mut Session) -> Result<ShareTriple> {
    let x = SharedTensor {
        s0: vec![t.share0],
        s1: vec![t.share1],
    };
    Ok(session.drelu(&x)?.get(0))
}

/// Shared gated activation over `channels` planes of `s`.
///
/// Gate values are formed per group (a local pick for one-hot gates, a local
/// weighted sum for public weights, a shared dot product for private
/// weights), one DReLU runs per group, flipped bits become `1 - b`, and one
/// product per activation applies the bit.
pub fn sim_grelu_layer(
    s: &SharedTensor,
    channels: usize,
    spec: &GroupingSpec,
    weights: &GateSecret,
    flips: Option<&[bool]>,
    session: &mut Session,
) -> Result<SharedTensor> {
    let ring = session.ring();
    let hw = spec.plane_len();
    s.check_len(channels * hw, "gated activation input")?;
    spec.check_against(channels, spec.height, spec.width)?;
    if let Some(f) = flips {
        if f.len() != s.len() {
            return Err(Error::shape("flip mask does not match the activation tensor"));
        }
    }
    let groups: Vec<Vec<usize>> = (0..channels)
        .flat_map(|ch| spec.groups(ch).iter().map(move |g| g.iter().map(|&p| ch * hw + p).collect::<Vec<_>>()))
        .collect();

    let gates = match (&spec.gate, weights) {
        (GateWeights::OneHotSelf, _) => {
            let pick = |v: &[u64]| groups.iter().map(|g| v[g[0]]).collect::<Vec<_>>();
            SharedTensor { s0: pick(&s.s0), s1: pick(&s.s1) }
        }
        (GateWeights::OneHotSource { sources }, _) => {
            let idx: Vec<usize> = (0..channels)
                .flat_map(|ch| sources.get(ch).iter().map(move |&q| ch * hw + q))
                .collect();
            let pick = |v: &[u64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            SharedTensor { s0: pick(&s.s0), s1: pick(&s.s1) }
        }
        (GateWeights::Learned { .. }, GateSecret::Public(w)) => {
            let dot = |v: &[u64]| {
                groups
                    .iter()
                    .map(|g| g.iter().fold(0, |a, &p| ring.add(a, ring.mul(w[p], v[p]))))
                    .collect::<Vec<_>>()
            };
            let z = SharedTensor { s0: dot(&s.s0), s1: dot(&s.s1) };
            session.truncate(&z)
        }
        (GateWeights::Learned { .. }, GateSecret::Private(w)) => {
            let sw = session.share(Party::P0, w);
            let z = session.dot_groups(&sw, s, &groups, OpTag::Gate)?;
            session.truncate(&z)
        }
        (GateWeights::Learned { .. }, GateSecret::None) => {
            return Err(Error::invalid("learned gates need weights"));
        }
    };

    let bits = session.drelu(&gates)?;
    let mut b = SharedTensor {
        s0: vec![0; s.len()],
        s1: vec![0; s.len()],
    };
    for (gi, g) in groups.iter().enumerate() {
        for &p in g {
            let (b0, b1) = (bits.s0[gi], bits.s1[gi]);
            // 1 - b: P0 adds the public one, both negate.
            let (b0, b1) = if flips.is_some_and(|f| f[p]) {
                (ring.sub(1, b0), ring.neg(b1))
            } else {
                (b0, b1)
            };
            b.s0[p] = b0;
            b.s1[p] = b1;
        }
    }
    session.mul(s, &b, OpTag::Mul)
}

fn sim_layer(layer: &FixedLayer, x: &SharedTensor, session: &mut Session) -> Result<SharedTensor> {
    let ring = session.ring();
    match layer {
        FixedLayer::Conv { geom, out_channels, w, b, .. } => {
            let sw = session.share(Party::P0, w);
            let sb = session.share(Party::P0, b);
            let z = sim_conv(x, &sw, geom, *out_channels, session)?;
            let p = geom.positions();
            let add_bias = |v: &[u64], bias: &[u64]| {
                v.iter().enumerate().map(|(i, &a)| ring.add(a, bias[i / p])).collect::<Vec<_>>()
            };
            Ok(SharedTensor {
                s0: add_bias(&z.s0, &sb.s0),
                s1: add_bias(&z.s1, &sb.s1),
            })
        }
        FixedLayer::Linear { n, v, w, b, .. } => {
            let sw = session.share(Party::P0, w);
            let sb = session.share(Party::P0, b);
            let z = sim_linear(x, &sw, *n, *v, session)?;
            Ok(SharedTensor {
                s0: ring.add_vec(&z.s0, &sb.s0),
                s1: ring.add_vec(&z.s1, &sb.s1),
            })
        }
        FixedLayer::Avgpool { channels, height, width, kernel, stride, out_height, out_width, .. } => {
            let c = pool_factor(session.fp.scale_bits, *kernel);
            let pool = |v: &[u64]| {
                let mut out = Vec::with_capacity(channels * out_height * out_width);
                for ch in 0..*channels {
                    for oy in 0..*out_height {
                        for ox in 0..*out_width {
                            let mut acc = 0u64;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    acc = ring.add(acc, v[(ch * height + oy * stride + ky) * width + ox * stride + kx]);
                                }
                            }
                            out.push(ring.mul(acc, c));
                        }
                    }
                }
                out
            };
            let z = SharedTensor { s0: pool(&x.s0), s1: pool(&x.s1) };
            Ok(session.truncate(&z))
        }
        FixedLayer::Dropout { .. } => Ok(x.clone()),
        FixedLayer::Gate { channels, spec, weights, flips, .. } => {
            sim_grelu_layer(x, *channels, spec, weights, flips.as_deref(), session)
        }
    }
}

/// Result of one simulated inference.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    /// Reconstructed logits (ring elements).
    pub logits: Vec<u64>,
    /// Reference engine logits.
    pub reference: Vec<u64>,
    /// Layer name of the first output that differs from the reference.
    pub first_mismatch: Option<String>,
    pub log: MessageLog,
}

impl SimOutcome {
    pub fn equivalent(&self) -> bool {
        self.first_mismatch.is_none()
    }

    pub fn decoded(&self, fp: &FixedPoint) -> Vec<f64> {
        self.logits.iter().map(|&v| fp.decode(v)).collect()
    }
}

/// Runs the reference engine, then the shared evaluation with `seed` as
/// the master seed, and compares every layer's output.
pub fn sim_network(fm: &FixedModel, input: &[f64], seed: u64) -> Result<SimOutcome> {
    let x = fm.encode_input(input)?;
    let reference = fm.reference(&x)?;
    let mut session = Session::new(fm.fp, fm.log_p, seed);
    let shared = fm.evaluate(&mut session, &x)?;
    let ring = fm.ring();
    let first_mismatch = fm
        .layers
        .iter()
        .zip(shared.iter().zip(&reference))
        .find(|(_, (s, r))| s.reconstruct(&ring) != **r)
        .map(|(l, _)| l.name().to_string());
    let logits = shared.last().map(|s| s.reconstruct(&ring)).unwrap_or_default();
    let log = session.into_log();
    log.check_invariants()?;
    Ok(SimOutcome {
        logits,
        reference: reference.last().cloned().unwrap_or_default(),
        first_mismatch,
        log,
    })
}

/// Logged totals against the cost model, per category and in rounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconciliation {
    pub rounds_logged: u64,
    pub rounds_predicted: u64,
    pub bits_logged: BTreeMap<OpTag, u64>,
    pub bits_predicted: BTreeMap<OpTag, u64>,
    pub mismatches: Vec<String>,
}

impl Reconciliation {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::Reconciliation(self.mismatches.join("; ")))
        }
    }
}

pub fn reconcile(log: &MessageLog, report: &CostReport) -> Reconciliation {
    let bits_logged: BTreeMap<OpTag, u64> = log.bytes_by_tag().into_iter().map(|(t, b)| (t, b * 8)).collect();
    let bits_predicted = report.by_tag();
    let mut mismatches = Vec::new();
    if log.rounds() != report.total_rounds {
        mismatches.push(format!("rounds: logged {}, predicted {}", log.rounds(), report.total_rounds));
    }
    for tag in OpTag::ALL {
        let (l, p) = (
            bits_logged.get(&tag).copied().unwrap_or(0),
            bits_predicted.get(&tag).copied().unwrap_or(0),
        );
        if l != p {
            mismatches.push(format!("{}: logged {l} bits, predicted {p}", tag.as_str()));
        }
    }
    Reconciliation {
        rounds_logged: log.rounds(),
        rounds_predicted: report.total_rounds,
        bits_logged,
        bits_predicted,
        mismatches,
    }
}
