//! Analytical rounds and communication of three-party secure inference.
//!
//! | operation         | rounds | bits                          |
//! |-------------------|--------|-------------------------------|
//! | `Linear(m, n, v)` | 2      | `(2mn + 2nv + mv) l`          |
//! | `Conv(m, i, f, o)`| 2      | `(2m²f²i + 2f²oi + m²o) l`    |
//! | DReLU             | 8      | `(8 log p + 19) l`            |
//! | Mul               | 2      | `5 l`                         |
//!
//! A (shared-gate) ReLU layer costs one DReLU per group plus one Mul per
//! activation, in 10 rounds. Average pooling is local and free.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{ActShape, ActivationVariant, GateKind, GroupSource, LayerConfig, ResolvedNetwork};
use crate::error::{Error, Result};
use crate::model::{clustered_group_count, LayerParams, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Ring bit width `l`.
    pub ring_bits: u32,
    /// The `log p` term of the DReLU cost.
    pub log_p: u32,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams { ring_bits: 64, log_p: 8 }
    }
}

impl ProtocolParams {
    pub fn new(ring_bits: u32, log_p: u32) -> Result<Self> {
        if ring_bits < 8 || !ring_bits.is_multiple_of(8) {
            return Err(Error::invalid(format!("ring width must be a multiple of 8 and at least 8, got {ring_bits}")));
        }
        Ok(ProtocolParams { ring_bits, log_p })
    }

    fn l(&self) -> u64 {
        u64::from(self.ring_bits)
    }

    /// Ring elements exchanged by one DReLU: `8 log p + 19`.
    pub fn drelu_elements(&self) -> u64 {
        8 * u64::from(self.log_p) + 19
    }
}

/// Message categories shared by the cost model and the simulator's ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpTag {
    Conv,
    Linear,
    /// Private gate dot products `v_g . s`.
    Gate,
    Drelu,
    Mul,
    /// Fixed-point truncation; modeled at zero cost.
    Trunc,
}

impl OpTag {
    pub const ALL: [OpTag; 6] = [OpTag::Conv, OpTag::Linear, OpTag::Gate, OpTag::Drelu, OpTag::Mul, OpTag::Trunc];

    pub fn as_str(&self) -> &'static str {
        match self {
            OpTag::Conv => "conv",
            OpTag::Linear => "linear",
            OpTag::Gate => "gate",
            OpTag::Drelu => "drelu",
            OpTag::Mul => "mul",
            OpTag::Trunc => "trunc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCost {
    pub rounds: u64,
    pub comm_bits: u64,
}

impl OpCost {
    pub fn bytes(&self) -> u64 {
        self.comm_bits / 8
    }
}

/// Ring elements of a Beaver matrix product `(m x n)(n x v)`.
pub fn linear_elements(m: u64, n: u64, v: u64) -> u64 {
    2 * m * n + 2 * n * v + m * v
}

pub fn cost_linear(m: usize, n: usize, v: usize, params: &ProtocolParams) -> OpCost {
    OpCost {
        rounds: 2,
        comm_bits: linear_elements(m as u64, n as u64, v as u64) * params.l(),
    }
}

/// Convolution over `positions` output sites. For a same-padded `m x m`
/// input `positions = m²`, which is the tabulated formula.
pub fn cost_conv_positions(positions: usize, i: usize, f: usize, o: usize, params: &ProtocolParams) -> OpCost {
    cost_linear(positions, f * f * i, o, params)
}

pub fn cost_conv(m: usize, i: usize, f: usize, o: usize, params: &ProtocolParams) -> OpCost {
    cost_conv_positions(m * m, i, f, o, params)
}

pub fn cost_drelu(params: &ProtocolParams) -> OpCost {
    OpCost {
        rounds: 8,
        comm_bits: params.drelu_elements() * params.l(),
    }
}

pub fn cost_mul(params: &ProtocolParams) -> OpCost {
    OpCost {
        rounds: 2,
        comm_bits: 5 * params.l(),
    }
}

pub fn cost_relu_layer(activations: usize, groups: usize, params: &ProtocolParams) -> Result<OpCost> {
    if groups == 0 || groups > activations {
        return Err(Error::invalid(format!(
            "a ReLU layer needs 1 <= groups <= activations, got {groups} groups for {activations} activations"
        )));
    }
    Ok(OpCost {
        rounds: cost_drelu(params).rounds + cost_mul(params).rounds,
        comm_bits: groups as u64 * cost_drelu(params).comm_bits + activations as u64 * cost_mul(params).comm_bits,
    })
}

/// Private gate dot products: one `Linear(1, |g|, 1)` per group, all in the
/// same two rounds. Since groups partition the plane this is
/// `(4 * activations + groups) l`.
pub fn cost_private_gate(activations: usize, groups: usize, params: &ProtocolParams) -> OpCost {
    OpCost {
        rounds: 2,
        comm_bits: (4 * activations as u64 + groups as u64) * params.l(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDescriptor {
    Conv {
        name: String,
        positions: usize,
        in_channels: usize,
        kernel: usize,
        out_channels: usize,
    },
    Linear {
        name: String,
        m: usize,
        n: usize,
        v: usize,
    },
    Avgpool {
        name: String,
    },
    Dropout {
        name: String,
    },
    Relu {
        name: String,
        channels: usize,
        activations: usize,
    },
    Grelu {
        name: String,
        channels: usize,
        activations: usize,
        groups: usize,
        private_gate: bool,
    },
}

impl LayerDescriptor {
    pub fn name(&self) -> &str {
        match self {
            LayerDescriptor::Conv { name, .. }
            | LayerDescriptor::Linear { name, .. }
            | LayerDescriptor::Avgpool { name }
            | LayerDescriptor::Dropout { name }
            | LayerDescriptor::Relu { name, .. }
            | LayerDescriptor::Grelu { name, .. } => name,
        }
    }

    /// `(n_drelu, n_mul)` of an activation layer.
    pub fn gate_ops(&self) -> Option<(usize, usize)> {
        match *self {
            LayerDescriptor::Relu { activations, .. } => Some((activations, activations)),
            LayerDescriptor::Grelu { activations, groups, .. } => Some((groups, activations)),
            _ => None,
        }
    }

    pub fn channels(&self) -> Option<usize> {
        match *self {
            LayerDescriptor::Relu { channels, .. } | LayerDescriptor::Grelu { channels, .. } => Some(channels),
            _ => None,
        }
    }

    fn dims(&self) -> String {
        match self {
            LayerDescriptor::Conv {
                positions,
                in_channels,
                kernel,
                out_channels,
                ..
            } => format!("P={positions} i={in_channels} f={kernel} o={out_channels}"),
            LayerDescriptor::Linear { m, n, v, .. } => format!("m={m} n={n} v={v}"),
            LayerDescriptor::Avgpool { .. } | LayerDescriptor::Dropout { .. } => String::new(),
            LayerDescriptor::Relu { activations, .. } => format!("n={activations}"),
            LayerDescriptor::Grelu {
                activations,
                groups,
                private_gate,
                ..
            } => format!("n={activations} groups={groups}{}", if *private_gate { " private" } else { "" }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NetworkDescriptor {
    pub name: String,
    pub variant: String,
    pub layers: Vec<LayerDescriptor>,
}

fn map_dims(shape: ActShape) -> (usize, usize, usize) {
    match shape {
        ActShape::Map { channels, height, width } => (channels, height, width),
        ActShape::Flat(n) => (n, 1, 1),
    }
}

impl NetworkDescriptor {
    /// Descriptor with group counts derived from the configuration alone.
    pub fn from_network(net: &ResolvedNetwork) -> Result<Self> {
        Self::build(net, |_, g| {
            let (c, h, w) = map_dims(g.1);
            Ok(match g.0 {
                GroupSource::Uniform(k) => h.div_ceil(*k) * w.div_ceil(*k) * c,
                GroupSource::Clustered { window, k, .. } => clustered_group_count(h, w, *window, *k) * c,
            })
        })
    }

    /// Descriptor with group counts read from the model's actual specs.
    pub fn from_model(model: &Model) -> Result<Self> {
        Self::build(model.network(), |i, g| match &model.layers()[i] {
            LayerParams::Gate(p) => Ok((0..map_dims(g.1).0).map(|c| p.spec.group_count(c)).sum()),
            _ => Err(Error::config("model layer lacks gate parameters")),
        })
    }

    fn build(
        net: &ResolvedNetwork,
        groups_of: impl Fn(usize, (&GroupSource, ActShape)) -> Result<usize>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(net.layers.len());
        for (i, l) in net.layers.iter().enumerate() {
            let name = l.name().to_string();
            let d = match (&l.config, &l.activation) {
                (
                    LayerConfig::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    _,
                ) => {
                    let (_, oh, ow) = map_dims(l.output);
                    LayerDescriptor::Conv {
                        name,
                        positions: oh * ow,
                        in_channels: *in_channels,
                        kernel: *kernel,
                        out_channels: *out_channels,
                    }
                }
                (
                    LayerConfig::Linear {
                        in_features,
                        out_features,
                        ..
                    },
                    _,
                ) => LayerDescriptor::Linear {
                    name,
                    m: 1,
                    n: *in_features,
                    v: *out_features,
                },
                (LayerConfig::Avgpool { .. }, _) => LayerDescriptor::Avgpool { name },
                (LayerConfig::Dropout { .. }, _) => LayerDescriptor::Dropout { name },
                (LayerConfig::Activation { .. }, Some(ActivationVariant::Grelu(g))) => {
                    let (c, h, w) = map_dims(l.input);
                    let groups = groups_of(i, (&g.groups, l.input))?;
                    let activations = c * h * w;
                    if groups == activations && g.gate == GateKind::Middle {
                        LayerDescriptor::Relu {
                            name,
                            channels: c,
                            activations,
                        }
                    } else {
                        LayerDescriptor::Grelu {
                            name,
                            channels: c,
                            activations,
                            groups,
                            private_gate: g.gate == GateKind::LearnedPrivate,
                        }
                    }
                }
                (LayerConfig::Activation { .. }, _) => {
                    let (c, _, _) = map_dims(l.input);
                    LayerDescriptor::Relu {
                        name,
                        channels: c,
                        activations: l.input.numel(),
                    }
                }
            };
            layers.push(d);
        }
        Ok(NetworkDescriptor {
            name: net.name.clone(),
            variant: net.variant.clone(),
            layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub layer: String,
    pub kind: String,
    pub dims: String,
    pub rounds: u64,
    pub comm_bits: u64,
    /// Bits per message category.
    pub components: BTreeMap<OpTag, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub network: String,
    pub variant: String,
    pub params: ProtocolParams,
    pub entries: Vec<CostEntry>,
    pub total_rounds: u64,
    pub total_comm_bits: u64,
    pub total_mb: f64,
}

/// Megabytes of `bits`, with 1 MB = 10⁶ bytes.
pub fn bits_to_mb(bits: u64) -> f64 {
    bits as f64 / 8.0 / 1e6
}

fn entry(layer: &str, kind: &str, dims: String, rounds: u64, parts: &[(OpTag, u64)]) -> CostEntry {
    let mut components = BTreeMap::new();
    for &(t, b) in parts {
        *components.entry(t).or_insert(0) += b;
    }
    CostEntry {
        layer: layer.to_string(),
        kind: kind.to_string(),
        dims,
        rounds,
        comm_bits: parts.iter().map(|p| p.1).sum(),
        components,
    }
}

pub fn cost_network(net: &NetworkDescriptor, params: &ProtocolParams) -> Result<CostReport> {
    let mut entries = Vec::new();
    let drelu = cost_drelu(params);
    let mul = cost_mul(params);
    for d in &net.layers {
        let name = d.name();
        match *d {
            LayerDescriptor::Conv {
                positions,
                in_channels,
                kernel,
                out_channels,
                ..
            } => {
                if positions == 0 || in_channels == 0 || kernel == 0 || out_channels == 0 {
                    return Err(Error::invalid(format!("layer `{name}` has a zero dimension")));
                }
                let c = cost_conv_positions(positions, in_channels, kernel, out_channels, params);
                entries.push(entry(name, "conv", d.dims(), c.rounds, &[(OpTag::Conv, c.comm_bits)]));
            }
            LayerDescriptor::Linear { m, n, v, .. } => {
                if m == 0 || n == 0 || v == 0 {
                    return Err(Error::invalid(format!("layer `{name}` has a zero dimension")));
                }
                let c = cost_linear(m, n, v, params);
                entries.push(entry(name, "linear", d.dims(), c.rounds, &[(OpTag::Linear, c.comm_bits)]));
            }
            LayerDescriptor::Avgpool { .. } => entries.push(entry(name, "avgpool", d.dims(), 0, &[])),
            LayerDescriptor::Dropout { .. } => entries.push(entry(name, "dropout", d.dims(), 0, &[])),
            LayerDescriptor::Relu { activations, .. } | LayerDescriptor::Grelu { activations, .. } => {
                let (groups, _) = d.gate_ops().expect("activation layer");
                if let LayerDescriptor::Grelu { private_gate: true, .. } = d {
                    let g = cost_private_gate(activations, groups, params);
                    entries.push(entry(
                        &format!("{name}.gate"),
                        "gate",
                        format!("groups={groups} members={activations}"),
                        g.rounds,
                        &[(OpTag::Gate, g.comm_bits)],
                    ));
                }
                let c = cost_relu_layer(activations, groups, params)?;
                let kind = if matches!(d, LayerDescriptor::Relu { .. }) { "relu" } else { "grelu" };
                entries.push(entry(
                    name,
                    kind,
                    d.dims(),
                    c.rounds,
                    &[
                        (OpTag::Drelu, groups as u64 * drelu.comm_bits),
                        (OpTag::Mul, activations as u64 * mul.comm_bits),
                    ],
                ));
            }
        }
    }
    let total_rounds = entries.iter().map(|e| e.rounds).sum();
    let total_comm_bits = entries.iter().map(|e| e.comm_bits).sum();
    Ok(CostReport {
        network: net.name.clone(),
        variant: net.variant.clone(),
        params: *params,
        entries,
        total_rounds,
        total_comm_bits,
        total_mb: bits_to_mb(total_comm_bits),
    })
}

impl CostReport {
    /// Total bits per message category.
    pub fn by_tag(&self) -> BTreeMap<OpTag, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            for (t, b) in &e.components {
                *out.entry(*t).or_insert(0) += b;
            }
        }
        out
    }

    pub fn entry(&self, layer: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let header = ["layer", "kind", "dims", "rounds", "comm (MB)"];
        let rows: Vec<[String; 5]> = self
            .entries
            .iter()
            .map(|e| {
                [
                    e.layer.clone(),
                    e.kind.clone(),
                    e.dims.clone(),
                    e.rounds.to_string(),
                    format!("{:.3}", bits_to_mb(e.comm_bits)),
                ]
            })
            .chain(std::iter::once([
                "total".to_string(),
                String::new(),
                String::new(),
                self.total_rounds.to_string(),
                format!("{:.2}", self.total_mb),
            ]))
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = format!("{} / {}\n", self.network, self.variant);
        let line = |out: &mut String, cells: &[&str]| {
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i >= 3 {
                    let _ = write!(out, "{c:>w$}  ");
                } else {
                    let _ = write!(out, "{c:<w$}  ");
                }
            }
            let trimmed = out.trim_end().len();
            out.truncate(trimmed);
            out.push('\n');
        };
        line(&mut out, &header);
        for r in &rows {
            line(&mut out, &r.each_ref().map(String::as_str));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Savings {
    pub rounds_pct: f64,
    pub comm_pct: f64,
}

/// Percentage reduction of `b` relative to the baseline `a`.
pub fn savings(a: &CostReport, b: &CostReport) -> Result<Savings> {
    if a.total_rounds == 0 || a.total_comm_bits == 0 {
        return Err(Error::invalid("savings need a baseline with non-zero rounds and communication"));
    }
    Ok(Savings {
        rounds_pct: (1.0 - b.total_rounds as f64 / a.total_rounds as f64) * 100.0,
        comm_pct: (1.0 - b.total_comm_bits as f64 / a.total_comm_bits as f64) * 100.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{presets, NetworkConfig};
    use proptest::prelude::*;

    const P: ProtocolParams = ProtocolParams { ring_bits: 64, log_p: 8 };

    fn report(preset: &str, variant: &str) -> CostReport {
        let cfg = NetworkConfig::from_json(presets::get(preset).unwrap()).unwrap();
        let net = cfg.resolve(variant).unwrap();
        cost_network(&NetworkDescriptor::from_network(&net).unwrap(), &cfg.protocol.params()).unwrap()
    }

    #[test]
    fn linear_examples() {
        assert_eq!(cost_linear(1, 1024, 10, &P).comm_bits, 22_538 * 64);
        assert_eq!(cost_linear(1, 1024, 10, &P).bytes(), 180_304);
        assert_eq!(cost_linear(1, 1, 1, &P).comm_bits, 5 * 64);
        assert_eq!(cost_linear(7, 3, 2, &P).rounds, 2);
    }

    #[test]
    fn conv_examples() {
        assert_eq!(cost_conv(32, 3, 3, 64, &P).comm_bits, 124_288 * 64);
        assert_eq!(cost_conv(32, 3, 3, 64, &P).bytes(), 994_304);
        let c = cost_conv(32, 64, 3, 64, &P);
        assert_eq!(c.comm_bits, 1_318_912 * 64);
        assert!((bits_to_mb(c.comm_bits) - 10.55).abs() < 0.01);
        assert_eq!(cost_conv(1, 1, 1, 1, &P), cost_linear(1, 1, 1, &P));
    }

    #[test]
    fn drelu_and_mul() {
        assert_eq!(cost_drelu(&P), OpCost { rounds: 8, comm_bits: 5_312 });
        assert_eq!(cost_drelu(&ProtocolParams { ring_bits: 64, log_p: 7 }).comm_bits, 75 * 64);
        assert_eq!(cost_mul(&P), OpCost { rounds: 2, comm_bits: 320 });
        assert_eq!(cost_mul(&P).bytes(), 40);
        assert_eq!(cost_mul(&ProtocolParams { ring_bits: 32, log_p: 8 }).comm_bits * 2, cost_mul(&P).comm_bits);
    }

    #[test]
    fn relu_layer_examples() {
        assert_eq!(cost_relu_layer(65_536, 65_536, &P).unwrap().bytes(), 46_137_344);
        assert_eq!(cost_relu_layer(65_536, 64, &P).unwrap().bytes(), 2_663_936);
        assert_eq!(cost_relu_layer(26_912, 32, &P).unwrap().bytes(), 1_097_728);
        assert_eq!(cost_relu_layer(10, 10, &P).unwrap().rounds, 10);
        assert!(cost_relu_layer(10, 11, &P).is_err());
        assert!(cost_relu_layer(10, 0, &P).is_err());
        assert!(ProtocolParams::new(12, 8).is_err());
    }

    #[test]
    fn network_totals() {
        let cifar = report("cifar10", "original");
        assert_eq!(cifar.total_rounds, 86);
        assert!((cifar.total_mb - 141.02).abs() / 141.02 < 0.02, "{}", cifar.total_mb);
        assert_eq!(report("svhn", "original").total_rounds, 26);
        assert_eq!(report("cifar10", "fc_noise").total_rounds, 90);
        assert_eq!(cifar.total_comm_bits, cifar.entries.iter().map(|e| e.comm_bits).sum::<u64>());
        assert!(cifar.entries.iter().all(|e| e.comm_bits % 64 == 0));
    }

    #[test]
    fn savings_examples() {
        let a = report("cifar10", "original");
        assert_eq!(savings(&a, &a).unwrap(), Savings { rounds_pct: 0.0, comm_pct: 0.0 });
        let s = savings(&a, &report("cifar10", "uniform32")).unwrap();
        assert!((s.comm_pct - 61.0).abs() < 1.0, "{}", s.comm_pct);
        assert_eq!(s.rounds_pct, 0.0);
        let mut zero = a.clone();
        zero.total_comm_bits = 0;
        assert!(savings(&zero, &a).is_err());
    }

    #[test]
    fn table_and_json_render() {
        let r = report("svhn", "uniform32");
        let t = r.to_table();
        assert!(t.contains("total"));
        assert!(t.lines().count() == r.entries.len() + 3);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["total_rounds"], 26);
    }

    proptest! {
        #[test]
        fn standard_relu_degenerates(n in 1usize..100_000) {
            let c = cost_relu_layer(n, n, &P).unwrap();
            prop_assert_eq!(c.comm_bits, n as u64 * (cost_drelu(&P).comm_bits + cost_mul(&P).comm_bits));
        }

        #[test]
        fn comm_is_monotone(m in 1usize..40, n in 1usize..40, v in 1usize..40, f in 1usize..6) {
            let base = cost_linear(m, n, v, &P).comm_bits;
            prop_assert!(cost_linear(m + 1, n, v, &P).comm_bits >= base);
            prop_assert!(cost_linear(m, n + 1, v, &P).comm_bits >= base);
            prop_assert!(cost_linear(m, n, v + 1, &P).comm_bits >= base);
            let conv = cost_conv(m, n, f, v, &P).comm_bits;
            prop_assert!(cost_conv(m, n, f + 1, v, &P).comm_bits >= conv);
            prop_assert!(cost_conv(m + 1, n, f, v, &P).comm_bits >= conv);
        }

        #[test]
        fn groups_never_cost_more(n in 1usize..5000, g in 1usize..5000) {
            let g = g.min(n);
            prop_assert!(cost_relu_layer(n, g, &P).unwrap().comm_bits <= cost_relu_layer(n, n, &P).unwrap().comm_bits);
        }
    }
}
