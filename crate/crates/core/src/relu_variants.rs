//! Standard ReLU and its shared-gate generalizations.
//!
//! A [`GroupingSpec`] partitions each `H x W` channel plane into groups. Every
//! group owns one gate: a weight vector `v_i` over the plane. All activations of
//! group `i` pass through unchanged when `v_i . s >= 0` and are zeroed otherwise.
//! A plain ReLU is the special case of singleton groups whose gate is the
//! activation itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A value that is either common to every channel or given per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerChannel<T> {
    Shared(T),
    PerChannel(Vec<T>),
}

impl<T> PerChannel<T> {
    pub fn get(&self, channel: usize) -> &T {
        match self {
            PerChannel::Shared(v) => v,
            PerChannel::PerChannel(v) => &v[channel],
        }
    }

    pub fn channels(&self) -> Option<usize> {
        match self {
            PerChannel::Shared(_) => None,
            PerChannel::PerChannel(v) => Some(v.len()),
        }
    }

    fn entries(&self) -> Vec<&T> {
        match self {
            PerChannel::Shared(v) => vec![v],
            PerChannel::PerChannel(v) => v.iter().collect(),
        }
    }
}

/// How a group's gate weight vector is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Every group is a singleton `{p}` with `v(p) = 1`: standard ReLU.
    OneHotSelf,
    /// Each group follows the sign of one designated source activation.
    OneHotSource,
    /// Each group has trainable weights over its member positions.
    Learned,
}

/// Gate weights of a [`GroupingSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GateWeights {
    OneHotSelf,
    /// `sources[g]` is the plane position whose value gates group `g`.
    OneHotSource { sources: PerChannel<Vec<usize>> },
    /// Dense `[channel][H*W]` weights. Group `g` uses the entries at its own
    /// member positions; since groups partition the plane every entry belongs
    /// to exactly one gate.
    Learned { weights: Vec<Vec<f64>> },
}

/// Assignment of plane positions to gate groups, plus the gate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingSpec {
    pub height: usize,
    pub width: usize,
    /// Row-major position lists, one list per group.
    pub groups: PerChannel<Vec<Vec<usize>>>,
    pub gate: GateWeights,
}

impl GroupingSpec {
    /// Singleton groups gated by themselves.
    pub fn one_hot_self(height: usize, width: usize) -> Self {
        GroupingSpec {
            height,
            width,
            groups: PerChannel::Shared((0..height * width).map(|p| vec![p]).collect()),
            gate: GateWeights::OneHotSelf,
        }
    }

    /// One whole-plane group gated by the activation at `source`.
    pub fn one_hot_source(height: usize, width: usize, source: usize) -> Self {
        GroupingSpec {
            height,
            width,
            groups: PerChannel::Shared(vec![(0..height * width).collect()]),
            gate: GateWeights::OneHotSource {
                sources: PerChannel::Shared(vec![source]),
            },
        }
    }

    /// One whole-plane group gated by the middle activation `(H/2, W/2)`.
    pub fn whole_channel_middle(height: usize, width: usize) -> Self {
        Self::one_hot_source(height, width, (height / 2) * width + width / 2)
    }

    pub fn mode(&self) -> GateMode {
        match self.gate {
            GateWeights::OneHotSelf => GateMode::OneHotSelf,
            GateWeights::OneHotSource { .. } => GateMode::OneHotSource,
            GateWeights::Learned { .. } => GateMode::Learned,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Channel count pinned by per-channel components, if any.
    pub fn channels(&self) -> Option<usize> {
        let from_gate = match &self.gate {
            GateWeights::OneHotSelf => None,
            GateWeights::OneHotSource { sources } => sources.channels(),
            GateWeights::Learned { weights } => Some(weights.len()),
        };
        from_gate.or(self.groups.channels())
    }

    pub fn groups(&self, channel: usize) -> &[Vec<usize>] {
        self.groups.get(channel)
    }

    pub fn group_count(&self, channel: usize) -> usize {
        self.groups.get(channel).len()
    }

    /// Replaces the gates with learned weights initialized to `1/|group|`
    /// over each group's members, independently for `channels` channels.
    pub fn with_learned_gates(mut self, channels: usize) -> Self {
        let weights = (0..channels)
            .map(|c| {
                let mut w = vec![0.0; self.plane_len()];
                for group in self.groups.get(c) {
                    let v = 1.0 / group.len() as f64;
                    for &p in group {
                        w[p] = v;
                    }
                }
                w
            })
            .collect();
        self.gate = GateWeights::Learned { weights };
        self
    }

    /// Checks the partition and gate invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.plane_len();
        if n == 0 {
            return Err(Error::invalid("grouping spec has an empty plane"));
        }
        if let (Some(a), Some(b)) = (self.groups.channels(), self.channels()) {
            if a != b {
                return Err(Error::invalid(format!(
                    "grouping spec has {a} per-channel partitions but {b} gate channels"
                )));
            }
        }
        for (c, groups) in self.groups.entries().into_iter().enumerate() {
            let mut seen = vec![false; n];
            for (g, group) in groups.iter().enumerate() {
                if group.is_empty() {
                    return Err(Error::invalid(format!("group {g} of channel {c} is empty")));
                }
                for &p in group {
                    if p >= n {
                        return Err(Error::invalid(format!("position {p} outside the {n}-element plane")));
                    }
                    if std::mem::replace(&mut seen[p], true) {
                        return Err(Error::invalid(format!("position {p} appears in two groups (channel {c})")));
                    }
                }
            }
            if let Some(p) = seen.iter().position(|s| !s) {
                return Err(Error::invalid(format!("position {p} is not covered by any group (channel {c})")));
            }
        }
        match &self.gate {
            GateWeights::OneHotSelf => {
                if self.groups.entries().iter().any(|gs| gs.iter().any(|g| g.len() != 1)) {
                    return Err(Error::invalid("one_hot_self gates require singleton groups"));
                }
            }
            GateWeights::OneHotSource { sources } => {
                let channels = sources.channels().or(self.groups.channels()).unwrap_or(1);
                for c in 0..channels {
                    let s = sources.get(c);
                    if s.len() != self.group_count(c) {
                        return Err(Error::invalid(format!(
                            "channel {c}: {} gate sources for {} groups",
                            s.len(),
                            self.group_count(c)
                        )));
                    }
                    if let Some(&bad) = s.iter().find(|&&p| p >= n) {
                        return Err(Error::invalid(format!("gate source {bad} outside the plane")));
                    }
                }
            }
            GateWeights::Learned { weights } => {
                if weights.is_empty() {
                    return Err(Error::invalid("learned gates need at least one channel"));
                }
                if let Some(w) = weights.iter().find(|w| w.len() != n) {
                    return Err(Error::invalid(format!(
                        "learned gate weights have length {} but the plane has {n} positions",
                        w.len()
                    )));
                }
                if weights.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("learned gate weights".into()));
                }
            }
        }
        Ok(())
    }

    pub fn check_against(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::shape(format!(
                "grouping spec is for {}x{} planes but the tensor has {height}x{width}",
                self.height, self.width
            )));
        }
        if let Some(c) = self.channels() {
            if c != channels {
                return Err(Error::shape(format!(
                    "grouping spec covers {c} channels but the tensor has {channels}"
                )));
            }
        }
        Ok(())
    }

    /// Gate pre-activation `v_g . s` for every group of one channel plane.
    pub fn plane_gates(&self, channel: usize, plane: &[f64]) -> Vec<f64> {
        let groups = self.groups(channel);
        match &self.gate {
            GateWeights::OneHotSelf => groups.iter().map(|g| plane[g[0]]).collect(),
            GateWeights::OneHotSource { sources } => sources.get(channel).iter().map(|&q| plane[q]).collect(),
            GateWeights::Learned { weights } => {
                let w = &weights[channel];
                groups.iter().map(|g| g.iter().map(|&p| w[p] * plane[p]).sum()).collect()
            }
        }
    }
}

/// Binary gate decisions of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// Gate pre-activations, one vector per `(n, c)` plane.
    pub gates: Vec<Vec<f64>>,
    /// Per-activation flags: `true` where the negated gate was applied.
    pub flips: Option<Vec<bool>>,
}

impl GateDecision {
    /// Group bit `[v_g . s >= 0]` for each plane.
    pub fn bits(&self) -> Vec<Vec<bool>> {
        self.gates.iter().map(|g| g.iter().map(|&v| v >= 0.0).collect()).collect()
    }
}

/// Elementwise `max(s, 0)`, with `0` passing through as `0`.
pub fn relu(s: &Tensor) -> Tensor {
    Tensor::new(s.shape().to_vec(), s.data().iter().map(|&v| if v >= 0.0 { v } else { 0.0 }).collect())
        .expect("same shape")
}

/// Splits a `[C,H,W]` or `[N,C,H,W]` shape into `(planes, channels, H, W)`.
fn plane_dims(s: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *s.shape() {
        [c, h, w] => Ok((c, c, h, w)),
        [n, c, h, w] => Ok((n * c, c, h, w)),
        _ => Err(Error::shape(format!(
            "gated activations expect [C,H,W] or [N,C,H,W], got {:?}",
            s.shape()
        ))),
    }
}

fn gated_forward(s: &Tensor, spec: &GroupingSpec, flips: Option<&[bool]>) -> Result<(Tensor, GateDecision)> {
    let (planes, channels, h, w) = plane_dims(s)?;
    spec.check_against(channels, h, w)?;
    let hw = h * w;
    let mut out = vec![0.0; s.len()];
    let mut gates = Vec::with_capacity(planes);
    for (idx, plane) in s.data().chunks(hw).enumerate() {
        let c = idx % channels;
        let g = spec.plane_gates(c, plane);
        let dst = &mut out[idx * hw..(idx + 1) * hw];
        for (gi, members) in spec.groups(c).iter().enumerate() {
            for &p in members {
                let negate = flips.is_some_and(|f| f[idx * hw + p]);
                let pass = if negate { -g[gi] >= 0.0 } else { g[gi] >= 0.0 };
                if pass {
                    dst[p] = plane[p];
                }
            }
        }
        gates.push(g);
    }
    Ok((
        Tensor::new(s.shape().to_vec(), out)?,
        GateDecision {
            gates,
            flips: flips.map(<[bool]>::to_vec),
        },
    ))
}

/// Shared-gate ReLU: every activation follows the sign of its group's gate.
pub fn grelu(s: &Tensor, spec: &GroupingSpec) -> Result<Tensor> {
    Ok(gated_forward(s, spec, None)?.0)
}

/// Draws per-activation flip flags: each activation uses the negated gate
/// with probability `1 - p_keep`.
pub fn sample_flips(len: usize, p_keep: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(p_keep > 0.0 && p_keep <= 1.0) {
        return Err(Error::invalid(format!("p_keep must lie in (0, 1], got {p_keep}")));
    }
    Ok((0..len).map(|_| rng.random::<f64>() >= p_keep).collect())
}

/// Noisy shared-gate ReLU, deterministic in `seed`.
pub fn ngrelu(s: &Tensor, spec: &GroupingSpec, p_keep: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flips = sample_flips(s.len(), p_keep, &mut rng)?;
    Ok(gated_forward(s, spec, Some(&flips))?.0)
}

/// Hard-gate forward pass that also returns the decisions needed by
/// [`soft_gate_backward`].
pub fn soft_gate_forward(s: &Tensor, spec: &GroupingSpec, temperature: f64) -> Result<(Tensor, GateDecision)> {
    soft_gate_forward_with_flips(s, spec, temperature, None)
}

pub fn soft_gate_forward_with_flips(
    s: &Tensor,
    spec: &GroupingSpec,
    temperature: f64,
    flips: Option<&[bool]>,
) -> Result<(Tensor, GateDecision)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(f) = flips {
        if f.len() != s.len() {
            return Err(Error::shape("flip mask does not match the activation tensor"));
        }
    }
    gated_forward(s, spec, flips)
}

fn sigmoid_slope(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Straight-through backward pass of the hard gate.
///
/// The forward bit `b = [g >= 0]` is differentiated as `sigmoid(g / T)`.
/// Returns the gradient for `s` and, in learned mode, for the `[C, H*W]`
/// gate weights.
pub fn soft_gate_backward(
    s: &Tensor,
    spec: &GroupingSpec,
    decision: &GateDecision,
    temperature: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, Option<Tensor>)> {
    let (_, channels, h, w) = plane_dims(s)?;
    let hw = h * w;
    let mut grad_s = vec![0.0; s.len()];
    let mut grad_w = match &spec.gate {
        GateWeights::Learned { weights } => Some(vec![0.0; weights.len() * hw]),
        _ => None,
    };
    for (idx, plane) in s.data().chunks(hw).enumerate() {
        let c = idx % channels;
        let go = &grad_out.data()[idx * hw..(idx + 1) * hw];
        let gs = &mut grad_s[idx * hw..(idx + 1) * hw];
        let gates = &decision.gates[idx];
        for (gi, members) in spec.groups(c).iter().enumerate() {
            let g = gates[gi];
            let slope = sigmoid_slope(g / temperature) / temperature;
            let mut dgate = 0.0;
            for &p in members {
                let negate = decision.flips.as_ref().is_some_and(|f| f[idx * hw + p]);
                let (pass, sign) = if negate { (-g >= 0.0, -1.0) } else { (g >= 0.0, 1.0) };
                if pass {
                    gs[p] += go[p];
                }
                dgate += go[p] * plane[p] * sign * slope;
            }
            if dgate == 0.0 {
                continue;
            }
            match &spec.gate {
                GateWeights::OneHotSelf => gs[members[0]] += dgate,
                GateWeights::OneHotSource { sources } => gs[sources.get(c)[gi]] += dgate,
                GateWeights::Learned { weights } => {
                    let wc = &weights[c];
                    let gw = grad_w.as_mut().expect("learned gradient buffer");
                    for &p in members {
                        gs[p] += dgate * wc[p];
                        gw[c * hw + p] += dgate * plane[p];
                    }
                }
            }
        }
    }
    let grad_w = match (&spec.gate, grad_w) {
        (GateWeights::Learned { weights }, Some(gw)) => Some(Tensor::new(vec![weights.len(), hw], gw)?),
        _ => None,
    };
    Ok((Tensor::new(s.shape().to_vec(), grad_s)?, grad_w))
}

/// `(n_drelu, n_mul)`: one sign test per group, one multiplication per activation.
pub fn count_gate_ops(spec: &GroupingSpec, channels: usize) -> (usize, usize) {
    let n_drelu = (0..channels).map(|c| spec.group_count(c)).sum();
    (n_drelu, spec.plane_len() * channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::uniform_patches;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn relu_examples() {
        let s = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&s).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(&[2, 3], -0.5);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_self_equals_relu() {
        let spec = GroupingSpec::one_hot_self(4, 5);
        for seed in 0..1000 {
            let s = random_tensor(&[3, 4, 5], seed);
            assert_eq!(grelu(&s, &spec).unwrap(), relu(&s));
        }
    }

    #[test]
    fn source_gate_governs_other_positions() {
        // 1x2 plane: q = 0 gates p = 1.
        let spec = GroupingSpec::one_hot_source(1, 2, 0);
        let s = Tensor::new(vec![1, 1, 2], vec![-1.0, 5.0]).unwrap();
        assert_eq!(grelu(&s, &spec).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn whole_channel_middle_gate() {
        let spec = GroupingSpec::whole_channel_middle(4, 4);
        let mut s = random_tensor(&[1, 4, 4], 3);
        s.data_mut()[2 * 4 + 2] = 0.7;
        assert_eq!(grelu(&s, &spec).unwrap(), s);
        s.data_mut()[2 * 4 + 2] = -0.7;
        assert!(grelu(&s, &spec).unwrap().data().iter().all(|&v| v == 0.0));
        // A tie at zero passes.
        s.data_mut()[2 * 4 + 2] = 0.0;
        assert_eq!(grelu(&s, &spec).unwrap(), s);
    }

    #[test]
    fn patch_gates_match_brute_force() {
        let spec = uniform_patches(4, 4, 2).unwrap().with_learned_gates(1);
        for seed in 0..50 {
            let s = random_tensor(&[1, 4, 4], seed);
            let out = grelu(&s, &spec).unwrap();
            let x = s.data();
            let mut expected = vec![0.0; 16];
            for py in 0..2 {
                for px in 0..2 {
                    let cells: Vec<usize> = (0..4).map(|i| (py * 2 + i / 2) * 4 + px * 2 + i % 2).collect();
                    let mean: f64 = cells.iter().map(|&p| x[p]).sum::<f64>() / 4.0;
                    for &p in &cells {
                        expected[p] = if mean >= 0.0 { x[p] } else { 0.0 };
                    }
                }
            }
            assert_eq!(out.data(), expected.as_slice());
        }
    }

    #[test]
    fn grelu_rejects_mismatched_planes() {
        let spec = GroupingSpec::one_hot_self(4, 4);
        assert!(matches!(grelu(&Tensor::zeros(&[2, 4, 5]), &spec), Err(Error::Shape(_))));
        let learned = uniform_patches(4, 4, 2).unwrap().with_learned_gates(3);
        assert!(grelu(&Tensor::zeros(&[2, 4, 4]), &learned).is_err());
        assert!(grelu(&Tensor::zeros(&[3, 4, 4]), &learned).is_ok());
    }

    #[test]
    fn ngrelu_degenerate_and_deterministic() {
        let spec = uniform_patches(8, 8, 4).unwrap().with_learned_gates(2);
        let s = random_tensor(&[2, 8, 8], 11);
        for seed in 0..5 {
            assert_eq!(ngrelu(&s, &spec, 1.0, seed).unwrap(), grelu(&s, &spec).unwrap());
        }
        let a = ngrelu(&s, &spec, 0.8, 42).unwrap();
        let b = ngrelu(&s, &spec, 0.8, 42).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(ngrelu(&s, &spec, 0.0, 1).is_err());
        assert!(ngrelu(&s, &spec, 1.5, 1).is_err());
    }

    #[test]
    fn ngrelu_flip_rate_within_binomial_bound() {
        let n = 10_000;
        let spec = GroupingSpec::one_hot_self(100, 100);
        // Strictly positive inputs: a flipped activation is exactly one that is zeroed.
        let s = Tensor::full(&[1, 100, 100], 1.0);
        let out = ngrelu(&s, &spec, 0.8, 2024).unwrap();
        let flipped = out.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let (mean, sd) = (0.2 * n as f64, (n as f64 * 0.2 * 0.8).sqrt());
        assert!((flipped - mean).abs() <= 3.0 * sd, "{flipped} flips");
    }

    #[test]
    fn soft_gate_forward_is_hard() {
        let spec = uniform_patches(6, 6, 3).unwrap().with_learned_gates(2);
        let s = random_tensor(&[2, 2, 6, 6], 5);
        for t in [1e-3, 0.5, 1.0, 10.0] {
            let (y, _) = soft_gate_forward(&s, &spec, t).unwrap();
            assert_eq!(y, grelu(&s, &spec).unwrap());
        }
        assert!(soft_gate_forward(&s, &spec, 0.0).is_err());
    }

    #[test]
    fn surrogate_gradient_vanishes_as_temperature_shrinks() {
        let spec = GroupingSpec::one_hot_self(1, 3).with_learned_gates(1);
        let s = Tensor::new(vec![1, 1, 3], vec![0.5, -0.3, 1.2]).unwrap();
        let go = Tensor::full(&[1, 1, 3], 1.0);
        let (_, d) = soft_gate_forward(&s, &spec, 1e-3).unwrap();
        let (_, gw) = soft_gate_backward(&s, &spec, &d, 1e-3, &go).unwrap();
        assert!(gw.unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    /// `sum(c * s * sigmoid(v.s / T))` over one 3-element group.
    fn soft_objective(s: &[f64], v: &[f64], c: &[f64], t: f64) -> f64 {
        let g: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
        let sig = 1.0 / (1.0 + (-g / t).exp());
        s.iter().zip(c).map(|(a, b)| a * b * sig).sum()
    }

    #[test]
    fn learned_gate_gradient_matches_soft_finite_differences() {
        let s_vals = [0.4, -0.9, 0.3];
        let c = [1.5, -0.7, 0.2];
        for (t, v0) in [(1.0, [0.2, 0.1, 0.5]), (0.5, [-0.3, 0.2, 0.4]), (2.0, [1.0, 1.0, -1.0])] {
            let spec = GroupingSpec {
                height: 1,
                width: 3,
                groups: PerChannel::Shared(vec![vec![0, 1, 2]]),
                gate: GateWeights::Learned { weights: vec![v0.to_vec()] },
            };
            let s = Tensor::new(vec![1, 1, 3], s_vals.to_vec()).unwrap();
            let go = Tensor::new(vec![1, 1, 3], c.to_vec()).unwrap();
            let (_, d) = soft_gate_forward(&s, &spec, t).unwrap();
            let (_, gw) = soft_gate_backward(&s, &spec, &d, t, &go).unwrap();
            let gw = gw.unwrap();
            let h = 1e-5;
            for q in 0..3 {
                let mut vp = v0;
                let mut vm = v0;
                vp[q] += h;
                vm[q] -= h;
                let fd = (soft_objective(&s_vals, &vp, &c, t) - soft_objective(&s_vals, &vm, &c, t)) / (2.0 * h);
                let an = gw.data()[q];
                let rel = (an - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-4, "q={q} analytic {an} fd {fd}");
            }
        }
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_gate_ops(&uniform_patches(32, 32, 3).unwrap(), 1), (121, 1024));
        assert_eq!(count_gate_ops(&uniform_patches(32, 32, 32).unwrap(), 1), (1, 1024));
        assert_eq!(count_gate_ops(&uniform_patches(32, 32, 4).unwrap(), 1), (64, 1024));
        assert_eq!(count_gate_ops(&GroupingSpec::one_hot_self(32, 32), 64), (65536, 65536));
    }

    #[test]
    fn validate_catches_broken_partitions() {
        let mut spec = GroupingSpec::one_hot_self(2, 2);
        spec.groups = PerChannel::Shared(vec![vec![0, 1], vec![1, 2], vec![3]]);
        assert!(spec.validate().is_err());
        spec.groups = PerChannel::Shared(vec![vec![0], vec![1], vec![2]]);
        assert!(spec.validate().is_err());
        spec.groups = PerChannel::Shared(vec![vec![0, 1], vec![2], vec![3]]);
        assert!(spec.validate().is_err(), "one_hot_self requires singletons");
        assert!(uniform_patches(5, 7, 2).unwrap().with_learned_gates(3).validate().is_ok());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = uniform_patches(4, 4, 2).unwrap().with_learned_gates(2);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<GroupingSpec>(&text).unwrap(), spec);
        let text = serde_json::to_string(&GroupingSpec::whole_channel_middle(3, 3)).unwrap();
        assert!(text.contains("one_hot_source"));
    }

    proptest! {
        #[test]
        fn positive_scaling_commutes(seed in 0u64..10_000, scale in 0.01f64..100.0, k in 1usize..5) {
            let spec = uniform_patches(6, 6, k).unwrap().with_learned_gates(2);
            let s = random_tensor(&[2, 6, 6], seed);
            let scaled = Tensor::from_fn(s.shape(), |i| s.data()[i] * scale);
            let lhs = grelu(&scaled, &spec).unwrap();
            let rhs = grelu(&s, &spec).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b * scale).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn every_activation_follows_exactly_one_gate(seed in 0u64..10_000, k in 1usize..7) {
            let spec = uniform_patches(7, 6, k).unwrap();
            let mut owners = vec![0usize; 42];
            for g in spec.groups(0) {
                for &p in g {
                    owners[p] += 1;
                }
            }
            prop_assert!(owners.iter().all(|&o| o == 1));
            let s = random_tensor(&[1, 7, 6], seed);
            let y = grelu(&s, &spec).unwrap();
            prop_assert!(y.data().iter().zip(s.data()).all(|(a, b)| *a == 0.0 || a == b));
        }

        #[test]
        fn drelu_never_exceeds_mul(h in 1usize..20, w in 1usize..20, k in 1usize..8, c in 1usize..4) {
            let spec = uniform_patches(h, w, k).unwrap();
            let (d, m) = count_gate_ops(&spec, c);
            prop_assert!(d <= m);
            prop_assert_eq!(d == m, spec.groups(0).iter().all(|g| g.len() == 1));
        }
    }
}
