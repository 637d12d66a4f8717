//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stderr (so it shows even when output is captured) and
//! then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relush::commands::cmd_count;
use relush::config::{ActShape, ActivationVariant, InitMode, NetworkConfig};
use relush::cost::{cost_network, NetworkDescriptor};
use relush::data::load_dataset;
use relush::grouping::{agglomerative_cluster, uniform_patches, ActivationProfileMatrix};
use relush::model::Model;
use relush::mpc::{reconcile, sim_network, FixedModel};
use relush::relu_variants::count_gate_ops;
use relush::tensor::{kernels, Tape, Tensor, Var};
use relush::train::{metrics_csv, train};

fn report(n: u32, failures: &[String], detail: &str) {
    let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} ({detail})");
    for f in failures {
        let _ = writeln!(std::io::stderr(), "  criterion {n}: {f}");
    }
    assert!(failures.is_empty(), "criterion {n} failed: {failures:?}");
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() / target <= rel
}

#[test]
fn criterion_1_round_counts() {
    let rounds = |preset: &str, variant: &str| {
        let net = common::preset(preset).resolve(variant).unwrap();
        let params = common::preset(preset).protocol.params();
        cost_network(&NetworkDescriptor::from_network(&net).unwrap(), &params).unwrap().total_rounds
    };
    let mut failures = Vec::new();
    for (preset, variant, want) in [("cifar10", "original", 86), ("svhn", "original", 26), ("cifar10", "fc_noise", 90)] {
        let got = rounds(preset, variant);
        if got != want {
            failures.push(format!("{preset}/{variant}: {got} rounds, expected {want}"));
        }
    }
    let fashion = rounds("fashion", "original");
    report(1, &failures, &format!("cifar10 86, svhn 26, cifar10 fc_noise 90; fashion reports {fashion}"));
}

/// Bits of one secure ReLU layer: a sign test per group and a multiplication
/// per activation.
fn relu_layer_bits(groups: u64, activations: u64, l: u64, log_p: u64) -> u64 {
    groups * (8 * log_p + 19) * l + activations * 5 * l
}

#[test]
fn criterion_2_bandwidth() {
    let mut failures = Vec::new();
    let mut check = |preset: &str, variant: &str, total: Option<(f64, f64)>, first: (f64, f64)| {
        let cfg = common::preset(preset);
        let params = cfg.protocol.params();
        let net = cfg.resolve(variant).unwrap();
        let report = cost_network(&NetworkDescriptor::from_network(&net).unwrap(), &params).unwrap();
        if let Some((target, tol)) = total {
            if !within(report.total_mb, target, tol) {
                failures.push(format!("{preset}/{variant} total {:.2} MB vs {target}", report.total_mb));
            }
        }
        let relu1 = net.layers.iter().find(|l| l.activation.is_some()).unwrap();
        let ActShape::Map { channels, height, width } = relu1.input else { panic!() };
        let per_channel = match &relu1.activation {
            Some(ActivationVariant::Relu) => height * width,
            _ => count_gate_ops(&uniform_patches(height, width, 32).unwrap(), 1).0,
        };
        let oracle = relu_layer_bits(
            (per_channel * channels) as u64,
            (height * width * channels) as u64,
            u64::from(params.ring_bits),
            u64::from(params.log_p),
        );
        let entry = report.entry(relu1.name()).unwrap();
        if entry.comm_bits != oracle {
            failures.push(format!("{preset}/{variant} {}: {} bits, oracle {oracle}", relu1.name(), entry.comm_bits));
        }
        let mb = entry.comm_bits as f64 / 8e6;
        if !within(mb, first.0, first.1) {
            failures.push(format!("{preset}/{variant} first ReLU layer {mb:.2} MB vs {}", first.0));
        }
    };
    check("cifar10", "original", Some((141.02, 0.02)), (46.0, 0.02));
    check("cifar10", "uniform32", Some((54.18, 0.02)), (2.66, 0.01));
    check("svhn", "original", None, (17.87, 0.08));
    check("svhn", "uniform32", None, (1.09, 0.02));
    check("fashion", "original", None, (16.66, 0.08));
    check("fashion", "uniform32", None, (1.02, 0.02));
    report(2, &failures, "cifar10 totals and first-layer comm, svhn and fashion first-layer comm");
}

#[test]
fn criterion_3_relu_counts() {
    let mut failures = Vec::new();
    for (variant, k) in [("original", 1usize), ("uniform3", 3), ("uniform4", 4), ("uniform32", 32)] {
        let oracle = 32usize.div_ceil(k).pow(2);
        let out = cmd_count("cifar10", variant).unwrap();
        let pair: Vec<(usize, usize)> = out.rows.iter().take(2).map(|r| r.per_channel()).collect();
        let want = vec![(oracle, 1024), (oracle, 1024)];
        if pair != want {
            failures.push(format!("{variant}: per-channel (DReLU, Mul) {pair:?}, expected {want:?}"));
        }
        if variant == "uniform32" && out.rows[0].reduction != 1024.0 {
            failures.push(format!("uniform32 layer-1 reduction x{}", out.rows[0].reduction));
        }
    }
    report(3, &failures, "(1024,1024) -> (121,121) -> (64,64) -> (1,1) DReLU per channel, x1024 at 32x32");
}

fn variants(preset: &str) -> Vec<String> {
    common::preset(preset).variants.keys().cloned().collect()
}

#[test]
fn criterion_4_simulator_equivalence() {
    let mut failures = Vec::new();
    let (mut images, mut exact, mut agree) = (0usize, 0usize, 0usize);
    for preset in ["desk", "svhn", "fashion", "cifar10"] {
        for variant in variants(preset) {
            let n = if preset == "cifar10" && variant != "original" { 10 } else { 50 };
            let model = common::model(preset, &variant, 11);
            let fm = FixedModel::from_model(&model).unwrap();
            let net = model.network();
            let shape = vec![1, net.input.channels, net.input.height, net.input.width];
            for i in 0..n {
                let img = common::random_image(fm.input_len, 1000 + i as u64);
                let out = sim_network(&fm, &img, i as u64).unwrap();
                images += 1;
                if out.equivalent() {
                    exact += 1;
                } else {
                    failures.push(format!("{preset}/{variant} image {i}: differs at {:?}", out.first_mismatch));
                }
                let float = model.forward(&Tensor::new(shape.clone(), img).unwrap()).unwrap();
                let decoded = out.decoded(&fm.fp);
                let sim = Tensor::new(vec![1, decoded.len()], decoded).unwrap();
                if sim.argmax_rows() == float.argmax_rows() {
                    agree += 1;
                }
            }
        }
    }
    let agreement = agree as f64 / images as f64;
    if agreement < 0.98 {
        failures.push(format!("argmax agreement {agreement:.4} < 0.98"));
    }
    report(
        4,
        &failures,
        &format!("{exact}/{images} bit-exact, float argmax agreement {:.2}%", agreement * 100.0),
    );
}

#[test]
fn criterion_5_ledger_reconciliation() {
    let mut failures = Vec::new();
    let mut checked = 0;
    for preset in ["desk", "svhn", "fashion", "cifar10"] {
        let cfg = common::preset(preset);
        for variant in variants(preset) {
            let model = common::model(preset, &variant, 3);
            let fm = FixedModel::from_model(&model).unwrap();
            let from_config =
                cost_network(&NetworkDescriptor::from_network(&cfg.resolve(&variant).unwrap()).unwrap(), &cfg.protocol.params())
                    .unwrap();
            let img = common::random_image(fm.input_len, 77);
            let out = sim_network(&fm, &img, 5).unwrap();
            let rec = reconcile(&out.log, &fm.report);
            if !rec.passed() {
                failures.push(format!("{preset}/{variant}: {:?}", rec.mismatches));
            }
            if out.log.rounds() != from_config.total_rounds || out.log.total_bytes() * 8 != from_config.total_comm_bits {
                failures.push(format!(
                    "{preset}/{variant}: ledger {} rounds {} bytes, config predicts {} rounds {} bits",
                    out.log.rounds(),
                    out.log.total_bytes(),
                    from_config.total_rounds,
                    from_config.total_comm_bits
                ));
            }
            checked += 1;
        }
    }
    report(5, &failures, &format!("{checked} preset variants reconcile per layer and in total"));
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error between the tape's gradients and central differences
/// with step 1e-5.
fn gradient_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[j];
            worst = worst.max((an - fd).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, f) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - f) / stride + 1;
    let ow = (wd + 2 * pad - f) / stride + 1;
    let mut out = Vec::with_capacity(o * oh * ow);
    for oc in 0..o {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for ky in 0..f {
                        for kx in 0..f {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.data()[(ic * h + iy as usize) * wd + ix as usize]
                                * w.data()[((oc * c + ic) * f + ky) * f + kx];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn criterion_6_numerical_core() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut conv_err: f64 = 0.0;
    for trial in 0..10 {
        let (stride, pad) = [(1, 0), (1, 1), (2, 1)][trial % 3];
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[2, 2, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let y = kernels::conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        for (a, e) in y.data().iter().zip(naive_conv(&x, &w, &b, stride, pad)) {
            conv_err = conv_err.max((a - e).abs());
        }
        let proj = random(y.shape(), &mut rng);
        worst = worst.max(gradient_error(&[x, w, b, proj], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            let p = t.mul(y, v[3]).unwrap();
            t.sum(p).unwrap()
        }));

        let x = random(&[2, 6], &mut rng);
        let w = random(&[6, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let labels = [rng.random_range(0..4), rng.random_range(0..4)];
        worst = worst.max(gradient_error(&[x, w, b], |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            t.softmax_cross_entropy(y, &labels).unwrap()
        }));

        let x = random(&[1, 2, 4, 4], &mut rng);
        let proj = random(&[1, 2, 2, 2], &mut rng);
        worst = worst.max(gradient_error(&[x, proj], |t, v| {
            let y = t.avgpool2d(v[0], 2, 2).unwrap();
            let p = t.mul(y, v[1]).unwrap();
            t.sum(p).unwrap()
        }));

        // Magnitudes at least 0.1 keep finite differences off the ReLU kink.
        let x = Tensor::from_fn(&[16], |_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        });
        let proj = random(&[16], &mut rng);
        let mask: Vec<f64> = (0..16).map(|i| if i % 4 == 0 { 0.0 } else { 1.25 }).collect();
        worst = worst.max(gradient_error(&[x, proj], |t, v| {
            let y = t.relu(v[0]).unwrap();
            let y = t.scale(y, mask.clone()).unwrap();
            let p = t.mul(y, v[1]).unwrap();
            let q = t.add(p, v[1]).unwrap();
            t.sum(q).unwrap()
        }));
    }
    let mut failures = Vec::new();
    if worst > 1e-4 {
        failures.push(format!("worst gradient relative error {worst:e}"));
    }
    if conv_err > 1e-10 {
        failures.push(format!("conv differs from the naive loop by {conv_err:e}"));
    }
    report(
        6,
        &failures,
        &format!("worst gradient rel. error {worst:.1e}, conv vs naive {conv_err:.1e}"),
    );
}

/// Merges the two clusters holding the closest pair of points until `k`
/// remain. Among equally close pairs the lexicographically smallest `(p, q)`
/// wins.
fn brute_single_linkage(dist: &[Vec<u32>], k: usize) -> Vec<usize> {
    let n = dist.len();
    let mut cluster: Vec<usize> = (0..n).collect();
    let mut count = n;
    while count > k {
        let mut best: Option<(u32, usize, usize)> = None;
        for p in 0..n {
            for q in p + 1..n {
                if cluster[p] != cluster[q] && best.is_none_or(|b| dist[p][q] < b.0) {
                    best = Some((dist[p][q], p, q));
                }
            }
        }
        let (_, p, q) = best.unwrap();
        let (keep, gone) = (cluster[p], cluster[q]);
        for c in cluster.iter_mut() {
            if *c == gone {
                *c = keep;
            }
        }
        count -= 1;
    }
    cluster
}

/// Relabels by first appearance so equal partitions compare equal.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut seen = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = seen.len();
            *seen.entry(*l).or_insert(next)
        })
        .collect()
}

#[test]
fn criterion_7_clustering_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for instance in 0..200 {
        let h = rng.random_range(1..=4);
        let w = rng.random_range(1..=16 / h);
        let samples = rng.random_range(1..=12);
        let n = h * w;
        let mut m = ActivationProfileMatrix::new(h, w, samples);
        for p in 0..n {
            for s in 0..samples {
                m.set(p, s, rng.random::<bool>());
            }
        }
        let dist: Vec<Vec<u32>> = (0..n)
            .map(|p| {
                (0..n)
                    .map(|q| (0..samples).filter(|&s| m.get(p, s) != m.get(q, s)).count() as u32)
                    .collect()
            })
            .collect();
        let k = rng.random_range(1..=n);
        let got = agglomerative_cluster(&m, k).unwrap();
        let want = canonical(&brute_single_linkage(&dist, k));
        if canonical(&got.labels) != want {
            failures.push(format!("instance {instance} ({h}x{w}, k={k}): {:?} vs {want:?}", got.labels));
        }
    }
    report(7, &failures, "200 random instances match brute-force single linkage");
}

#[test]
fn criterion_8_desk_learning() {
    let cfg = common::preset("desk");
    let mut failures = Vec::new();
    let mut accuracy = BTreeMap::new();
    let net = cfg.resolve("original").unwrap();
    let (tr, te) = load_dataset(cfg.dataset.as_ref().unwrap(), net.input, net.classes, None, None).unwrap();
    for variant in ["original", "uniform32", "ngrelu"] {
        let net = cfg.resolve(variant).unwrap();
        let mut model = Model::new(&net, cfg.seed, &BTreeMap::new()).unwrap();
        match train(&mut model, &tr, &te, &cfg.training, cfg.seed, |_| {}) {
            Ok(m) => {
                accuracy.insert(variant, m.last().unwrap().test_accuracy);
            }
            Err(e) => failures.push(format!("{variant}: {e}")),
        }
    }
    let original = accuracy.get("original").copied().unwrap_or(0.0);
    if original < 0.9 {
        failures.push(format!("original test accuracy {original:.3} < 0.9"));
    }
    if let Some(u) = accuracy.get("uniform32") {
        if original - u > 0.05 {
            failures.push(format!("uniform32 drops {:.1} points", (original - u) * 100.0));
        }
    }
    let shown: Vec<String> = accuracy.iter().map(|(k, v)| format!("{k} {:.1}%", v * 100.0)).collect();
    report(8, &failures, &shown.join(", "));
}

#[test]
fn criterion_9_determinism() {
    let cfg: NetworkConfig = common::preset("desk");
    let net = cfg.resolve("uniform4").unwrap();
    let (tr, te) = load_dataset(cfg.dataset.as_ref().unwrap(), net.input, net.classes, None, Some(300)).unwrap();
    let training = relush::config::TrainingConfig {
        epochs: 2,
        init: InitMode::Scratch,
        ..cfg.training.clone()
    };
    let run = || {
        let mut model = Model::new(&net, 21, &BTreeMap::new()).unwrap();
        let metrics = train(&mut model, &tr, &te, &training, 21, |_| {}).unwrap();
        let ckpt = model.to_checkpoint().to_bytes().unwrap();
        let fm = FixedModel::from_model(&model).unwrap();
        let out = sim_network(&fm, te.image(0), 21).unwrap();
        (metrics_csv(&metrics), ckpt, out.log.to_csv(), out.logits.clone())
    };
    let (a, b) = (run(), run());
    let mut failures = Vec::new();
    if a.0 != b.0 {
        failures.push("metrics differ".to_string());
    }
    if a.1 != b.1 {
        failures.push("checkpoint bytes differ".to_string());
    }
    if a.2 != b.2 || a.3 != b.3 {
        failures.push("simulator ledger or shares differ".to_string());
    }
    report(9, &failures, "metrics, checkpoint bytes and ledgers repeat across runs");
}
