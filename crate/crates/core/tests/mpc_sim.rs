mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relush::config::NetworkConfig;
use relush::cost::OpTag;
use relush::grouping::uniform_patches;
use relush::model::Model;
use relush::mpc::engine::GateSecret;
use relush::mpc::{
    reconcile, sim_conv, sim_drelu, sim_grelu_layer, sim_linear, sim_network, FixedModel, FixedPoint, Party, Ring,
    Session,
};
use relush::relu_variants::{grelu, GroupingSpec};
use relush::tensor::kernels::ConvGeometry;
use relush::tensor::Tensor;
use relush::Error;

fn session(seed: u64) -> Session {
    Session::new(FixedPoint::new(Ring::new(64).unwrap(), 13).unwrap(), 8, seed)
}

fn random_fixed(fp: &FixedPoint, n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    (0..n).map(|_| fp.encode(rng.random_range(-scale..scale)).unwrap()).collect()
}

fn signed(fp: &FixedPoint, v: u64) -> i128 {
    i128::from(fp.ring.to_signed(v))
}

#[test]
fn conv_matches_direct_oracle_and_cost() {
    let mut s = session(1);
    let fp = s.fp;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = ConvGeometry::new(3, 32, 32, 3, 1, 1).unwrap();
    let x = random_fixed(&fp, g.input_len(), 1.0, &mut rng);
    let w = random_fixed(&fp, 64 * 27, 0.5, &mut rng);
    let (sx, sw) = (s.share(Party::P1, &x), s.share(Party::P0, &w));
    let y = sim_conv(&sx, &sw, &g, 64, &mut s).unwrap();
    let got = s.reveal(&y);

    // Direct sliding-window oracle, independent of the im2col layout.
    for o in 0..64 {
        for oy in 0..32usize {
            for ox in 0..32usize {
                let mut acc = 0i128;
                for c in 0..3 {
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let (iy, ix) = (oy + ky, ox + kx);
                            if iy < 1 || ix < 1 || iy > 32 || ix > 32 {
                                continue;
                            }
                            let xv = x[(c * 32 + iy - 1) * 32 + ix - 1];
                            acc += signed(&fp, w[o * 27 + (c * 3 + ky) * 3 + kx]) * signed(&fp, xv);
                        }
                    }
                }
                assert_eq!(signed(&fp, got[(o * 32 + oy) * 32 + ox]), acc >> 13);
            }
        }
    }
    let log = s.into_log();
    assert_eq!(log.rounds(), 2);
    assert_eq!(log.total_bytes(), 994_304);
    assert_eq!(log.bytes_by_tag()[&OpTag::Conv], 994_304);
}

#[test]
fn linear_matches_fixed_point_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let mut s = session(trial);
        let fp = s.fp;
        let x = random_fixed(&fp, 4, 2.0, &mut rng);
        let w = random_fixed(&fp, 16, 2.0, &mut rng);
        let (sx, sw) = (s.share(Party::P1, &x), s.share(Party::P0, &w));
        let y = sim_linear(&sx, &sw, 4, 4, &mut s).unwrap();
        let y = s.reveal(&y);
        for j in 0..4 {
            let acc: i128 = (0..4).map(|i| signed(&fp, x[i]) * signed(&fp, w[i * 4 + j])).sum();
            assert_eq!(signed(&fp, y[j]), acc >> 13);
        }
        let log = s.into_log();
        assert_eq!(log.total_bytes() * 8, (2 * 4 + 2 * 16 + 4) * 64);
    }
}

#[test]
fn drelu_on_scalars() {
    let mut s = session(4);
    let fp = s.fp;
    let ring = s.ring();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (v, want) in [(0.0, 1), (-3.2, 0), (7.5, 1)] {
        let t = relush::mpc::share(fp.encode(v).unwrap(), &ring, &mut rng);
        let b = sim_drelu(t, &mut s).unwrap();
        assert_eq!(relush::mpc::reconstruct(b, &ring), want);
    }
    assert_eq!(s.into_log().rounds(), 24);
}

fn plain_grelu_oracle(fp: &FixedPoint, x: &[u64], channels: usize, spec: &GroupingSpec) -> Vec<u64> {
    let vals: Vec<f64> = x.iter().map(|&v| fp.decode(v)).collect();
    let t = Tensor::new(vec![channels, spec.height, spec.width], vals).unwrap();
    grelu(&t, spec).unwrap().data().iter().map(|&v| fp.encode(v).unwrap()).collect()
}

#[test]
fn one_hot_self_is_relu_on_toy() {
    let mut s = session(5);
    let fp = s.fp;
    let x: Vec<u64> = [-1.5, 0.0, 2.25, -0.001].iter().map(|&v| fp.encode(v).unwrap()).collect();
    let sx = s.share(Party::P1, &x);
    let spec = GroupingSpec::one_hot_self(2, 2);
    let y = sim_grelu_layer(&sx, 1, &spec, &GateSecret::None, None, &mut s).unwrap();
    let want: Vec<u64> = [0.0, 0.0, 2.25, 0.0].iter().map(|&v| fp.encode(v).unwrap()).collect();
    assert_eq!(s.reveal(&y), want);
}

#[test]
fn negative_whole_channel_gate_zeroes_channel() {
    let mut s = session(6);
    let fp = s.fp;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = uniform_patches(4, 4, 4).unwrap().with_learned_gates(2);
    let w: Vec<u64> = vec![fp.encode(1.0 / 16.0).unwrap(); 32];
    // Channel 0 clearly negative on average, channel 1 clearly positive.
    let x: Vec<u64> = (0..32)
        .map(|i| {
            let base = if i < 16 { -1.0 } else { 1.0 };
            fp.encode(base + rng.random_range(-0.5..0.5)).unwrap()
        })
        .collect();
    let sx = s.share(Party::P1, &x);
    let y = sim_grelu_layer(&sx, 2, &spec, &GateSecret::Private(w), None, &mut s).unwrap();
    let y = s.reveal(&y);
    assert!(y[..16].iter().all(|&v| v == 0));
    assert_eq!(&y[16..], &x[16..]);
    assert_eq!(y, plain_grelu_oracle(&fp, &x, 2, &spec));
}

#[test]
fn gated_layer_ledger_counts_match_gate_ops() {
    let mut s = session(7);
    let fp = s.fp;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = uniform_patches(8, 8, 4).unwrap().with_learned_gates(2);
    let x = random_fixed(&fp, 128, 1.0, &mut rng);
    let w = random_fixed(&fp, 128, 1.0, &mut rng);
    let sx = s.share(Party::P1, &x);
    sim_grelu_layer(&sx, 2, &spec, &GateSecret::Private(w), None, &mut s).unwrap();
    let log = s.into_log();
    let by_tag = log.bytes_by_tag();
    let (groups, activations) = (8u64, 128u64);
    assert_eq!(by_tag[&OpTag::Drelu], groups * 83 * 8);
    assert_eq!(by_tag[&OpTag::Mul], activations * 5 * 8);
    assert_eq!(by_tag[&OpTag::Gate], (4 * activations + groups) * 8);
    assert_eq!(log.rounds(), 12);
}

#[test]
fn desk_variants_are_equivalent_and_reconcile() {
    let cfg = common::preset("desk");
    for variant in cfg.variant_names() {
        let m = common::model("desk", &variant, 11);
        let fm = FixedModel::from_model(&m).unwrap();
        for i in 0..3 {
            let img = common::random_image(fm.input_len, 100 + i);
            let out = sim_network(&fm, &img, 7 + i).unwrap();
            assert!(out.equivalent(), "{variant}: mismatch at {:?}", out.first_mismatch);
            assert_eq!(out.logits, out.reference);
            let rec = reconcile(&out.log, &fm.report);
            assert!(rec.passed(), "{variant}: {:?}", rec.mismatches);
            let x = Tensor::new(vec![1, 3, 16, 16], img).unwrap();
            let float = m.forward(&x).unwrap();
            let decoded = out.decoded(&fm.fp);
            for (a, b) in decoded.iter().zip(float.data()) {
                assert!((a - b).abs() < 0.05, "{variant}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn inference_flips_are_simulated_exactly() {
    let mut doc: serde_json::Value = serde_json::from_str(relush::config::presets::DESK).unwrap();
    for layer in ["relu1", "relu2"] {
        doc["variants"]["ngrelu"][layer]["grelu"]["noise"]["at_inference"] = true.into();
    }
    let cfg = NetworkConfig::from_json(&doc.to_string()).unwrap();
    let net = cfg.resolve("ngrelu").unwrap();
    let m = Model::new(&net, 3, &Default::default()).unwrap();
    let fm = FixedModel::from_model(&m).unwrap();
    for i in 0..4 {
        let out = sim_network(&fm, &common::random_image(fm.input_len, i), i).unwrap();
        assert!(out.equivalent());
        assert!(reconcile(&out.log, &fm.report).passed());
    }
}

#[test]
fn overflow_names_the_layer() {
    let mut m = common::model("desk", "original", 2);
    for v in m.parameters_mut()[0].data_mut() {
        *v *= 1e11;
    }
    let fm = FixedModel::from_model(&m).unwrap();
    let err = sim_network(&fm, &common::random_image(fm.input_len, 1), 1).unwrap_err();
    match err {
        Error::Overflow { layer, .. } => assert_eq!(layer, "conv1"),
        other => panic!("expected an overflow, got {other}"),
    }
}

#[test]
fn same_seed_same_ledger_and_shares() {
    let m = common::model("desk", "fc_noise", 4);
    let fm = FixedModel::from_model(&m).unwrap();
    let img = common::random_image(fm.input_len, 9);
    let a = sim_network(&fm, &img, 42).unwrap();
    let b = sim_network(&fm, &img, 42).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let x = fm.encode_input(&img).unwrap();
    let (mut s1, mut s2) = (Session::new(fm.fp, fm.log_p, 42), Session::new(fm.fp, fm.log_p, 42));
    assert_eq!(fm.evaluate(&mut s1, &x).unwrap(), fm.evaluate(&mut s2, &x).unwrap());
}

/// Top-three-bit histogram of everything P0 receives while gating `x`.
fn p0_histogram(x: &[f64], seeds: std::ops::Range<u64>) -> [u64; 8] {
    let mut bins = [0u64; 8];
    for seed in seeds {
        let mut s = session(seed);
        s.net.capture(Party::P0);
        let enc: Vec<u64> = x.iter().map(|&v| s.fp.encode(v).unwrap()).collect();
        let sx = s.share(Party::P1, &enc);
        let spec = uniform_patches(4, 4, 2).unwrap();
        sim_grelu_layer(&sx, 1, &spec, &GateSecret::None, None, &mut s).unwrap();
        for msg in s.net.transcript() {
            for &v in msg {
                bins[(v >> 61) as usize] += 1;
            }
        }
    }
    bins
}

fn chi_squared_uniform(bins: &[u64]) -> f64 {
    let total: u64 = bins.iter().sum();
    let expect = total as f64 / bins.len() as f64;
    bins.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum()
}

#[test]
fn p0_transcript_looks_uniform_for_any_secret() {
    // 7 degrees of freedom; 24.32 is the 0.999 quantile.
    let zeros = p0_histogram(&[0.0; 16], 0..200);
    let mixed: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { -2.5 } else { 1.25 * i as f64 }).collect();
    let other = p0_histogram(&mixed, 1000..1200);
    assert!(chi_squared_uniform(&zeros) < 24.32, "{zeros:?}");
    assert!(chi_squared_uniform(&other) < 24.32, "{other:?}");
    assert_eq!(zeros.iter().sum::<u64>(), other.iter().sum::<u64>());
}
