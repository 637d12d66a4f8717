#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relush::config::{presets, ActivationVariant, ActShape, GroupSource, NetworkConfig, ResolvedNetwork};
use relush::grouping::{windowed_cluster, ActivationProfileMatrix};
use relush::model::Model;
use relush::relu_variants::GroupingSpec;

pub fn preset(name: &str) -> NetworkConfig {
    NetworkConfig::from_json(presets::get(name).expect("shipped preset")).unwrap()
}

/// Clustered groupings for every clustered layer of `net`, built from random
/// activation profiles so no grouping file is needed.
pub fn random_cluster_specs(net: &ResolvedNetwork, seed: u64) -> BTreeMap<String, GroupingSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = BTreeMap::new();
    for l in &net.layers {
        let Some(ActivationVariant::Grelu(g)) = &l.activation else { continue };
        let GroupSource::Clustered { window, k, .. } = g.groups else { continue };
        let ActShape::Map { channels, height, width } = l.input else {
            panic!("clustered layer on a flat input")
        };
        let profiles: Vec<ActivationProfileMatrix> = (0..channels)
            .map(|_| {
                let mut m = ActivationProfileMatrix::new(height, width, 48);
                for p in 0..height * width {
                    for s in 0..48 {
                        m.set(p, s, rng.random::<bool>());
                    }
                }
                m
            })
            .collect();
        let (spec, _) = windowed_cluster(&profiles, window, k).unwrap();
        specs.insert(l.name().to_string(), spec);
    }
    specs
}

pub fn model(preset_name: &str, variant: &str, seed: u64) -> Model {
    let net = preset(preset_name).resolve(variant).unwrap();
    let specs = random_cluster_specs(&net, seed);
    Model::new(&net, seed, &specs).unwrap()
}

pub fn random_image(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>()).collect()
}
