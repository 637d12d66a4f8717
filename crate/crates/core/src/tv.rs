//! Total variation of post-activation feature maps.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::ActShape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// Sum of absolute vertical and horizontal neighbor differences of one
/// row-major `h x w` plane.
pub fn total_variation(plane: &[f64], h: usize, w: usize) -> f64 {
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            if y + 1 < h {
                tv += (plane[(y + 1) * w + x] - v).abs();
            }
            if x + 1 < w {
                tv += (plane[y * w + x + 1] - v).abs();
            }
        }
    }
    tv
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTv {
    pub layer: String,
    pub depth: usize,
    pub tv: f64,
}

/// Mean total variation over channels and examples of every activation
/// layer's output with spatial extent, for the first `limit` examples.
pub fn layer_tv(model: &Model, data: &Dataset, limit: usize) -> Result<Vec<LayerTv>> {
    let n = data.len().min(limit);
    if n == 0 {
        return Err(Error::invalid("no examples to measure"));
    }
    let net = model.network();
    let layers: Vec<(usize, usize, usize, usize)> = net
        .layers
        .iter()
        .enumerate()
        .filter(|(i, _)| model.is_activation(*i))
        .filter_map(|(i, l)| match l.output {
            ActShape::Map { channels, height, width } => Some((i, channels, height, width)),
            ActShape::Flat(_) => None,
        })
        .collect();
    let mut sums = vec![0.0; layers.len()];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(64) {
        let (x, _) = data.batch(chunk)?;
        let trace = model.trace(&x)?;
        for (slot, &(i, c, h, w)) in layers.iter().enumerate() {
            sums[slot] += trace[i].data().chunks(h * w).map(|p| total_variation(p, h, w)).sum::<f64>() / c as f64;
        }
    }
    Ok(layers
        .iter()
        .enumerate()
        .map(|(depth, &(i, ..))| LayerTv {
            layer: net.layers[i].name().to_string(),
            depth: depth + 1,
            tv: sums[depth] / n as f64,
        })
        .collect())
}

pub fn tv_csv(rows: &[LayerTv]) -> String {
    let mut out = String::from("depth,layer,tv\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", r.depth, r.layer, r.tv);
    }
    out
}
