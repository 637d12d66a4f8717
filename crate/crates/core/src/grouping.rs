//! Building [`GroupingSpec`]s: data-agnostic uniform patches, and
//! agglomerative clustering of activation positions by how often their ReLU
//! decisions disagree over the training set.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::model::Model;
use crate::relu_variants::{GateWeights, GroupingSpec, PerChannel};

/// Non-overlapping `k x k` tiles in row-major order; boundary tiles are
/// truncated. Each tile is gated by its middle activation until gates are
/// replaced (see [`GroupingSpec::with_learned_gates`]).
pub fn uniform_patches(height: usize, width: usize, k: usize) -> Result<GroupingSpec> {
    if k < 1 {
        return Err(Error::invalid("patch size must be at least 1"));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("cannot tile an empty plane"));
    }
    if k == 1 {
        return Ok(GroupingSpec::one_hot_self(height, width));
    }
    let mut groups = Vec::new();
    let mut sources = Vec::new();
    for y0 in (0..height).step_by(k) {
        let y1 = (y0 + k).min(height);
        for x0 in (0..width).step_by(k) {
            let x1 = (x0 + k).min(width);
            groups.push((y0..y1).flat_map(|y| (x0..x1).map(move |x| y * width + x)).collect());
            sources.push((y0 + (y1 - y0) / 2) * width + x0 + (x1 - x0) / 2);
        }
    }
    Ok(GroupingSpec {
        height,
        width,
        groups: PerChannel::Shared(groups),
        gate: GateWeights::OneHotSource {
            sources: PerChannel::Shared(sources),
        },
    })
}

/// Binary ReLU decisions of one channel: one row per plane position, one
/// column per training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationProfileMatrix {
    height: usize,
    width: usize,
    samples: usize,
    words: usize,
    bits: Vec<u64>,
}

impl ActivationProfileMatrix {
    pub fn new(height: usize, width: usize, samples: usize) -> Self {
        let words = samples.div_ceil(64);
        ActivationProfileMatrix {
            height,
            width,
            samples,
            words,
            bits: vec![0; height * width * words],
        }
    }

    pub fn from_rows(height: usize, width: usize, rows: &[Vec<bool>]) -> Result<Self> {
        if rows.len() != height * width {
            return Err(Error::shape(format!("{} rows for a {height}x{width} plane", rows.len())));
        }
        let samples = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(height, width, samples);
        for (p, row) in rows.iter().enumerate() {
            if row.len() != samples {
                return Err(Error::shape("profile rows differ in length"));
            }
            for (j, &b) in row.iter().enumerate() {
                m.set(p, j, b);
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.height * self.width
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn set(&mut self, position: usize, sample: usize, bit: bool) {
        let word = &mut self.bits[position * self.words + sample / 64];
        let mask = 1u64 << (sample % 64);
        if bit {
            *word |= mask;
        } else {
            *word &= !mask;
        }
    }

    pub fn get(&self, position: usize, sample: usize) -> bool {
        self.bits[position * self.words + sample / 64] >> (sample % 64) & 1 == 1
    }

    fn row(&self, position: usize) -> &[u64] {
        &self.bits[position * self.words..(position + 1) * self.words]
    }

    /// Number of examples on which positions `p` and `q` disagree.
    pub fn hamming(&self, p: usize, q: usize) -> u32 {
        self.row(p).iter().zip(self.row(q)).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    /// Packed little-endian bitset: header `(H: u16, W: u16, N: u32)`, then
    /// bit `p * N + j` for row `p`, example `j`, least significant bit first.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = u16::try_from(self.height).map_err(|_| Error::format("plane height exceeds u16"))?;
        let w = u16::try_from(self.width).map_err(|_| Error::format("plane width exceeds u16"))?;
        let n = u32::try_from(self.samples).map_err(|_| Error::format("sample count exceeds u32"))?;
        let total = self.rows() * self.samples;
        let mut out = Vec::with_capacity(8 + total.div_ceil(8));
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        let mut packed = vec![0u8; total.div_ceil(8)];
        for p in 0..self.rows() {
            for j in 0..self.samples {
                if self.get(p, j) {
                    let bit = p * self.samples + j;
                    packed[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        out.extend_from_slice(&packed);
        Ok(out)
    }

    /// Parses one matrix and returns it with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 8 {
            return Err(Error::format("profile header truncated"));
        }
        let h = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let w = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let body = (h * w * n).div_ceil(8);
        if bytes.len() < 8 + body {
            return Err(Error::format(format!(
                "profile body truncated: need {body} bytes, have {}",
                bytes.len() - 8
            )));
        }
        let mut m = Self::new(h, w, n);
        for p in 0..h * w {
            for j in 0..n {
                let bit = p * n + j;
                if bytes[8 + bit / 8] >> (bit % 8) & 1 == 1 {
                    m.set(p, j, true);
                }
            }
        }
        Ok((m, 8 + body))
    }
}

/// Writes one profile matrix per channel, back to back.
pub fn save_profiles(path: &Path, profiles: &[ActivationProfileMatrix]) -> Result<()> {
    let mut bytes = Vec::new();
    for p in profiles {
        bytes.extend(p.to_bytes()?);
    }
    write_atomic(path, &bytes)
}

pub fn load_profiles(path: &Path) -> Result<Vec<ActivationProfileMatrix>> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::new();
    let mut rest = bytes.as_slice();
    while !rest.is_empty() {
        let (m, used) = ActivationProfileMatrix::from_bytes(rest)?;
        out.push(m);
        rest = &rest[used..];
    }
    Ok(out)
}

/// Records `[pre-activation >= 0]` at activation layer `layer_index` for
/// every training example (up to `max_samples`), one matrix per channel.
///
/// Profiles reveal information about the examples they are computed from, so
/// only the training split is accepted.
pub fn record_activation_profiles(
    model: &Model,
    dataset: &Dataset,
    layer_index: usize,
    max_samples: usize,
) -> Result<Vec<ActivationProfileMatrix>> {
    if dataset.split() != Split::Train {
        return Err(Error::invalid(
            "activation profiles must be computed from the training split only",
        ));
    }
    if !model.is_activation(layer_index) {
        return Err(Error::invalid(format!("layer {layer_index} is not a ReLU-bearing layer")));
    }
    let n = dataset.len().min(max_samples);
    let [c, h, w] = model.layer_input_shape(layer_index)?;
    let mut profiles = vec![ActivationProfileMatrix::new(h, w, n); c];
    let batch = 64;
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let (x, _) = dataset.batch(&idx)?;
        let pre = model.activation_input(&x, layer_index)?;
        for (b, &j) in idx.iter().enumerate() {
            for (ch, profile) in profiles.iter_mut().enumerate() {
                let base = (b * c + ch) * h * w;
                for p in 0..h * w {
                    if pre.data()[base + p] >= 0.0 {
                        profile.set(p, j, true);
                    }
                }
            }
        }
    }
    Ok(profiles)
}

/// Symmetric pairwise Hamming distances between profile rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, p: usize, q: usize) -> u32 {
        self.data[p * self.n + q]
    }
}

pub fn hamming_distance_matrix(profiles: &ActivationProfileMatrix) -> Result<DistanceMatrix> {
    let n = profiles.rows();
    if n == 0 {
        return Err(Error::invalid("empty profile matrix"));
    }
    let mut data = vec![0; n * n];
    for p in 0..n {
        for q in p + 1..n {
            let d = profiles.hamming(p, q);
            data[p * n + q] = d;
            data[q * n + p] = d;
        }
    }
    Ok(DistanceMatrix { n, data })
}

/// Per-position cluster labels for one channel plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterMap {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::shape("cluster map size does not match its plane"));
        }
        let mut used = vec![false; self.k];
        for &l in &self.labels {
            if l >= self.k {
                return Err(Error::invalid(format!("label {l} outside [0, {})", self.k)));
            }
            used[l] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::invalid(format!("cluster {empty} is empty")));
        }
        Ok(())
    }

    /// Member positions of each cluster, in label order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (p, &l) in self.labels.iter().enumerate() {
            groups[l].push(p);
        }
        groups
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut width = None;
        let mut height = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|e| Error::format(format!("bad label `{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(Error::format("ragged cluster map CSV"));
            }
            labels.extend(row);
            height += 1;
        }
        let width = width.ok_or_else(|| Error::format("empty cluster map CSV"))?;
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let map = ClusterMap { height, width, labels, k };
        map.validate()?;
        Ok(map)
    }

    /// RGB image with one deterministic palette color per label.
    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(palette_color(self.labels[y as usize * self.width + x as usize]))
        })
    }

    /// Writes `<stem>.csv` and `<stem>.png` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        let mut png = Vec::new();
        self.to_rgb()
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
        write_atomic(&dir.join(format!("{stem}.png")), &png)
    }
}

/// Golden-angle hue walk; labels map to colors independently of `k`.
fn palette_color(label: usize) -> [u8; 3] {
    let hue = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.55 + 0.4 * ((label / 7) % 2) as f64, 0.95 - 0.35 * ((label / 3) % 2) as f64);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Single-linkage clustering of a subset of positions into `k` sets. Returns
/// labels aligned with `positions` (numbered by first appearance) and the
/// distance of every merge performed.
fn single_linkage(profiles: &ActivationProfileMatrix, positions: &[usize], k: usize) -> (Vec<usize>, Vec<u32>) {
    let n = positions.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((profiles.hamming(positions[a], positions[b]), a, b));
        }
    }
    // Ties resolve to the lexicographically smallest index pair.
    pairs.sort_unstable();
    let mut sets = DisjointSets::new(n);
    let mut clusters = n;
    let mut merges = Vec::new();
    for (d, a, b) in pairs {
        if clusters <= k {
            break;
        }
        if sets.union(a, b) {
            clusters -= 1;
            merges.push(d);
        }
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let labels = (0..n)
        .map(|a| {
            let r = sets.find(a);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect();
    (labels, merges)
}

/// Agglomerative single-linkage clustering of one channel's positions into
/// `k` clusters.
pub fn agglomerative_cluster(profiles: &ActivationProfileMatrix, k: usize) -> Result<ClusterMap> {
    Ok(agglomerative_cluster_with_merges(profiles, k)?.0)
}

/// Like [`agglomerative_cluster`], also returning the merge distance sequence.
pub fn agglomerative_cluster_with_merges(profiles: &ActivationProfileMatrix, k: usize) -> Result<(ClusterMap, Vec<u32>)> {
    let n = profiles.rows();
    if k < 1 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} positions")));
    }
    let positions: Vec<usize> = (0..n).collect();
    let (labels, merges) = single_linkage(profiles, &positions, k);
    let map = ClusterMap {
        height: profiles.height(),
        width: profiles.width(),
        labels,
        k,
    };
    Ok((map, merges))
}

/// Clusters every non-overlapping `window x window` tile independently into
/// `k_per_window` clusters. Truncated boundary tiles with fewer cells than
/// `k_per_window` keep one cluster per cell.
pub fn windowed_cluster_map(profiles: &ActivationProfileMatrix, window: usize, k_per_window: usize) -> Result<ClusterMap> {
    if window < 1 || k_per_window < 1 {
        return Err(Error::invalid("window and cluster count must be at least 1"));
    }
    if k_per_window > window * window {
        return Err(Error::invalid(format!(
            "{k_per_window} clusters per window exceed the {} cells of a {window}x{window} window",
            window * window
        )));
    }
    let tiles = uniform_patches(profiles.height(), profiles.width(), window)?;
    let mut labels = vec![0; profiles.rows()];
    let mut offset = 0;
    for tile in tiles.groups(0) {
        let k = k_per_window.min(tile.len());
        let (local, _) = single_linkage(profiles, tile, k);
        for (&p, &l) in tile.iter().zip(&local) {
            labels[p] = offset + l;
        }
        offset += k;
    }
    Ok(ClusterMap {
        height: profiles.height(),
        width: profiles.width(),
        labels,
        k: offset,
    })
}

/// Windowed clustering of every channel, assembled into a learned-gate
/// [`GroupingSpec`] with weights initialized to `1/|group|`.
pub fn windowed_cluster(profiles: &[ActivationProfileMatrix], window: usize, k_per_window: usize) -> Result<(GroupingSpec, Vec<ClusterMap>)> {
    let first = profiles.first().ok_or_else(|| Error::invalid("no channel profiles"))?;
    let maps = profiles
        .par_iter()
        .map(|p| windowed_cluster_map(p, window, k_per_window))
        .collect::<Result<Vec<_>>>()?;
    let spec = spec_from_cluster_maps(first.height(), first.width(), &maps)?;
    Ok((spec, maps))
}

pub fn spec_from_cluster_maps(height: usize, width: usize, maps: &[ClusterMap]) -> Result<GroupingSpec> {
    for m in maps {
        m.validate()?;
        if (m.height, m.width) != (height, width) {
            return Err(Error::shape("cluster maps disagree on plane size"));
        }
    }
    let spec = GroupingSpec {
        height,
        width,
        groups: PerChannel::PerChannel(maps.iter().map(ClusterMap::groups).collect()),
        gate: GateWeights::OneHotSelf,
    }
    .with_learned_gates(maps.len());
    spec.validate()?;
    Ok(spec)
}

/// One CSV line per channel: `channel,groups`.
pub fn group_count_summary(spec: &GroupingSpec, channels: usize) -> String {
    let mut out = String::from("channel,groups\n");
    for c in 0..channels {
        let _ = writeln!(out, "{c},{}", spec.group_count(c));
    }
    out
}
