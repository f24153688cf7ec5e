//! Federated datasets: the Synthetic(alpha, beta) generator, MNIST IDX
//! ingestion with two-digit-per-node partitioning, and source/target splits.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Layout, Params, Sample};

pub const SYNTHETIC_LAYOUT: Layout = Layout::new(10, 60);
pub const MNIST_LAYOUT: Layout = Layout::new(10, 784);

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw samples held by one edge node before the train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset {
    pub node_id: usize,
    pub samples: Vec<Sample>,
}

/// A set of unsplit nodes sharing one model layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    pub layout: Layout,
    pub nodes: Vec<LocalDataset>,
}

/// One edge node after the split. `train` has exactly K samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeData {
    pub node_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    #[serde(default)]
    pub adversarial: Vec<Sample>,
}

impl NodeData {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Train followed by test, the node's full local dataset.
    pub fn all_samples(&self) -> Vec<Sample> {
        self.train.iter().chain(&self.test).cloned().collect()
    }
}

/// How aggregation weights are derived from node sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `|D_i| / sum |D_j|` over the full local datasets.
    #[default]
    FullSize,
    /// Proportional to the size of the test split only.
    TestSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub layout: Layout,
    pub k: usize,
    pub sources: Vec<NodeData>,
    pub targets: Vec<NodeData>,
    pub weights: Vec<f64>,
}

impl Federation {
    /// Re-checks the structural invariants, e.g. after loading from disk.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidConfig("federation has no source nodes".into()));
        }
        if self.weights.len() != self.sources.len() {
            return Err(Error::InvalidConfig(format!(
                "{} weights for {} sources",
                self.weights.len(),
                self.sources.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("negative aggregation weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("weights sum to {total}, not 1")));
        }
        let mut ids: Vec<usize> = self
            .sources
            .iter()
            .chain(&self.targets)
            .map(|n| n.node_id)
            .collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate node id across the federation".into()));
        }
        for node in self.sources.iter().chain(&self.targets) {
            if node.train.len() != self.k || node.test.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "node {} split is {}/{} with K = {}",
                    node.node_id,
                    node.train.len(),
                    node.test.len(),
                    self.k
                )));
            }
            for s in node.train.iter().chain(&node.test).chain(&node.adversarial) {
                model::validate_sample(self.layout, s)?;
            }
        }
        Ok(())
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fed: Federation = serde_json::from_slice(&bytes)?;
        fed.validate()?;
        Ok(fed)
    }
}

/// Power-law node sizes: `floor(base + Lomax(scale, shape))`, clipped to
/// `[2K + 1, max_size]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSpec {
    pub base: f64,
    pub scale: f64,
    pub shape: f64,
    pub max_size: usize,
}

impl SizeSpec {
    /// Mean about 17 and stdev about 5 samples per node.
    pub fn synthetic_default() -> Self {
        Self {
            base: 13.0,
            scale: 28.0,
            shape: 7.0,
            max_size: 60,
        }
    }

    /// Mean about 34 and stdev about 5 samples per node.
    pub fn mnist_default() -> Self {
        Self {
            base: 30.0,
            scale: 28.0,
            shape: 7.0,
            max_size: 100,
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.shape > 0.0 && self.base.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad size spec {self:?}")));
        }
        if k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if self.max_size < 2 * k + 1 {
            return Err(Error::NodeTooSmall {
                node: 0,
                size: self.max_size,
                needed: 2 * k + 1,
            });
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng, k: usize) -> usize {
        let pareto = Pareto::new(self.scale, self.shape).expect("validated size spec");
        let excess: f64 = pareto.sample(rng) - self.scale;
        let raw = (self.base + excess).floor().max(0.0) as usize;
        raw.clamp(2 * k + 1, self.max_size)
    }
}

/// A synthetic node together with the model that labelled it.
#[derive(Clone, Debug)]
pub struct SyntheticNode {
    pub data: LocalDataset,
    pub generator: Params,
}

/// Synthetic(alpha_tilde, beta_tilde) nodes with their generating models.
///
/// Per node: `u ~ N(0, alpha_tilde)`, `W, b ~ N(u, 1)` elementwise,
/// `B ~ N(0, beta_tilde)`, `v ~ N(B, 1)`, `x ~ N(v, diag(k^-1.2))` and
/// `y = argmax(W x + b)`. The random stream is consumed identically for
/// every (alpha_tilde, beta_tilde), so equal seeds differ only in scale.
pub fn generate_synthetic_nodes(
    alpha_tilde: f64,
    beta_tilde: f64,
    num_nodes: usize,
    seed: u64,
    size: &SizeSpec,
    k: usize,
) -> Result<Vec<SyntheticNode>> {
    if !(alpha_tilde >= 0.0 && beta_tilde >= 0.0) {
        return Err(Error::InvalidConfig("alpha_tilde and beta_tilde must be >= 0".into()));
    }
    if num_nodes < 2 {
        return Err(Error::InvalidConfig("a federation needs at least 2 nodes".into()));
    }
    size.validate(k)?;
    let layout = SYNTHETIC_LAYOUT;
    let f = layout.features;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..num_nodes).map(|_| size.draw(&mut rng, k)).collect();
    let feature_sd: Vec<f64> = (1..=f).map(|k| (k as f64).powf(-1.2).sqrt()).collect();
    let (sd_a, sd_b) = (alpha_tilde.sqrt(), beta_tilde.sqrt());

    let mut nodes = Vec::with_capacity(num_nodes);
    for (node_id, &n) in sizes.iter().enumerate() {
        let u = sd_a * normal(&mut rng);
        let theta: Vec<f64> = (0..layout.dim()).map(|_| u + normal(&mut rng)).collect();
        let generator = Params::new(layout, theta)?;
        let b_mean = sd_b * normal(&mut rng);
        let v: Vec<f64> = (0..f).map(|_| b_mean + normal(&mut rng)).collect();
        let samples = (0..n)
            .map(|_| {
                let x: Vec<f64> = v
                    .iter()
                    .zip(&feature_sd)
                    .map(|(m, sd)| m + sd * normal(&mut rng))
                    .collect();
                let y = model::predict(&generator, &x);
                Sample::new(x, y)
            })
            .collect();
        nodes.push(SyntheticNode {
            data: LocalDataset { node_id, samples },
            generator,
        });
    }
    Ok(nodes)
}

/// Synthetic(alpha_tilde, beta_tilde) federation data (10 classes, 60 features).
pub fn gen_synthetic(
    alpha_tilde: f64,
    beta_tilde: f64,
    num_nodes: usize,
    seed: u64,
    size: &SizeSpec,
    k: usize,
) -> Result<NodeSet> {
    let nodes = generate_synthetic_nodes(alpha_tilde, beta_tilde, num_nodes, seed, size, k)?;
    Ok(NodeSet {
        layout: SYNTHETIC_LAYOUT,
        nodes: nodes.into_iter().map(|n| n.data).collect(),
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptIdx(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX3 unsigned-byte image file. Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::NotIdx("file shorter than magic".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::NotIdx(format!("image magic {magic:#010x}")));
    }
    let header = |i: usize| be_u32(bytes, 4 + 4 * i).ok_or_else(|| Error::CorruptIdx("truncated header".into()));
    let (n, rows, cols) = (header(0)? as usize, header(1)? as usize, header(2)? as usize);
    let payload = &bytes[16..];
    let need = n * rows * cols;
    if payload.len() < need {
        return Err(Error::CorruptIdx(format!(
            "expected {need} pixel bytes, found {}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, &payload[..need]))
}

/// Parses an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::NotIdx("file shorter than magic".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::NotIdx(format!("label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| Error::CorruptIdx("truncated header".into()))? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::CorruptIdx(format!(
            "expected {n} labels, found {}",
            payload.len()
        )));
    }
    Ok(&payload[..n])
}

/// Loads an MNIST image/label IDX pair (optionally gzipped). Pixels are scaled
/// to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>> {
    let image_bytes = read_maybe_gz(images_path)?;
    let label_bytes = read_maybe_gz(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::CorruptIdx(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let dim = rows * cols;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y > 9 {
                return Err(Error::CorruptIdx(format!("label {y} at index {i}")));
            }
            let x = pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect();
            Ok(Sample::new(x, y as usize))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnistPartitionSpec {
    pub size: SizeSpec,
    /// Subsample cap per digit before distribution.
    pub per_digit_cap: usize,
}

impl Default for MnistPartitionSpec {
    fn default() -> Self {
        Self {
            size: SizeSpec::mnist_default(),
            per_digit_cap: 600,
        }
    }
}

/// The two digits held by node `i`: `i mod 10` and a distinct partner that
/// rotates every ten nodes.
pub fn mnist_node_digits(i: usize) -> (usize, usize) {
    let first = i % 10;
    let second = (first + 1 + (i / 10) % 9) % 10;
    (first, second)
}

/// Distributes samples so each node holds exactly two digit classes with
/// power-law sizes. No sample is assigned twice.
pub fn partition_mnist(
    samples: &[Sample],
    num_nodes: usize,
    seed: u64,
    spec: &MnistPartitionSpec,
    k: usize,
) -> Result<NodeSet> {
    if num_nodes < 2 {
        return Err(Error::InvalidConfig("a federation needs at least 2 nodes".into()));
    }
    spec.size.validate(k)?;
    let features = samples
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| Error::InsufficientSamples("no MNIST samples".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, s) in samples.iter().enumerate() {
        if s.y > 9 || s.x.len() != features {
            return Err(Error::InvalidSample(format!("sample {i} is not an MNIST digit")));
        }
        pools[s.y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
        pool.truncate(spec.per_digit_cap);
    }
    let mut cursors = [0usize; 10];
    let mut nodes = Vec::with_capacity(num_nodes);
    for node_id in 0..num_nodes {
        let n = spec.size.draw(&mut rng, k);
        let (d1, d2) = mnist_node_digits(node_id);
        let mut picked = Vec::with_capacity(n);
        for (digit, count) in [(d1, n - n / 2), (d2, n / 2)] {
            let start = cursors[digit];
            let end = start + count;
            if end > pools[digit].len() {
                return Err(Error::InsufficientSamples(format!(
                    "digit {digit} exhausted at node {node_id} ({} available)",
                    pools[digit].len()
                )));
            }
            picked.extend(pools[digit][start..end].iter().map(|&i| samples[i].clone()));
            cursors[digit] = end;
        }
        picked.shuffle(&mut rng);
        nodes.push(LocalDataset {
            node_id,
            samples: picked,
        });
    }
    Ok(NodeSet {
        layout: Layout::new(10, features),
        nodes,
    })
}

/// Seeded shuffle of nodes into sources and targets, then a per-node split
/// into the first K samples (train) and the rest (test).
pub fn split_sources_targets(
    set: NodeSet,
    source_fraction: f64,
    k: usize,
    seed: u64,
    weight_mode: WeightMode,
) -> Result<Federation> {
    if !(source_fraction > 0.0 && source_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "source_fraction must lie in (0, 1), got {source_fraction}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    let NodeSet { layout, mut nodes } = set;
    if nodes.len() < 2 {
        return Err(Error::InvalidConfig("a federation needs at least 2 nodes".into()));
    }
    for node in &nodes {
        if node.samples.len() < k + 1 {
            return Err(Error::NodeTooSmall {
                node: node.node_id,
                size: node.samples.len(),
                needed: k + 1,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nodes.shuffle(&mut rng);
    let n_src = ((source_fraction * nodes.len() as f64).round() as usize).clamp(1, nodes.len() - 1);

    let split = |mut node: LocalDataset, rng: &mut ChaCha8Rng| {
        node.samples.shuffle(rng);
        let test = node.samples.split_off(k);
        NodeData {
            node_id: node.node_id,
            train: node.samples,
            test,
            adversarial: Vec::new(),
        }
    };
    let targets_raw = nodes.split_off(n_src);
    let mut sources: Vec<NodeData> = nodes.into_iter().map(|n| split(n, &mut rng)).collect();
    let mut targets: Vec<NodeData> = targets_raw.into_iter().map(|n| split(n, &mut rng)).collect();
    sources.sort_by_key(|n| n.node_id);
    targets.sort_by_key(|n| n.node_id);

    let sizes: Vec<f64> = sources
        .iter()
        .map(|n| match weight_mode {
            WeightMode::FullSize => n.len() as f64,
            WeightMode::TestSize => n.test.len() as f64,
        })
        .collect();
    let total: f64 = sizes.iter().sum();
    let weights = sizes.iter().map(|s| s / total).collect();
    let fed = Federation {
        layout,
        k,
        sources,
        targets,
        weights,
    };
    fed.validate()?;
    Ok(fed)
}

/// Mean and (population) standard deviation of node sizes.
pub fn size_stats(sizes: &[usize]) -> (f64, f64) {
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<usize>() as f64 / n;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
