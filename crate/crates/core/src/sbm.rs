//! Stochastic-block-model sampling, cluster-mean feature initialization, and
//! the noise-perturbation dataset generator.
//!
//! Sampling is undirected (one Bernoulli per unordered pair) with both
//! directions stored; labels are block indices. All generators are pure
//! functions of their seed.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::rng::{derive_seed, DetRng};

#[derive(Debug, Error)]
pub enum SbmError {
    #[error("invalid SBM spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest format error: {0}")]
    Format(String),
}

/// Block-model specification.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn two_block(per_block: usize, p_in: f64, p_out: f64, seed: u64) -> Self {
        Self { block_sizes: vec![per_block, per_block], p_in, p_out, seed }
    }

    pub fn n_nodes(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn validate(&self) -> Result<(), SbmError> {
        if self.block_sizes.is_empty() || self.block_sizes.iter().any(|&b| b == 0) {
            return Err(SbmError::InvalidSpec("block sizes must be positive".into()));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SbmError::InvalidSpec(format!("{name} must lie in [0,1]")));
            }
        }
        Ok(())
    }

    /// Block index per node (nodes numbered block by block).
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = Vec::with_capacity(self.n_nodes());
        for (b, &size) in self.block_sizes.iter().enumerate() {
            labels.extend(std::iter::repeat(b).take(size));
        }
        labels
    }
}

/// Sample a graph: one Bernoulli per unordered pair, both directions stored.
pub fn sample_sbm(spec: &SbmSpec) -> Result<(Graph, Vec<usize>), SbmError> {
    spec.validate()?;
    let labels = spec.labels();
    let n = spec.n_nodes();
    let mut rng = DetRng::new(spec.seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if p > 0.0 && rng.bernoulli(p) {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    Ok((Graph::new(n, edges)?, labels))
}

/// Feature initialization: per-block means plus isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    /// `K x m` block means.
    pub means: Array2<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl FeatureSpec {
    /// Two-block means with the default geometry and a common noise level.
    pub fn two_block(separation: f64, feat_dim: usize, sigma: f64, seed: u64) -> Self {
        Self { means: Self::block_means(2, feat_dim, separation), sigma, seed }
    }

    /// Disjoint-support block means: block `k` is nonzero on its own
    /// coordinate slice, scaled so every pair of blocks sits at distance
    /// `2 * separation * sqrt(m)`.
    ///
    /// Antipodal means (`+-mu * 1`) would make the two blocks exact
    /// negatives, which pins the zero-bias tanh pair network at an
    /// odd-symmetric saddle of the margin objective; disjoint supports carry
    /// the same separation without that degeneracy.
    pub fn block_means(k: usize, feat_dim: usize, separation: f64) -> Array2<f64> {
        assert!(k >= 1 && feat_dim >= k, "need feat_dim >= n_blocks");
        let slice = feat_dim / k;
        // ||c_a - c_b||^2 = scale^2 * 2 * slice == (2 * separation * sqrt(m))^2
        let scale = separation * (2.0 * feat_dim as f64 / slice as f64).sqrt();
        let mut means = Array2::zeros((k, feat_dim));
        for b in 0..k {
            let lo = b * slice;
            let hi = lo + slice;
            for c in lo..hi {
                means[[b, c]] = scale;
            }
        }
        means
    }
}

/// `h_i(0) = mean[label_i] + sigma * N(0, I)`.
pub fn init_features(labels: &[usize], fspec: &FeatureSpec) -> Result<Array2<f64>, SbmError> {
    let max_label = labels.iter().copied().max().unwrap_or(0);
    if fspec.means.nrows() <= max_label {
        return Err(SbmError::InvalidSpec(format!(
            "means has {} rows but labels reach {max_label}",
            fspec.means.nrows()
        )));
    }
    if fspec.sigma < 0.0 {
        return Err(SbmError::InvalidSpec("sigma must be nonnegative".into()));
    }
    let m = fspec.means.ncols();
    let mut rng = DetRng::new(fspec.seed);
    let mut h = Array2::zeros((labels.len(), m));
    for (i, &l) in labels.iter().enumerate() {
        for c in 0..m {
            h[[i, c]] = fspec.means[[l, c]] + fspec.sigma * rng.normal();
        }
    }
    Ok(h)
}

/// Train/validation split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One generated instance of the perturbation protocol.
#[derive(Debug, Clone)]
pub struct SbmInstance {
    pub graph: Graph,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub sigma: f64,
    pub seed: u64,
    pub split: Split,
}

/// Per-noise-level dataset for the perturbation benchmark.
#[derive(Debug, Clone)]
pub struct PerturbationDataset {
    pub sigma: f64,
    pub instances: Vec<SbmInstance>,
}

impl PerturbationDataset {
    pub fn train(&self) -> impl Iterator<Item = &SbmInstance> {
        self.instances.iter().filter(|g| g.split == Split::Train)
    }

    pub fn val(&self) -> impl Iterator<Item = &SbmInstance> {
        self.instances.iter().filter(|g| g.split == Split::Val)
    }
}

/// Generate `n_graphs` independent (graph, features, labels) triples per
/// noise level, with a fixed leading train split of `floor(split * n)`.
pub fn perturbation_dataset(
    n_graphs: usize,
    spec: &SbmSpec,
    separation: f64,
    feat_dim: usize,
    sigma_list: &[f64],
    split: f64,
    seed: u64,
) -> Result<Vec<PerturbationDataset>, SbmError> {
    if !(0.0 < split && split < 1.0) {
        return Err(SbmError::InvalidSpec("split must lie in (0,1)".into()));
    }
    spec.validate()?;
    let n_train = (split * n_graphs as f64).floor() as usize;
    let means = FeatureSpec::block_means(spec.n_blocks(), feat_dim, separation);
    let mut out = Vec::with_capacity(sigma_list.len());
    for (si, &sigma) in sigma_list.iter().enumerate() {
        let mut instances = Vec::with_capacity(n_graphs);
        for g in 0..n_graphs {
            let inst_seed = derive_seed(seed, (si as u64) << 32 | g as u64);
            let gspec = SbmSpec { seed: inst_seed, ..spec.clone() };
            let (graph, labels) = sample_sbm(&gspec)?;
            let fspec = FeatureSpec {
                means: means.clone(),
                sigma,
                seed: derive_seed(inst_seed, 0xfea7),
            };
            let features = init_features(&labels, &fspec)?;
            instances.push(SbmInstance {
                graph,
                features,
                labels,
                sigma,
                seed: inst_seed,
                split: if g < n_train { Split::Train } else { Split::Val },
            });
        }
        out.push(PerturbationDataset { sigma, instances });
    }
    Ok(out)
}

/// Features CSV: one row per node, `m` columns.
pub fn write_features_csv(path: &Path, h: &Array2<f64>) -> Result<(), SbmError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..h.ncols()).map(|c| format!("f_{c}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..h.nrows() {
        let row: Vec<String> = (0..h.ncols()).map(|c| h[[i, c]].to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Manifest entry for one instance written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub graph_path: String,
    pub features_path: String,
    pub labels: Vec<usize>,
    pub sigma: f64,
    pub seed: u64,
    pub split: Split,
}

/// Dataset manifest: JSON listing per-graph file paths, sigma, seed, split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Write instances as edge lists + feature CSVs plus a JSON manifest.
pub fn write_dataset(
    dir: &Path,
    datasets: &[PerturbationDataset],
) -> Result<DatasetManifest, SbmError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for ds in datasets {
        for (k, inst) in ds.instances.iter().enumerate() {
            let tag = format!("sigma{}_{k:04}", ds.sigma);
            let graph_path = dir.join(format!("{tag}.edges"));
            let features_path = dir.join(format!("{tag}.features.csv"));
            inst.graph.write_edge_list(&graph_path)?;
            write_features_csv(&features_path, &inst.features)?;
            entries.push(ManifestEntry {
                graph_path: graph_path.to_string_lossy().into_owned(),
                features_path: features_path.to_string_lossy().into_owned(),
                labels: inst.labels.clone(),
                sigma: inst.sigma,
                seed: inst.seed,
                split: inst.split,
            });
        }
    }
    let manifest = DatasetManifest { entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SbmError::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn read_manifest(path: &PathBuf) -> Result<DatasetManifest, SbmError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| SbmError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_complete_limits() {
        let spec = SbmSpec::two_block(2, 0.0, 0.0, 1);
        let (g, labels) = sample_sbm(&spec).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert_eq!(labels, vec![0, 0, 1, 1]);

        let spec = SbmSpec::two_block(2, 1.0, 1.0, 1);
        let (g, _) = sample_sbm(&spec).unwrap();
        assert_eq!(g.n_edges(), 12, "complete graph on 4 nodes, directed");
    }

    #[test]
    fn symmetric_storage_and_label_consistency() {
        let spec = SbmSpec { block_sizes: vec![3, 4, 5], p_in: 0.7, p_out: 0.2, seed: 9 };
        let (g, labels) = sample_sbm(&spec).unwrap();
        let edges: std::collections::HashSet<_> = g.edges().iter().copied().collect();
        for &(i, j) in g.edges() {
            assert!(edges.contains(&(j, i)), "missing reverse of ({i},{j})");
            assert_ne!(i, j);
        }
        // node i's label is the block whose range contains i
        let mut start = 0;
        for (b, &size) in spec.block_sizes.iter().enumerate() {
            for i in start..start + size {
                assert_eq!(labels[i], b);
            }
            start += size;
        }
    }

    #[test]
    fn intra_edge_count_matches_binomial_moments() {
        // Block of 50 at p_in = 0.5: mean 612.5, sd 17.5 per block; the mean
        // over 200 seeds must land within 3 standard errors.
        let n_seeds = 200;
        let mut total = 0.0;
        for seed in 0..n_seeds {
            let spec = SbmSpec::two_block(50, 0.5, 0.05, 1000 + seed);
            let (g, labels) = sample_sbm(&spec).unwrap();
            let intra_block0 = g
                .edges()
                .iter()
                .filter(|&&(i, j)| i < j && labels[i] == 0 && labels[j] == 0)
                .count();
            total += intra_block0 as f64;
        }
        let mean = total / n_seeds as f64;
        let expected = 0.5 * (50.0 * 49.0 / 2.0);
        let sd = (1225.0f64 * 0.25).sqrt();
        let tol = 3.0 * sd / (n_seeds as f64).sqrt();
        assert!(
            (mean - expected).abs() <= tol,
            "mean {mean} vs {expected} (tol {tol})"
        );
    }

    #[test]
    fn features_zero_sigma_equals_block_means() {
        let labels = vec![0, 1, 1, 0];
        let fspec = FeatureSpec::two_block(0.5, 4, 0.0, 7);
        let h = init_features(&labels, &fspec).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            for c in 0..4 {
                assert_eq!(h[[i, c]], fspec.means[[l, c]]);
            }
        }
        // separation matches the two-block contract: 2 * mu * sqrt(m)
        let d2: f64 = (0..4)
            .map(|c| (fspec.means[[0, c]] - fspec.means[[1, c]]).powi(2))
            .sum();
        assert!((d2.sqrt() - 2.0 * 0.5 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn feature_noise_variance_concentrates() {
        // 10^4 scalar draws at sigma = 1: sample variance within [0.94, 1.06].
        let labels = vec![0usize; 200];
        let fspec = FeatureSpec {
            means: Array2::zeros((1, 50)),
            sigma: 1.0,
            seed: 77,
        };
        let h = init_features(&labels, &fspec).unwrap();
        let n = (200 * 50) as f64;
        let mean: f64 = h.iter().sum::<f64>() / n;
        let var: f64 = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((0.94..=1.06).contains(&var), "variance {var}");
    }

    #[test]
    fn feature_seeds_differ() {
        let labels = vec![0, 0, 1];
        let a = init_features(&labels, &FeatureSpec::two_block(1.0, 4, 0.3, 1)).unwrap();
        let b = init_features(&labels, &FeatureSpec::two_block(1.0, 4, 0.3, 2)).unwrap();
        assert_ne!(a, b);
        let c = init_features(&labels, &FeatureSpec::two_block(1.0, 4, 0.3, 1)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn perturbation_split_counts() {
        let spec = SbmSpec::two_block(5, 0.5, 0.3, 3);
        let ds = perturbation_dataset(10, &spec, 0.5, 4, &[0.1], 0.8, 42).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].train().count(), 8);
        assert_eq!(ds[0].val().count(), 2);
        assert_eq!(ds[0].instances.len(), 10);
    }

    #[test]
    fn perturbation_deterministic_and_sigma_tagged() {
        let spec = SbmSpec::two_block(4, 0.6, 0.3, 5);
        let a = perturbation_dataset(6, &spec, 0.5, 3, &[0.1, 1.0], 0.5, 11).unwrap();
        let b = perturbation_dataset(6, &spec, 0.5, 3, &[0.1, 1.0], 0.5, 11).unwrap();
        assert_eq!(a.len(), 2);
        for (da, db) in a.iter().zip(&b) {
            for (ia, ib) in da.instances.iter().zip(&db.instances) {
                assert_eq!(ia.graph, ib.graph);
                assert_eq!(ia.features, ib.features);
            }
        }
        // graphs differ between sigma levels (independent streams)
        assert_ne!(a[0].instances[0].graph, a[1].instances[0].graph);
        assert!((a[1].instances[0].sigma - 1.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join("hgode_sbm_manifest_test");
        let spec = SbmSpec::two_block(3, 0.8, 0.2, 1);
        let ds = perturbation_dataset(4, &spec, 0.5, 2, &[0.5], 0.75, 2).unwrap();
        let manifest = write_dataset(&dir, &ds).unwrap();
        let back = read_manifest(&dir.join("manifest.json")).unwrap();
        assert_eq!(manifest.entries.len(), back.entries.len());
        assert_eq!(back.entries.len(), 4);
        // graph files parse back to the original graphs
        let g = Graph::read_edge_list(Path::new(&back.entries[0].graph_path)).unwrap();
        assert_eq!(&g, &ds[0].instances[0].graph);
        assert_eq!(back.entries[0].split, Split::Train);
        assert_eq!(back.entries[3].split, Split::Val);
    }
}
