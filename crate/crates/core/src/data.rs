//! Dataset files and a stochastic-block-model generator.
//!
//! A dataset directory holds:
//!
//! - `edges.tsv`: `src<TAB>dst` per line, 0-indexed, `#` comments allowed
//! - `features.txt`: one node per line, whitespace-separated decimals
//! - `labels.txt`: one class index per line, in node order
//! - `classes.txt` (optional): one class name per line
//!
//! plus, for fixed splits, `train_idx.txt`, `val_idx.txt` and `test_idx.txt`
//! holding one node index per line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, format_edge_list, read_edge_list, Graph};
use crate::matrix::DenseMatrix;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.txt";
pub const LABELS_FILE: &str = "labels.txt";
pub const CLASSES_FILE: &str = "classes.txt";
pub const SPLIT_FILES: [&str; 3] = ["train_idx.txt", "val_idx.txt", "test_idx.txt"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub class_names: Option<Vec<String>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        graph: Graph,
        features: DenseMatrix,
        labels: Vec<usize>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows() != n {
            return Err(Error::Data(format!(
                "{} feature rows for {n} nodes",
                features.rows()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::Data("feature dimension must be at least 1".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} nodes", labels.len())));
        }
        let from_labels = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = match &class_names {
            Some(names) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= names.len()) {
                    return Err(Error::Data(format!(
                        "label {bad} out of range for {} classes",
                        names.len()
                    )));
                }
                names.len()
            }
            None => from_labels,
        };
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, found {num_classes}")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            graph,
            features,
            labels,
            class_names,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_features(text: &str, path: &Path) -> Result<DenseMatrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, content) in content_lines(text) {
        let mut count = 0;
        for tok in content.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|e| parse_err(path, line, format!("bad number {tok:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite feature {tok:?}")));
            }
            data.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(parse_err(path, line, format!("expected {c} values, found {count}")))
            }
            _ => {}
        }
        rows += 1;
    }
    DenseMatrix::new(rows, cols.unwrap_or(0), data)
}

fn parse_indices(text: &str, path: &Path, what: &str) -> Result<Vec<usize>> {
    content_lines(text)
        .map(|(line, content)| {
            content
                .parse::<usize>()
                .map_err(|e| parse_err(path, line, format!("bad {what} {content:?}: {e}")))
        })
        .collect()
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join(LABELS_FILE);
    let labels = parse_indices(&read_file(&labels_path)?, &labels_path, "label")?;
    let features_path = dir.join(FEATURES_FILE);
    let features = parse_features(&read_file(&features_path)?, &features_path)?;
    let edges = read_edge_list(&dir.join(EDGES_FILE))?;
    let classes_path = dir.join(CLASSES_FILE);
    let class_names = if classes_path.exists() {
        Some(
            content_lines(&read_file(&classes_path)?)
                .map(|(_, l)| l.to_string())
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no labels", labels_path.display())));
    }
    let graph = build_graph(&edges, labels.len(), false)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(EDGES_FILE).display())))?;
    Dataset::new(graph, features, labels, class_names)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

/// Writes the canonical files for `d` into `dir` (created if missing).
pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path: PathBuf = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    write(EDGES_FILE, format_edge_list(&d.graph))?;
    let mut feats = String::new();
    for row in d.features.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        feats.push_str(&line.join(" "));
        feats.push('\n');
    }
    write(FEATURES_FILE, feats)?;
    write(
        LABELS_FILE,
        d.labels.iter().map(|l| format!("{l}\n")).collect(),
    )?;
    if let Some(names) = &d.class_names {
        write(CLASSES_FILE, names.iter().map(|n| format!("{n}\n")).collect())?;
    }
    Ok(())
}

/// Reads `train_idx.txt`, `val_idx.txt`, `test_idx.txt` from `dir`.
pub fn load_split_files(dir: &Path) -> Result<[Vec<usize>; 3]> {
    let mut out: [Vec<usize>; 3] = Default::default();
    for (slot, name) in out.iter_mut().zip(SPLIT_FILES) {
        let path = dir.join(name);
        *slot = parse_indices(&read_file(&path)?, &path, "node index")?;
    }
    Ok(out)
}

pub fn write_split_files(dir: &Path, split: [&[usize]; 3]) -> Result<()> {
    for (idx, name) in split.iter().zip(SPLIT_FILES) {
        let path = dir.join(name);
        let body: String = idx.iter().map(|i| format!("{i}\n")).collect();
        fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Stochastic block model with Gaussian features around orthogonal block centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub center_separation: f64,
    pub feature_noise_sd: f64,
    pub seed: u64,
    #[serde(default)]
    pub require_connected: bool,
}

impl Default for SbmConfig {
    /// The bundled 400-node, 4-block dataset.
    fn default() -> Self {
        Self {
            blocks: 4,
            nodes_per_block: 100,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 16,
            center_separation: 1.0,
            feature_noise_sd: 1.0,
            seed: 0,
            require_connected: true,
        }
    }
}

/// Seeds tried before giving up on a connected sample.
pub const SBM_CONNECT_ATTEMPTS: u64 = 20;

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::Config("SBM needs at least 2 blocks".into()));
        }
        if self.nodes_per_block == 0 {
            return Err(Error::Config("SBM blocks must be non-empty".into()));
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.feature_dim < self.blocks {
            return Err(Error::Config(format!(
                "feature_dim ({}) must be at least the number of blocks ({})",
                self.feature_dim, self.blocks
            )));
        }
        if !(self.feature_noise_sd >= 0.0 && self.feature_noise_sd.is_finite()) {
            return Err(Error::Config(format!(
                "feature_noise_sd must be >= 0, got {}",
                self.feature_noise_sd
            )));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.blocks * self.nodes_per_block
    }
}

/// Samples a dataset; with `require_connected`, retries successive seeds.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Dataset> {
    cfg.validate()?;
    let attempts = if cfg.require_connected { SBM_CONNECT_ATTEMPTS } else { 1 };
    for k in 0..attempts {
        let d = sample_sbm(cfg, cfg.seed.wrapping_add(k))?;
        if !cfg.require_connected || d.graph.is_connected() {
            return Ok(d);
        }
    }
    Err(Error::Data(format!(
        "no connected SBM sample in {attempts} seeds starting at {}",
        cfg.seed
    )))
}

fn sample_sbm(cfg: &SbmConfig, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.num_nodes();
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.nodes_per_block).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let graph = build_graph(&edges, n, false)?;
    let noise = Normal::new(0.0, cfg.feature_noise_sd)
        .map_err(|e| Error::Config(format!("feature noise: {e}")))?;
    let features = DenseMatrix::from_fn(n, cfg.feature_dim, |i, f| {
        let center = if f == labels[i] { cfg.center_separation } else { 0.0 };
        if cfg.feature_noise_sd == 0.0 {
            center
        } else {
            center + noise.sample(&mut rng)
        }
    });
    Dataset::new(graph, features, labels, None)
}

/// Fraction of (non-loop) edges whose endpoints share a label.
pub fn edge_homophily(g: &Graph, labels: &[usize]) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for (i, j) in g.undirected_edges().filter(|(i, j)| i != j) {
        total += 1;
        if labels[i] == labels[j] {
            same += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) {
        fs::write(dir.join(EDGES_FILE), "# path\n0\t1\n1\t2\n").unwrap();
        fs::write(dir.join(FEATURES_FILE), "1 0\n0 1\n1 0\n").unwrap();
        fs::write(dir.join(LABELS_FILE), "0\n1\n0\n").unwrap();
    }

    #[test]
    fn load_small_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path());
        let d = load_dataset(tmp.path()).unwrap();
        assert_eq!((d.num_nodes(), d.num_features(), d.num_classes()), (3, 2, 2));
        assert_eq!(d.graph.degrees(), &[1, 2, 1]);
    }

    #[test]
    fn missing_labels_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path());
        fs::remove_file(tmp.path().join(LABELS_FILE)).unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains(LABELS_FILE), "{err}");
    }

    #[test]
    fn malformed_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path());
        fs::write(tmp.path().join(FEATURES_FILE), "1 0\n0 NaN\n1 0\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        fixture(tmp.path());
        fs::write(tmp.path().join(FEATURES_FILE), "1 0\n0\n1 0\n").unwrap();
        assert!(load_dataset(tmp.path()).is_err());

        fixture(tmp.path());
        fs::write(tmp.path().join(CLASSES_FILE), "a\nb\n").unwrap();
        fs::write(tmp.path().join(LABELS_FILE), "0\n2\n0\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("label 2"), "{err}");

        fixture(tmp.path());
        fs::write(tmp.path().join(EDGES_FILE), "0\t7\n").unwrap();
        assert!(load_dataset(tmp.path()).is_err());
    }

    #[test]
    fn write_rejects_empty_features_and_is_canonical() {
        let g = build_graph(&[(1, 0), (2, 1), (0, 1)], 3, false).unwrap();
        assert!(Dataset::new(g.clone(), DenseMatrix::zeros(3, 0), vec![0, 1, 0], None).is_err());

        let d = Dataset::new(g, DenseMatrix::zeros(3, 1), vec![0, 1, 0], None).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(&d, tmp.path()).unwrap();
        let edges = fs::read_to_string(tmp.path().join(EDGES_FILE)).unwrap();
        assert_eq!(edges, "0\t1\n1\t2\n");
    }

    #[test]
    fn sbm_noise_free_features_sit_on_centers() {
        let cfg = SbmConfig {
            feature_noise_sd: 0.0,
            center_separation: 2.5,
            require_connected: false,
            ..SbmConfig::default()
        };
        let d = generate_sbm(&cfg).unwrap();
        for i in 0..d.num_nodes() {
            for f in 0..d.num_features() {
                let expected = if f == d.labels[i] { 2.5 } else { 0.0 };
                assert_eq!(d.features.get(i, f), expected);
            }
        }
    }

    #[test]
    fn sbm_without_inter_edges_is_disconnected() {
        let cfg = SbmConfig {
            blocks: 2,
            nodes_per_block: 30,
            p_in: 0.3,
            p_out: 0.0,
            feature_dim: 2,
            require_connected: false,
            ..SbmConfig::default()
        };
        assert!(!generate_sbm(&cfg).unwrap().graph.is_connected());
        let cfg = SbmConfig {
            require_connected: true,
            ..cfg
        };
        assert!(generate_sbm(&cfg).is_err());
    }

    #[test]
    fn sbm_is_deterministic_and_valid() {
        let cfg = SbmConfig::default();
        let a = generate_sbm(&cfg).unwrap();
        assert_eq!(a, generate_sbm(&cfg).unwrap());
        assert!(a.graph.is_connected());
        assert_eq!(a.num_classes(), 4);
        assert!(SbmConfig { p_in: 0.01, p_out: 0.1, ..cfg.clone() }.validate().is_err());
        assert!(SbmConfig { feature_dim: 3, ..cfg }.validate().is_err());
    }
}
