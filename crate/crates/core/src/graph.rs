//! Undirected graphs in CSR form and the normalized operators built on them.
//!
//! [`Graph`] only stores structure. Everything numeric goes through a
//! [`SparseOperator`]: the row-normalized adjacency `D⁻¹A`, the symmetric
//! renormalized adjacency `D̃^{-1/2}(A+I)D̃^{-1/2}`, or the normalized
//! Laplacian `I − D⁻¹A`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Immutable, symmetric, deduplicated adjacency structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    degrees: Vec<usize>,
}

/// Which normalization [`normalize_adjacency`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `D⁻¹A`
    Row,
    /// `D̃^{-1/2} Ã D̃^{-1/2}` with `Ã = A + I`
    Symmetric,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    /// Sorted neighbors of `node` (including `node` itself when it has a self-loop).
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[node]..self.row_offsets[node + 1]]
    }

    /// Number of stored directed entries; each undirected edge counts twice, a self-loop once.
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.num_nodes).all(|i| self.has_edge(i, i))
    }

    /// Each undirected edge once as `(i, j)` with `i <= j`, in row-major order.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .copied()
                .filter(move |&j| j >= i)
                .map(move |j| (i, j))
        })
    }

    /// Same graph with `(i, i)` present for every node.
    pub fn with_self_loops(&self) -> Graph {
        let edges: Vec<_> = self
            .undirected_edges()
            .chain((0..self.num_nodes).map(|i| (i, i)))
            .collect();
        build_graph(&edges, self.num_nodes, false).expect("edges of a valid graph")
    }

    /// Same graph with every `(i, i)` entry dropped.
    pub fn without_self_loops(&self) -> Graph {
        let edges: Vec<_> = self.undirected_edges().filter(|(i, j)| i != j).collect();
        build_graph(&edges, self.num_nodes, false).expect("edges of a valid graph")
    }

    /// Connected-component id per node, numbered in order of first appearance.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.num_nodes];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.num_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &v in self.neighbors(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self)
    }
}

/// Builds a symmetric, sorted, deduplicated CSR graph from an edge list.
///
/// Each pair is inserted in both directions; repeated pairs collapse.
pub fn build_graph(edges: &[(usize, usize)], num_nodes: usize, add_self_loops: bool) -> Result<Graph> {
    if num_nodes == 0 {
        return Err(Error::Graph("graph must have at least one node".into()));
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
    for &(u, v) in edges {
        if u >= num_nodes || v >= num_nodes {
            return Err(Error::Graph(format!(
                "edge ({u}, {v}) out of range for {num_nodes} nodes"
            )));
        }
        adj[u].push(v);
        if u != v {
            adj[v].push(u);
        }
    }
    if add_self_loops {
        for (i, row) in adj.iter_mut().enumerate() {
            row.push(i);
        }
    }
    let mut row_offsets = Vec::with_capacity(num_nodes + 1);
    let mut col_indices = Vec::new();
    let mut degrees = Vec::with_capacity(num_nodes);
    row_offsets.push(0);
    for mut row in adj {
        row.sort_unstable();
        row.dedup();
        degrees.push(row.len());
        col_indices.extend(row);
        row_offsets.push(col_indices.len());
    }
    Ok(Graph {
        num_nodes,
        row_offsets,
        col_indices,
        degrees,
    })
}

/// True iff the graph has a single connected component.
pub fn is_connected(g: &Graph) -> bool {
    g.components().iter().all(|&c| c == 0)
}

/// Real-valued N×N matrix sharing the CSR layout of a [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseOperator {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        match self.col_indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m.set(r, c, v);
            }
        }
        m
    }
}

/// `D⁻¹A` (row mode) or `D̃^{-1/2}(A+I)D̃^{-1/2}` (symmetric mode).
///
/// In row mode a node without neighbors gets an all-zero row.
pub fn normalize_adjacency(g: &Graph, mode: Normalization) -> SparseOperator {
    match mode {
        Normalization::Row => {
            let values = (0..g.num_nodes())
                .flat_map(|i| {
                    let w = 1.0 / g.degree(i) as f64;
                    std::iter::repeat_n(w, g.degree(i))
                })
                .collect();
            SparseOperator {
                n: g.num_nodes(),
                row_offsets: g.row_offsets.clone(),
                col_indices: g.col_indices.clone(),
                values,
            }
        }
        Normalization::Symmetric => {
            let looped = if g.has_self_loops() {
                g.clone()
            } else {
                g.with_self_loops()
            };
            let inv_sqrt: Vec<f64> = looped
                .degrees()
                .iter()
                .map(|&d| 1.0 / (d as f64).sqrt())
                .collect();
            let mut values = Vec::with_capacity(looped.nnz());
            for i in 0..looped.num_nodes() {
                for &j in looped.neighbors(i) {
                    values.push(inv_sqrt[i] * inv_sqrt[j]);
                }
            }
            SparseOperator {
                n: looped.num_nodes,
                row_offsets: looped.row_offsets,
                col_indices: looped.col_indices,
                values,
            }
        }
    }
}

/// `Δ̃ = I − D⁻¹A`.
pub fn normalized_laplacian(g: &Graph) -> SparseOperator {
    let a_hat = normalize_adjacency(g, Normalization::Row);
    let n = g.num_nodes();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(a_hat.nnz() + n);
    let mut values = Vec::with_capacity(a_hat.nnz() + n);
    row_offsets.push(0);
    for i in 0..n {
        let mut diag_done = false;
        for (j, v) in a_hat.row(i) {
            if !diag_done && j >= i {
                if j == i {
                    col_indices.push(i);
                    values.push(1.0 - v);
                    diag_done = true;
                    continue;
                }
                col_indices.push(i);
                values.push(1.0);
                diag_done = true;
            }
            col_indices.push(j);
            values.push(-v);
        }
        if !diag_done {
            col_indices.push(i);
            values.push(1.0);
        }
        row_offsets.push(col_indices.len());
    }
    SparseOperator {
        n,
        row_offsets,
        col_indices,
        values,
    }
}

fn check_spmm(op: &SparseOperator, m: &DenseMatrix, name: &'static str) -> Result<()> {
    if m.rows() != op.n {
        return Err(Error::shape(name, format!("{} rows", op.n), m.rows()));
    }
    Ok(())
}

fn spmm_row(op: &SparseOperator, m: &DenseMatrix, r: usize, out: &mut [f64]) {
    for (c, v) in op.row(r) {
        for (o, &x) in out.iter_mut().zip(m.row(c)) {
            *o += v * x;
        }
    }
}

/// Sparse-dense product `op · m`, O(nnz · C).
pub fn spmm(op: &SparseOperator, m: &DenseMatrix) -> Result<DenseMatrix> {
    check_spmm(op, m, "spmm")?;
    let mut out = DenseMatrix::zeros(op.n, m.cols());
    for r in 0..op.n {
        spmm_row(op, m, r, out.row_mut(r));
    }
    Ok(out)
}

/// Row-partitioned parallel [`spmm`]; bit-identical to the sequential result.
pub fn spmm_par(op: &SparseOperator, m: &DenseMatrix) -> Result<DenseMatrix> {
    check_spmm(op, m, "spmm_par")?;
    let cols = m.cols();
    let mut out = DenseMatrix::zeros(op.n, cols);
    if cols == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(r, row)| spmm_row(op, m, r, row));
    Ok(out)
}

/// `opᵀ · m` without materializing the transpose.
pub fn spmm_transpose(op: &SparseOperator, m: &DenseMatrix) -> Result<DenseMatrix> {
    check_spmm(op, m, "spmm_transpose")?;
    let mut out = DenseMatrix::zeros(op.n, m.cols());
    for r in 0..op.n {
        let src = m.row(r);
        for (c, v) in op.row(r) {
            for (o, &x) in out.row_mut(c).iter_mut().zip(src) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// Parses a tab-separated edge list (`src<TAB>dst`, `#` comments).
pub fn parse_edge_list(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(format!("expected `src<TAB>dst`, got {line:?}")));
        };
        let a = a
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad source index {a:?}: {e}")))?;
        let b = b
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad target index {b:?}: {e}")))?;
        edges.push((a, b));
    }
    Ok(edges)
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text, path)
}

/// Canonical edge-list text: one line per undirected edge, `src < dst` (self-loops as `i\ti`).
pub fn format_edge_list(g: &Graph) -> String {
    let mut out = String::new();
    for (i, j) in g.undirected_edges() {
        out.push_str(&format!("{i}\t{j}\n"));
    }
    out
}
