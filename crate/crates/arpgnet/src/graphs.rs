//! Deterministic graph constructors for the two fixed topologies the model
//! attends over: the patch relation graph on a P×P grid and the two-sequence
//! fusion graph whose edges are limited by a temporal scope.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("grid needs at least one patch per side, got {p}")]
    InvalidGrid { p: usize },
    #[error("fusion graph needs at least one frame")]
    InvalidFrameCount,
    #[error("node {index} out of range for graph with {n_nodes} nodes")]
    NodeOutOfRange { index: usize, n_nodes: usize },
    #[error("adjacency violates {property} at ({i}, {j})")]
    InvariantViolated {
        property: &'static str,
        i: usize,
        j: usize,
    },
}

/// Dense symmetric boolean adjacency. Node counts stay in the low hundreds,
/// so a flat bool buffer beats any sparse representation here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n_nodes: usize,
    entries: Vec<bool>,
}

impl AdjacencyMatrix {
    /// An all-false matrix over `n_nodes` nodes.
    pub fn new(n_nodes: usize) -> Self {
        AdjacencyMatrix {
            n_nodes,
            entries: vec![false; n_nodes * n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n_nodes + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.entries[i * self.n_nodes + j] = value;
    }

    /// Ascending indices `j` with an edge from `i`.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>, GraphError> {
        if i >= self.n_nodes {
            return Err(GraphError::NodeOutOfRange {
                index: i,
                n_nodes: self.n_nodes,
            });
        }
        Ok((0..self.n_nodes).filter(|&j| self.get(i, j)).collect())
    }

    /// Degree of node `i`, counting the self-loop if present.
    pub fn degree(&self, i: usize) -> Result<usize, GraphError> {
        Ok(self.neighbors(i)?.len())
    }

    /// Map from degree to the number of nodes with that degree.
    pub fn degree_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for i in 0..self.n_nodes {
            let d = (0..self.n_nodes).filter(|&j| self.get(i, j)).count();
            *hist.entry(d).or_insert(0) += 1;
        }
        hist
    }

    /// Total number of true entries (directed count: symmetric pairs and
    /// self-loops each contribute per entry).
    pub fn true_entries(&self) -> usize {
        self.entries.iter().filter(|e| **e).count()
    }

    /// Checks the invariants every graph constructor guarantees: symmetry,
    /// a self-loop on every node, and no empty rows.
    pub fn validate(&self) -> Result<(), GraphError> {
        for i in 0..self.n_nodes {
            if !self.get(i, i) {
                return Err(GraphError::InvariantViolated {
                    property: "reflexivity",
                    i,
                    j: i,
                });
            }
            for j in 0..self.n_nodes {
                if self.get(i, j) != self.get(j, i) {
                    return Err(GraphError::InvariantViolated {
                        property: "symmetry",
                        i,
                        j,
                    });
                }
            }
        }
        Ok(())
    }

    /// Rows of comma-separated 0/1 flags, one row per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_nodes {
            for j in 0..self.n_nodes {
                if j > 0 {
                    out.push(',');
                }
                out.push(if self.get(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// One `i,j` line (0-based, i ≤ j) per undirected edge, self-loops
    /// included.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_nodes {
            for j in i..self.n_nodes {
                if self.get(i, j) {
                    let _ = writeln!(out, "{i},{j}");
                }
            }
        }
        out
    }
}

/// A P×P patch grid with row-major, 0-based internal indexing. Figure labels
/// in common usage are 1-based; [`GridSpec::label`] converts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    p: usize,
}

impl GridSpec {
    pub fn new(p: usize) -> Result<Self, GraphError> {
        if p == 0 {
            return Err(GraphError::InvalidGrid { p });
        }
        Ok(GridSpec { p })
    }

    /// Patches per side.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn node_count(&self) -> usize {
        self.p * self.p
    }

    pub fn row(&self, index: usize) -> usize {
        index / self.p
    }

    pub fn col(&self, index: usize) -> usize {
        index % self.p
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.p + col
    }

    /// 1-based display label for an internal index.
    pub fn label(&self, index: usize) -> usize {
        index + 1
    }
}

/// Builds the patch relation graph: node `i` connects to node `j` iff they
/// are the same patch, 4-neighborhood adjacent (same row and adjacent
/// columns, or same column and adjacent rows), or left-right mirror images
/// within the same row (`col_j == P - 1 - col_i`). Diagonal neighbors are
/// deliberately not linked.
pub fn build_relation_graph(grid: &GridSpec) -> AdjacencyMatrix {
    let p = grid.p();
    let n = grid.node_count();
    let mut adj = AdjacencyMatrix::new(n);
    for i in 0..n {
        let (ri, ci) = (grid.row(i), grid.col(i));
        for j in 0..n {
            let (rj, cj) = (grid.row(j), grid.col(j));
            let same = i == j;
            let adjacent = (ri == rj && ci.abs_diff(cj) == 1)
                || (ci == cj && ri.abs_diff(rj) == 1);
            let mirrored = ri == rj && cj == p - 1 - ci;
            adj.set(i, j, same || adjacent || mirrored);
        }
    }
    debug_assert!(adj.validate().is_ok());
    adj
}

/// Builds the fusion graph over `2T` nodes: indices `0..T` are the
/// appearance frames, `T..2T` the relation frames, and nodes `i`, `j` are
/// connected iff their frame positions differ by at most `trs`
/// (`|i mod T - j mod T| <= trs`). `trs = 0` links only same-frame pairs
/// across the two sequences; `trs >= T - 1` yields the complete graph.
pub fn build_fusion_graph(t: usize, trs: usize) -> Result<AdjacencyMatrix, GraphError> {
    if t == 0 {
        return Err(GraphError::InvalidFrameCount);
    }
    let n = 2 * t;
    let mut adj = AdjacencyMatrix::new(n);
    for i in 0..n {
        for j in 0..n {
            adj.set(i, j, (i % t).abs_diff(j % t) <= trs);
        }
    }
    debug_assert!(adj.validate().is_ok());
    Ok(adj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_graph_matches_published_neighbor_set() {
        // In the 6x6 grid, the node labeled 8 (internal index 7) must link
        // to labels 2, 7, 8, 9, 11, and 14.
        let grid = GridSpec::new(6).unwrap();
        let adj = build_relation_graph(&grid);
        let neighbors = adj.neighbors(7).unwrap();
        assert_eq!(neighbors, vec![1, 6, 7, 8, 10, 13]);
        let labels: Vec<usize> = neighbors.iter().map(|&i| grid.label(i)).collect();
        assert_eq!(labels, vec![2, 7, 8, 9, 11, 14]);
    }

    #[test]
    fn single_patch_grid_is_one_self_loop() {
        let grid = GridSpec::new(1).unwrap();
        let adj = build_relation_graph(&grid);
        assert_eq!(adj.n_nodes(), 1);
        assert!(adj.get(0, 0));
        assert_eq!(adj.neighbors(0).unwrap(), vec![0]);
    }

    /// Independent restatement of the relation predicate, evaluated pairwise.
    fn relation_predicate(p: usize, i: usize, j: usize) -> bool {
        let (ri, ci) = (i / p, i % p);
        let (rj, cj) = (j / p, j % p);
        i == j
            || (ri == rj && (ci + 1 == cj || cj + 1 == ci))
            || (ci == cj && (ri + 1 == rj || rj + 1 == ri))
            || (ri == rj && ci + cj == p - 1)
    }

    #[test]
    fn relation_graph_matches_brute_force_for_all_small_grids() {
        for p in 1..=12 {
            let grid = GridSpec::new(p).unwrap();
            let adj = build_relation_graph(&grid);
            for i in 0..p * p {
                for j in 0..p * p {
                    assert_eq!(
                        adj.get(i, j),
                        relation_predicate(p, i, j),
                        "mismatch at P={p}, pair ({i}, {j})"
                    );
                }
            }
            adj.validate().unwrap();
        }
    }

    #[test]
    fn fusion_graph_matches_brute_force_exhaustively() {
        for t in 1..=32 {
            for trs in 0..=t {
                let adj = build_fusion_graph(t, trs).unwrap();
                assert_eq!(adj.n_nodes(), 2 * t);
                for i in 0..2 * t {
                    for j in 0..2 * t {
                        let expected = (i % t).abs_diff(j % t) <= trs;
                        assert_eq!(
                            adj.get(i, j),
                            expected,
                            "mismatch at T={t}, TRS={trs}, pair ({i}, {j})"
                        );
                    }
                }
                adj.validate().unwrap();
            }
        }
    }

    #[test]
    fn fusion_graph_neighbor_examples() {
        let adj = build_fusion_graph(4, 1).unwrap();
        assert_eq!(adj.neighbors(0).unwrap(), vec![0, 1, 4, 5]);

        let adj = build_fusion_graph(2, 0).unwrap();
        assert_eq!(adj.neighbors(3).unwrap(), vec![1, 3]);
    }

    #[test]
    fn fusion_graph_with_full_scope_is_complete() {
        for t in [1usize, 3, 8] {
            let adj = build_fusion_graph(t, t.saturating_sub(1)).unwrap();
            let hist = adj.degree_histogram();
            assert_eq!(hist.len(), 1);
            assert_eq!(hist.get(&(2 * t)), Some(&(2 * t)));
        }
    }

    #[test]
    fn fusion_graph_blocks_are_identical_banded_matrices() {
        let (t, trs) = (6, 2);
        let adj = build_fusion_graph(t, trs).unwrap();
        for bi in 0..2 {
            for bj in 0..2 {
                for i in 0..t {
                    for j in 0..t {
                        let in_band = i.abs_diff(j) <= trs;
                        assert_eq!(
                            adj.get(bi * t + i, bj * t + j),
                            in_band,
                            "block ({bi},{bj}) entry ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_scope_links_exactly_cross_sequence_twins() {
        let t = 5;
        let adj = build_fusion_graph(t, 0).unwrap();
        for i in 0..2 * t {
            let twin = if i < t { i + t } else { i - t };
            let mut expected = vec![i.min(twin), i.max(twin)];
            expected.dedup();
            assert_eq!(adj.neighbors(i).unwrap(), expected);
        }
    }

    #[test]
    fn neighbors_rejects_out_of_range_node() {
        let adj = build_fusion_graph(2, 0).unwrap();
        assert!(matches!(
            adj.neighbors(4),
            Err(GraphError::NodeOutOfRange { index: 4, n_nodes: 4 })
        ));
    }

    #[test]
    fn constructors_are_pure() {
        let grid = GridSpec::new(5).unwrap();
        assert_eq!(build_relation_graph(&grid), build_relation_graph(&grid));
        assert_eq!(
            build_fusion_graph(7, 2).unwrap(),
            build_fusion_graph(7, 2).unwrap()
        );
    }

    #[test]
    fn csv_and_edge_list_formats() {
        let mut adj = AdjacencyMatrix::new(3);
        for i in 0..3 {
            adj.set(i, i, true);
        }
        adj.set(0, 2, true);
        adj.set(2, 0, true);
        assert_eq!(adj.to_csv(), "1,0,1\n0,1,0\n1,0,1\n");
        assert_eq!(adj.to_edge_list(), "0,0\n0,2\n1,1\n2,2\n");
    }

    #[test]
    fn validate_reports_violations() {
        let mut adj = AdjacencyMatrix::new(2);
        adj.set(0, 0, true);
        adj.set(1, 1, true);
        adj.set(0, 1, true);
        assert!(matches!(
            adj.validate(),
            Err(GraphError::InvariantViolated {
                property: "symmetry",
                ..
            })
        ));
        let missing_loop = AdjacencyMatrix::new(1);
        assert!(matches!(
            missing_loop.validate(),
            Err(GraphError::InvariantViolated {
                property: "reflexivity",
                ..
            })
        ));
    }

    #[test]
    fn grid_spec_rejects_zero() {
        assert!(matches!(GridSpec::new(0), Err(GraphError::InvalidGrid { p: 0 })));
    }

    #[test]
    fn grid_spec_index_roundtrip() {
        let grid = GridSpec::new(6).unwrap();
        for idx in 0..36 {
            assert_eq!(grid.index(grid.row(idx), grid.col(idx)), idx);
        }
        assert_eq!(grid.label(7), 8);
    }
}
