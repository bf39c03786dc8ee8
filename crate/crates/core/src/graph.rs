//! Graphs, batches and dataset splits.
//!
//! Edges are undirected and stored once as `(u, v)` with `u < v`. Message
//! passing expands each pair to both directions, so edge masks, weights and
//! selection probabilities all index this single list.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub num_nodes: usize,
    /// Node features, row-major `num_nodes × feature_dim`.
    pub x: Vec<f64>,
    pub feature_dim: usize,
    pub edges: Vec<(usize, usize)>,
    pub edge_weight: Vec<f64>,
    pub y: usize,
    pub env: usize,
    /// `true` iff the edge belongs to the ground-truth motif.
    pub motif_mask: Vec<bool>,
}

impl Graph {
    /// Build a graph with unit edge weights, normalizing each pair to `u < v`.
    pub fn new(
        num_nodes: usize,
        feature_dim: usize,
        x: Vec<f64>,
        edges: Vec<(usize, usize)>,
        y: usize,
        env: usize,
        motif_mask: Vec<bool>,
    ) -> Result<Self> {
        let edges: Vec<(usize, usize)> = edges.into_iter().map(|(u, v)| (u.min(v), u.max(v))).collect();
        let g = Graph {
            num_nodes,
            edge_weight: vec![1.0; edges.len()],
            x,
            feature_dim,
            edges,
            y,
            env,
            motif_mask,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Check every structural invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: String| Err(Error::Validation { field, msg });
        if self.num_nodes == 0 {
            return bad("num_nodes", "graph has no nodes".into());
        }
        if self.feature_dim == 0 || self.x.len() != self.num_nodes * self.feature_dim {
            return bad(
                "x",
                format!(
                    "expected {} x {} features, got {} values",
                    self.num_nodes,
                    self.feature_dim,
                    self.x.len()
                ),
            );
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return bad("x", "non-finite feature".into());
        }
        let mut seen = std::collections::HashSet::with_capacity(self.edges.len());
        for &(u, v) in &self.edges {
            if u >= self.num_nodes || v >= self.num_nodes {
                return bad("edges", format!("endpoint of ({u},{v}) >= num_nodes {}", self.num_nodes));
            }
            if u == v {
                return bad("edges", format!("self-loop at node {u}"));
            }
            if u > v {
                return bad("edges", format!("pair ({u},{v}) not stored as u<v"));
            }
            if !seen.insert((u, v)) {
                return bad("edges", format!("duplicate pair ({u},{v})"));
            }
        }
        if self.motif_mask.len() != self.edges.len() {
            return bad(
                "motif_mask",
                format!("{} mask entries for {} edges", self.motif_mask.len(), self.edges.len()),
            );
        }
        if self.edge_weight.len() != self.edges.len() {
            return bad(
                "edge_weight",
                format!("{} weights for {} edges", self.edge_weight.len(), self.edges.len()),
            );
        }
        if self.edge_weight.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("edge_weight", "weight outside [0,1]".into());
        }
        Ok(())
    }

    /// True when every node is reachable from node 0.
    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Same graph with nodes relabelled: old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        ensure!(perm.len() == self.num_nodes, "permutation length mismatch");
        let d = self.feature_dim;
        let mut x = vec![0.0; self.x.len()];
        for (i, &p) in perm.iter().enumerate() {
            x[p * d..(p + 1) * d].copy_from_slice(&self.x[i * d..(i + 1) * d]);
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut g = Graph::new(self.num_nodes, d, x, edges, self.y, self.env, self.motif_mask.clone())?;
        g.edge_weight = self.edge_weight.clone();
        Ok(g)
    }
}

/// Disjoint union of graphs with per-node graph ids.
#[derive(Clone, Debug)]
pub struct Batch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub x: Vec<f64>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub edge_weight: Vec<f64>,
    pub motif_mask: Vec<bool>,
    pub node_graph_id: Arc<[usize]>,
    /// Graph id of each edge.
    pub edge_graph_id: Vec<usize>,
    /// `num_graphs + 1` prefix offsets into the node rows.
    pub node_offsets: Vec<usize>,
    /// `num_graphs + 1` prefix offsets into the edge list.
    pub edge_offsets: Vec<usize>,
    pub y: Vec<usize>,
    pub env: Vec<usize>,
}

impl Batch {
    pub fn new(graphs: &[&Graph]) -> Result<Batch> {
        ensure!(!graphs.is_empty(), "cannot batch an empty list of graphs");
        let d = graphs[0].feature_dim;
        ensure!(
            graphs.iter().all(|g| g.feature_dim == d),
            "mixed feature dimensions in batch"
        );
        let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
        let total_edges: usize = graphs.iter().map(|g| g.num_edges()).sum();
        let mut x = Vec::with_capacity(total_nodes * d);
        let mut src = Vec::with_capacity(total_edges);
        let mut dst = Vec::with_capacity(total_edges);
        let mut edge_weight = Vec::with_capacity(total_edges);
        let mut motif_mask = Vec::with_capacity(total_edges);
        let mut node_graph_id = Vec::with_capacity(total_nodes);
        let mut edge_graph_id = Vec::with_capacity(total_edges);
        let mut node_offsets = vec![0];
        let mut edge_offsets = vec![0];
        for (gi, g) in graphs.iter().enumerate() {
            let off = *node_offsets.last().unwrap();
            x.extend_from_slice(&g.x);
            for &(u, v) in &g.edges {
                src.push(u + off);
                dst.push(v + off);
            }
            edge_weight.extend_from_slice(&g.edge_weight);
            motif_mask.extend_from_slice(&g.motif_mask);
            node_graph_id.extend(std::iter::repeat_n(gi, g.num_nodes));
            edge_graph_id.extend(std::iter::repeat_n(gi, g.num_edges()));
            node_offsets.push(off + g.num_nodes);
            edge_offsets.push(edge_offsets.last().unwrap() + g.num_edges());
        }
        Ok(Batch {
            num_graphs: graphs.len(),
            num_nodes: total_nodes,
            feature_dim: d,
            x,
            src: src.into(),
            dst: dst.into(),
            edge_weight,
            motif_mask,
            node_graph_id: node_graph_id.into(),
            edge_graph_id,
            node_offsets,
            edge_offsets,
            y: graphs.iter().map(|g| g.y).collect(),
            env: graphs.iter().map(|g| g.env).collect(),
        })
    }

    pub fn from_graphs(graphs: &[Graph]) -> Result<Batch> {
        let refs: Vec<&Graph> = graphs.iter().collect();
        Batch::new(&refs)
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Split back into the original graphs.
    pub fn unbatch(&self) -> Vec<Graph> {
        let d = self.feature_dim;
        (0..self.num_graphs)
            .map(|gi| {
                let (n0, n1) = (self.node_offsets[gi], self.node_offsets[gi + 1]);
                let (e0, e1) = (self.edge_offsets[gi], self.edge_offsets[gi + 1]);
                Graph {
                    num_nodes: n1 - n0,
                    x: self.x[n0 * d..n1 * d].to_vec(),
                    feature_dim: d,
                    edges: (e0..e1).map(|e| (self.src[e] - n0, self.dst[e] - n0)).collect(),
                    edge_weight: self.edge_weight[e0..e1].to_vec(),
                    y: self.y[gi],
                    env: self.env[gi],
                    motif_mask: self.motif_mask[e0..e1].to_vec(),
                }
            })
            .collect()
    }

    /// Split a per-edge vector into per-graph slices.
    pub fn split_edges<'a, T>(&self, values: &'a [T]) -> Vec<&'a [T]> {
        (0..self.num_graphs)
            .map(|g| &values[self.edge_offsets[g]..self.edge_offsets[g + 1]])
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Graph>,
    pub id_val: Vec<Graph>,
    pub ood_val: Vec<Graph>,
    pub ood_test: Vec<Graph>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    IdVal,
    OodVal,
    OodTest,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::IdVal,
        SplitName::OodVal,
        SplitName::OodTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::IdVal => "id_val",
            SplitName::OodVal => "ood_val",
            SplitName::OodTest => "ood_test",
        }
    }

    pub fn parse(s: &str) -> Option<SplitName> {
        SplitName::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl DatasetSplit {
    pub fn get(&self, name: SplitName) -> &[Graph] {
        match name {
            SplitName::Train => &self.train,
            SplitName::IdVal => &self.id_val,
            SplitName::OodVal => &self.ood_val,
            SplitName::OodTest => &self.ood_test,
        }
    }

    pub fn get_mut(&mut self, name: SplitName) -> &mut Vec<Graph> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::IdVal => &mut self.id_val,
            SplitName::OodVal => &mut self.ood_val,
            SplitName::OodTest => &mut self.ood_test,
        }
    }

    pub fn len(&self) -> usize {
        SplitName::ALL.iter().map(|&s| self.get(s).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of distinct environments among training graphs (max id + 1).
    pub fn num_envs(&self) -> usize {
        self.train.iter().map(|g| g.env + 1).max().unwrap_or(0)
    }

    /// Number of classes across all splits (max label + 1).
    pub fn num_classes(&self) -> usize {
        SplitName::ALL
            .iter()
            .flat_map(|&s| self.get(s).iter())
            .map(|g| g.y + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        SplitName::ALL
            .iter()
            .flat_map(|&s| self.get(s).iter())
            .map(|g| g.feature_dim)
            .next()
    }

    /// Every train environment must occur at least twice.
    pub fn check_env_learnability(&self) -> Result<()> {
        let mut counts = vec![0usize; self.num_envs()];
        for g in &self.train {
            counts[g.env] += 1;
        }
        if let Some((e, &c)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
            return Err(Error::Validation {
                field: "env",
                msg: format!("train environment {e} occurs {c} time(s); need at least 2"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri(y: usize) -> Graph {
        Graph::new(3, 1, vec![1.0; 3], vec![(0, 1), (1, 2), (2, 0)], y, 0, vec![true, true, false]).unwrap()
    }

    #[test]
    fn batch_offsets_second_graph() {
        let (a, b) = (tri(0), tri(1));
        let batch = Batch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.num_nodes, 6);
        assert_eq!(&batch.src[3..], &[3, 4, 3]);
        assert_eq!(&batch.dst[3..], &[4, 5, 5]);
        assert_eq!(&*batch.node_graph_id, &[0, 0, 0, 1, 1, 1]);
        assert_eq!(batch.unbatch(), vec![a, b]);
    }

    #[test]
    fn mixed_dims_rejected() {
        let a = tri(0);
        let b = Graph::new(1, 2, vec![0.0, 1.0], vec![], 0, 0, vec![]).unwrap();
        assert!(Batch::new(&[&a, &b]).is_err());
        assert!(Batch::new(&[]).is_err());
    }

    #[test]
    fn validation_names_field() {
        let mut g = tri(0);
        g.edges[0] = (0, 7);
        match g.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "edges"),
            other => panic!("unexpected {other:?}"),
        }
        let mut g = tri(0);
        g.motif_mask.pop();
        assert!(matches!(g.validate(), Err(Error::Validation { field: "motif_mask", .. })));
        let mut g = tri(0);
        g.edges[1] = (0, 1);
        assert!(matches!(g.validate(), Err(Error::Validation { field: "edges", .. })));
        let mut g = tri(0);
        g.edge_weight[0] = 1.5;
        assert!(matches!(g.validate(), Err(Error::Validation { field: "edge_weight", .. })));
        assert!(Graph::new(2, 1, vec![1.0; 2], vec![(1, 1)], 0, 0, vec![false]).is_err());
    }

    #[test]
    fn env_learnability() {
        let mut s = DatasetSplit::default();
        s.train = vec![tri(0), tri(1)];
        assert!(s.check_env_learnability().is_ok());
        s.train[1].env = 1;
        assert!(s.check_env_learnability().is_err());
    }
}
