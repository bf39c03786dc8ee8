//! A fully enumerable covariate-shift universe.
//!
//! Two environments pick the base (E=0: a 3-node path, E=1: a triangle), two
//! labels pick the motif (Y=0: a 2-edge path, Y=1: a 3-leaf star), and an
//! attachment edge joins a uniformly chosen base node to the motif's anchor
//! node. E, Y and the attachment choice are independent and uniform, giving
//! 2·2 structural outcomes and 12 outcomes after attachment.
//!
//! Nodes carry fixed names per outcome: base nodes are named by their
//! environment's base (`p0..p2`, `t0..t2`), non-anchor motif nodes by their
//! label's motif (`a1, a2`, `s1..s3`), and the anchor is shared (`x`). A
//! subgraph pattern is then a set of named edges, and "pattern present" is
//! set inclusion on those names.

use serde::Serialize;

/// Named undirected edge.
pub type NamedEdge = (&'static str, &'static str);

#[derive(Clone, Debug, Serialize)]
pub struct MicroOutcome {
    /// Unnormalized probability; all weights share one denominator.
    pub weight: u64,
    pub env: usize,
    pub label: usize,
    /// Edge set as a bitmask over [`MicroUniverse::vocab`].
    pub edges: u32,
    /// Ground-truth causal (motif) edges, a subset of `edges`.
    pub causal: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct MicroUniverse {
    pub vocab: Vec<NamedEdge>,
    pub outcomes: Vec<MicroOutcome>,
    pub num_envs: usize,
    pub num_labels: usize,
}

const BASES: [&[NamedEdge]; 2] = [
    &[("p0", "p1"), ("p1", "p2")],
    &[("t0", "t1"), ("t1", "t2"), ("t0", "t2")],
];
const BASE_NODES: [[&str; 3]; 2] = [["p0", "p1", "p2"], ["t0", "t1", "t2"]];
const MOTIFS: [&[NamedEdge]; 2] = [
    &[("x", "a1"), ("a1", "a2")],
    &[("x", "s1"), ("x", "s2"), ("x", "s3")],
];

impl MicroUniverse {
    pub fn total_weight(&self) -> u64 {
        self.outcomes.iter().map(|o| o.weight).sum()
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.outcomes[i].weight as f64 / self.total_weight() as f64
    }

    pub fn edge_names(&self, mask: u32) -> Vec<String> {
        self.vocab
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, (a, b))| format!("{a}-{b}"))
            .collect()
    }

    /// Distinct (env, label) pairs, ignoring the attachment choice.
    pub fn structural_outcomes(&self) -> usize {
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.outcomes {
            seen.insert((o.env, o.label));
        }
        seen.len()
    }
}

pub fn build_micro_universe() -> MicroUniverse {
    let mut vocab: Vec<NamedEdge> = Vec::new();
    let id = |e: NamedEdge, vocab: &mut Vec<NamedEdge>| -> u32 {
        let pos = match vocab.iter().position(|&v| v == e) {
            Some(p) => p,
            None => {
                vocab.push(e);
                vocab.len() - 1
            }
        };
        1u32 << pos
    };
    let mut outcomes = Vec::new();
    for env in 0..2 {
        for label in 0..2 {
            for attach in BASE_NODES[env] {
                let base: u32 = BASES[env].iter().map(|&e| id(e, &mut vocab)).fold(0, |a, b| a | b);
                let motif: u32 = MOTIFS[label].iter().map(|&e| id(e, &mut vocab)).fold(0, |a, b| a | b);
                let link = id((attach, "x"), &mut vocab);
                outcomes.push(MicroOutcome {
                    weight: 1,
                    env,
                    label,
                    edges: base | motif | link,
                    causal: motif,
                });
            }
        }
    }
    MicroUniverse {
        vocab,
        outcomes,
        num_envs: 2,
        num_labels: 2,
    }
}
