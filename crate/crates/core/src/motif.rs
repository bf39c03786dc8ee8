//! Synthetic base-plus-motif graph datasets.
//!
//! Each graph joins a label-irrelevant *base* graph to a label-determining
//! *motif* with one attachment edge. The label is the motif; the
//! environment is the base family (base split) or a base-size bucket (size
//! split), so the environment only shapes the spurious part of the graph.
//!
//! Motif shapes (node ids local to the motif):
//!
//! ```text
//! house:  0-1, 1-2, 2-3, 3-0  (square)   + 4-0, 4-1 (roof apex on the 0-1 side)
//! cycle:  0-1, 1-2, 2-3, 3-4, 4-0
//! crane:  0-1, 1-2, 2-0       (triangle) + 0-3, 1-4 (two pendant legs)
//! ```
//!
//! The attachment edge joins a uniformly chosen base node to a uniformly
//! chosen motif node and is marked as neither motif nor base.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{DatasetSplit, Graph, SplitName};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    House,
    Cycle,
    Crane,
}

impl MotifKind {
    /// Label order: house = 0, cycle = 1, crane = 2.
    pub const ALL: [MotifKind; 3] = [MotifKind::House, MotifKind::Cycle, MotifKind::Crane];

    pub fn name(self) -> &'static str {
        match self {
            MotifKind::House => "house",
            MotifKind::Cycle => "cycle",
            MotifKind::Crane => "crane",
        }
    }

    pub fn parse(s: &str) -> Result<MotifKind> {
        MotifKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown motif kind {s:?}")))
    }

    pub fn label(self) -> usize {
        MotifKind::ALL.iter().position(|&m| m == self).unwrap()
    }
}

/// Node count and edge list of a motif.
pub fn make_motif(kind: MotifKind) -> (usize, Vec<(usize, usize)>) {
    match kind {
        MotifKind::House => (5, vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4)]),
        MotifKind::Cycle => (5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]),
        MotifKind::Crane => (5, vec![(0, 1), (1, 2), (0, 2), (0, 3), (1, 4)]),
    }
}

/// Look up a motif by name; unknown names are configuration errors.
pub fn make_motif_named(name: &str) -> Result<(usize, Vec<(usize, usize)>)> {
    Ok(make_motif(MotifKind::parse(name)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Wheel,
    Tree,
    Ladder,
    Star,
    Path,
    DorogovtsevMendes,
    CircularLadder,
}

impl BaseKind {
    pub const ALL: [BaseKind; 7] = [
        BaseKind::Wheel,
        BaseKind::Tree,
        BaseKind::Ladder,
        BaseKind::Star,
        BaseKind::Path,
        BaseKind::DorogovtsevMendes,
        BaseKind::CircularLadder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Wheel => "wheel",
            BaseKind::Tree => "tree",
            BaseKind::Ladder => "ladder",
            BaseKind::Star => "star",
            BaseKind::Path => "path",
            BaseKind::DorogovtsevMendes => "dorogovtsev_mendes",
            BaseKind::CircularLadder => "circular_ladder",
        }
    }

    pub fn parse(s: &str) -> Result<BaseKind> {
        BaseKind::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::config(format!("unknown base kind {s:?}")))
    }

    pub fn min_nodes(self) -> usize {
        match self {
            BaseKind::Wheel => 4,
            BaseKind::Tree => 3,
            BaseKind::Ladder => 4,
            BaseKind::Star => 3,
            BaseKind::Path => 2,
            BaseKind::DorogovtsevMendes => 3,
            BaseKind::CircularLadder => 6,
        }
    }

    pub fn needs_even(self) -> bool {
        matches!(self, BaseKind::Ladder | BaseKind::CircularLadder)
    }

    /// Closest valid size not above `n` (or the minimum).
    fn fit_size(self, n: usize) -> usize {
        let mut n = n.max(self.min_nodes());
        if self.needs_even() && n % 2 == 1 {
            n = if n > self.min_nodes() { n - 1 } else { n + 1 };
        }
        n
    }
}

/// Edge list of a connected base graph with `n` nodes.
pub fn make_base(kind: BaseKind, n: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if n < kind.min_nodes() {
        return Err(Error::config(format!(
            "{} needs at least {} nodes, got {n}",
            kind.name(),
            kind.min_nodes()
        )));
    }
    if kind.needs_even() && n % 2 == 1 {
        return Err(Error::config(format!("{} needs an even node count, got {n}", kind.name())));
    }
    let edges = match kind {
        BaseKind::Wheel => {
            let mut e: Vec<_> = (1..n).map(|i| (0, i)).collect();
            e.extend((1..n - 1).map(|i| (i, i + 1)));
            e.push((1, n - 1));
            e
        }
        // Complete binary tree in heap order.
        BaseKind::Tree => (1..n).map(|i| ((i - 1) / 2, i)).collect(),
        BaseKind::Ladder => {
            let h = n / 2;
            let mut e: Vec<_> = (0..h - 1).map(|i| (i, i + 1)).collect();
            e.extend((0..h - 1).map(|i| (h + i, h + i + 1)));
            e.extend((0..h).map(|i| (i, h + i)));
            e
        }
        BaseKind::CircularLadder => {
            let h = n / 2;
            let mut e: Vec<_> = (0..h).map(|i| (i, (i + 1) % h)).collect();
            e.extend((0..h).map(|i| (h + i, h + (i + 1) % h)));
            e.extend((0..h).map(|i| (i, h + i)));
            e
        }
        BaseKind::Star => (1..n).map(|i| (0, i)).collect(),
        BaseKind::Path => (0..n - 1).map(|i| (i, i + 1)).collect(),
        BaseKind::DorogovtsevMendes => {
            let mut e = vec![(0, 1), (1, 2), (0, 2)];
            for v in 3..n {
                let (a, b) = e[rng.below(e.len())];
                e.push((a, v));
                e.push((b, v));
            }
            e
        }
    };
    Ok(edges.into_iter().map(|(u, v)| (u.min(v), u.max(v))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// A single constant 1 per node.
    Constant,
    /// One-hot node degree, capped at [`DEGREE_CAP`].
    DegreeOnehot,
    /// Constant 1 followed by a one-hot colour block: train and id_val graphs
    /// take the colour of their environment (with probability `color_corr`),
    /// OOD graphs take a colour never seen in training.
    EnvColor,
}

pub const DEGREE_CAP: usize = 9;

impl FeatureMode {
    pub fn parse(s: &str) -> Result<FeatureMode> {
        match s {
            "constant" => Ok(FeatureMode::Constant),
            "degree_onehot" => Ok(FeatureMode::DegreeOnehot),
            "env_color" => Ok(FeatureMode::EnvColor),
            _ => Err(Error::config(format!("unknown feature mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Constant => "constant",
            FeatureMode::DegreeOnehot => "degree_onehot",
            FeatureMode::EnvColor => "env_color",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Environments are base families.
    Base,
    /// Environments are base-size buckets.
    Size,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub shift: ShiftKind,
    /// Train graphs per (class, environment).
    pub n_per_class_per_env: usize,
    /// id_val graphs per class, environments assigned round-robin.
    pub n_id_val_per_class: usize,
    /// ood_val and ood_test graphs per class.
    pub n_ood_per_class: usize,
    pub train_bases: Vec<BaseKind>,
    pub oodval_base: BaseKind,
    pub oodtest_base: BaseKind,
    /// Inclusive base size range for the base split.
    pub base_size_range: (usize, usize),
    /// Inclusive train size buckets for the size split; one environment each.
    pub size_buckets: Vec<(usize, usize)>,
    pub oodval_size_range: (usize, usize),
    pub oodtest_size_range: (usize, usize),
    pub feature_mode: FeatureMode,
    /// Probability that an env_color graph carries its environment's colour.
    pub color_corr: f64,
    /// Per base node, probability of one extra random edge inside the base.
    pub noise_edge_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            shift: ShiftKind::Base,
            n_per_class_per_env: 200,
            n_id_val_per_class: 100,
            n_ood_per_class: 100,
            train_bases: vec![BaseKind::Wheel, BaseKind::Tree, BaseKind::Ladder],
            oodval_base: BaseKind::Star,
            oodtest_base: BaseKind::Path,
            base_size_range: (10, 20),
            size_buckets: vec![(6, 9), (10, 13), (14, 17)],
            oodval_size_range: (18, 22),
            oodtest_size_range: (23, 30),
            feature_mode: FeatureMode::Constant,
            color_corr: 1.0,
            noise_edge_prob: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo <= hi;
        if self.n_per_class_per_env == 0 {
            return Err(Error::config("n_per_class_per_env must be positive"));
        }
        if !(0.0..1.0).contains(&self.noise_edge_prob) {
            return Err(Error::config("noise_edge_prob must lie in [0,1)"));
        }
        if !(0.0..=1.0).contains(&self.color_corr) {
            return Err(Error::config("color_corr must lie in [0,1]"));
        }
        match self.shift {
            ShiftKind::Base => {
                if self.train_bases.len() < 2 {
                    return Err(Error::config("train_bases needs at least two base kinds"));
                }
                let mut seen = std::collections::HashSet::new();
                if !self.train_bases.iter().all(|b| seen.insert(*b)) {
                    return Err(Error::config("train_bases lists a kind twice"));
                }
                if self.train_bases.contains(&self.oodtest_base) {
                    return Err(Error::config("oodtest_base must differ from every train base"));
                }
                if !range_ok(self.base_size_range) {
                    return Err(Error::config("base_size_range is empty"));
                }
            }
            ShiftKind::Size => {
                if self.size_buckets.len() < 2 {
                    return Err(Error::config("size_buckets needs at least two buckets"));
                }
                if self.train_bases.is_empty() {
                    return Err(Error::config("train_bases is empty"));
                }
                let all = self
                    .size_buckets
                    .iter()
                    .chain([&self.oodval_size_range, &self.oodtest_size_range]);
                for r in all {
                    if !range_ok(*r) {
                        return Err(Error::config("size_buckets contains an empty range"));
                    }
                }
                let max_train = self.size_buckets.iter().map(|r| r.1).max().unwrap();
                if max_train >= self.oodtest_size_range.0 {
                    return Err(Error::config(
                        "oodtest_size_range must start above every train bucket",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_envs(&self) -> usize {
        match self.shift {
            ShiftKind::Base => self.train_bases.len(),
            ShiftKind::Size => self.size_buckets.len(),
        }
    }

    /// Human-readable names of the environment ids.
    pub fn env_names(&self) -> Vec<String> {
        match self.shift {
            ShiftKind::Base => self.train_bases.iter().map(|b| b.name().to_string()).collect(),
            ShiftKind::Size => self
                .size_buckets
                .iter()
                .map(|(lo, hi)| format!("size_{lo}_{hi}"))
                .collect(),
        }
    }

    pub fn variant(&self) -> &'static str {
        if self.shift == ShiftKind::Base && self.oodtest_base == BaseKind::DorogovtsevMendes {
            "motif2"
        } else {
            "motif"
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.feature_mode {
            FeatureMode::Constant => 1,
            FeatureMode::DegreeOnehot => DEGREE_CAP + 1,
            FeatureMode::EnvColor => 1 + self.num_envs() + 1,
        }
    }
}

/// What one graph should look like before any randomness is drawn.
#[derive(Clone, Copy, Debug)]
struct GraphSpec {
    motif: MotifKind,
    env: usize,
    base: BaseKind,
    size_range: (usize, usize),
    /// Colour index for env_color features.
    color: usize,
    ood: bool,
}

fn split_specs(cfg: &GenConfig, split: SplitName) -> Vec<GraphSpec> {
    let envs = cfg.num_envs();
    let env_spec = |env: usize| -> (BaseKind, (usize, usize)) {
        match cfg.shift {
            ShiftKind::Base => (cfg.train_bases[env], cfg.base_size_range),
            ShiftKind::Size => (cfg.train_bases[0], cfg.size_buckets[env]),
        }
    };
    let mut specs = Vec::new();
    match split {
        SplitName::Train => {
            for env in 0..envs {
                for motif in MotifKind::ALL {
                    for _ in 0..cfg.n_per_class_per_env {
                        let (base, size_range) = env_spec(env);
                        specs.push(GraphSpec { motif, env, base, size_range, color: env, ood: false });
                    }
                }
            }
        }
        SplitName::IdVal => {
            for motif in MotifKind::ALL {
                for i in 0..cfg.n_id_val_per_class {
                    let env = i % envs;
                    let (base, size_range) = env_spec(env);
                    specs.push(GraphSpec { motif, env, base, size_range, color: env, ood: false });
                }
            }
        }
        SplitName::OodVal | SplitName::OodTest => {
            let test = split == SplitName::OodTest;
            // Environment ids are dense per split; the manifest names them.
            let env = 0;
            let (base, size_range) = match cfg.shift {
                ShiftKind::Base => (
                    if test { cfg.oodtest_base } else { cfg.oodval_base },
                    cfg.base_size_range,
                ),
                ShiftKind::Size => (
                    cfg.train_bases[0],
                    if test { cfg.oodtest_size_range } else { cfg.oodval_size_range },
                ),
            };
            for motif in MotifKind::ALL {
                for _ in 0..cfg.n_ood_per_class {
                    specs.push(GraphSpec { motif, env, base, size_range, color: envs, ood: true });
                }
            }
        }
    }
    specs
}

fn build_graph(cfg: &GenConfig, spec: &GraphSpec, rng: &mut Rng) -> Result<Graph> {
    let base = match cfg.shift {
        ShiftKind::Base => spec.base,
        // Size split mixes base families uniformly inside each bucket.
        ShiftKind::Size => cfg.train_bases[rng.below(cfg.train_bases.len())],
    };
    let raw = rng.range_inclusive(spec.size_range.0, spec.size_range.1);
    let n_base = base.fit_size(raw);
    let mut edges = make_base(base, n_base, rng)?;
    if cfg.noise_edge_prob > 0.0 && n_base > 2 {
        let mut present: std::collections::HashSet<(usize, usize)> = edges.iter().cloned().collect();
        for u in 0..n_base {
            if rng.bernoulli(cfg.noise_edge_prob) {
                let v = rng.below(n_base);
                let e = (u.min(v), u.max(v));
                if u != v && present.insert(e) {
                    edges.push(e);
                }
            }
        }
    }
    let n_base_edges = edges.len();
    let (n_motif, motif_edges) = make_motif(spec.motif);
    edges.extend(motif_edges.iter().map(|&(u, v)| (u + n_base, v + n_base)));
    let anchor_base = rng.below(n_base);
    let anchor_motif = n_base + rng.below(n_motif);
    edges.push((anchor_base, anchor_motif));
    let mut motif_mask = vec![false; edges.len()];
    for m in &mut motif_mask[n_base_edges..n_base_edges + motif_edges.len()] {
        *m = true;
    }
    let num_nodes = n_base + n_motif;
    let dim = cfg.feature_dim();
    let mut x = vec![0.0; num_nodes * dim];
    match cfg.feature_mode {
        FeatureMode::Constant => x.iter_mut().for_each(|v| *v = 1.0),
        FeatureMode::DegreeOnehot => {
            let mut deg = vec![0usize; num_nodes];
            for &(u, v) in &edges {
                deg[u] += 1;
                deg[v] += 1;
            }
            for (i, d) in deg.into_iter().enumerate() {
                x[i * dim + d.min(DEGREE_CAP)] = 1.0;
            }
        }
        FeatureMode::EnvColor => {
            let envs = cfg.num_envs();
            let color = if spec.ood || rng.bernoulli(cfg.color_corr) {
                spec.color
            } else {
                rng.below(envs)
            };
            for i in 0..num_nodes {
                x[i * dim] = 1.0;
                x[i * dim + 1 + color] = 1.0;
            }
        }
    }
    Graph::new(num_nodes, dim, x, edges, spec.motif.label(), spec.env, motif_mask)
}

fn split_index(split: SplitName) -> u64 {
    SplitName::ALL.iter().position(|&s| s == split).unwrap() as u64
}

/// Generate all four splits. Each graph draws from its own stream forked
/// from the master seed by (split, index), so the output is a pure function
/// of the config whatever the execution mode.
pub fn generate_with(cfg: &GenConfig, exec: Exec) -> Result<DatasetSplit> {
    cfg.validate()?;
    let master = Rng::new(cfg.seed);
    let mut out = DatasetSplit::default();
    for split in SplitName::ALL {
        let specs = split_specs(cfg, split);
        let split_rng = master.fork(split_index(split));
        let graphs = exec.try_map(specs.len(), |i| {
            let mut rng = split_rng.fork(i as u64);
            build_graph(cfg, &specs[i], &mut rng)
        })?;
        *out.get_mut(split) = graphs;
    }
    Ok(out)
}

pub fn generate(cfg: &GenConfig) -> Result<DatasetSplit> {
    generate_with(cfg, Exec::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub variant: String,
    pub config: GenConfig,
    /// Environment id → name, for the training environments.
    pub envs: Vec<String>,
    pub ood_val_env: String,
    pub ood_test_env: String,
    pub classes: Vec<String>,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub feature_dim: usize,
}

impl Manifest {
    pub fn new(cfg: &GenConfig, split: &DatasetSplit) -> Manifest {
        let (val, test) = match cfg.shift {
            ShiftKind::Base => (cfg.oodval_base.name().to_string(), cfg.oodtest_base.name().to_string()),
            ShiftKind::Size => (
                format!("size_{}_{}", cfg.oodval_size_range.0, cfg.oodval_size_range.1),
                format!("size_{}_{}", cfg.oodtest_size_range.0, cfg.oodtest_size_range.1),
            ),
        };
        Manifest {
            format: "leci-manifest/1".into(),
            variant: cfg.variant().into(),
            config: cfg.clone(),
            envs: cfg.env_names(),
            ood_val_env: val,
            ood_test_env: test,
            classes: MotifKind::ALL.iter().map(|m| m.name().to_string()).collect(),
            counts: SplitName::ALL
                .iter()
                .map(|&s| (s.as_str().to_string(), split.get(s).len()))
                .collect(),
            feature_dim: cfg.feature_dim(),
        }
    }
}
