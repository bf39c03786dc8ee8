//! `key = value` run configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key is known in advance; unknown or repeated keys are rejected. A
//! value written as `[a; b; c]` is a sweep axis, only accepted by
//! [`expand_grid`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motif::{BaseKind, FeatureMode, GenConfig, ShiftKind};
use crate::train::{RampShape, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Leci,
    Erm,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "leci" => Ok(Method::Leci),
            "erm" => Ok(Method::Erm),
            _ => Err(Error::config(format!("unknown method {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Leci => "leci",
            Method::Erm => "erm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: GenConfig,
    pub train: TrainConfig,
    /// Methods trained by `train` and `sweep`, in order.
    pub methods: Vec<Method>,
    /// Number of training seeds, `seed, seed + 1, ...`.
    pub seeds: usize,
    /// Epochs for the independence probes run by `eval`.
    pub probe_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: GenConfig::default(),
            train: TrainConfig::default(),
            methods: vec![Method::Leci, Method::Erm],
            seeds: 1,
            probe_epochs: 30,
        }
    }
}

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    /// One value, or several for a sweep axis.
    pub values: Vec<String>,
    pub is_grid: bool,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("{key}: {msg}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got {v:?}"))),
    }
}

fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (lo, hi) = v
        .split_once('-')
        .ok_or_else(|| bad(key, format!("expected lo-hi, got {v:?}")))?;
    Ok((num(key, lo.trim())?, num(key, hi.trim())?))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn fmt_range(r: (usize, usize)) -> String {
    format!("{}-{}", r.0, r.1)
}

fn wrap<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) if !m.starts_with(key) => bad(key, m),
        other => other,
    })
}

impl RunConfig {
    /// Assign one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "data_seed" => d.seed = num(key, v)?,
            "shift" => {
                d.shift = match v {
                    "base" => ShiftKind::Base,
                    "size" => ShiftKind::Size,
                    _ => return Err(bad(key, format!("expected base or size, got {v:?}"))),
                }
            }
            "n_per_class_per_env" => d.n_per_class_per_env = num(key, v)?,
            "n_id_val_per_class" => d.n_id_val_per_class = num(key, v)?,
            "n_ood_per_class" => d.n_ood_per_class = num(key, v)?,
            "train_bases" => d.train_bases = wrap(key, list(v).map(BaseKind::parse).collect())?,
            "oodval_base" => d.oodval_base = wrap(key, BaseKind::parse(v))?,
            "oodtest_base" => d.oodtest_base = wrap(key, BaseKind::parse(v))?,
            "base_size_range" => d.base_size_range = range(key, v)?,
            "size_buckets" => d.size_buckets = list(v).map(|r| range(key, r)).collect::<Result<_>>()?,
            "oodval_size_range" => d.oodval_size_range = range(key, v)?,
            "oodtest_size_range" => d.oodtest_size_range = range(key, v)?,
            "feature_mode" => d.feature_mode = wrap(key, FeatureMode::parse(v))?,
            "color_corr" => d.color_corr = num(key, v)?,
            "noise_edge_prob" => d.noise_edge_prob = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "lambda_e_max" => t.lambda_e_max = num(key, v)?,
            "lambda_l_max" => t.lambda_l_max = num(key, v)?,
            "lambda_pfsc_max" => t.lambda_pfsc_max = num(key, v)?,
            "warmup_epochs" => t.warmup_epochs = num(key, v)?,
            "ramp_shape" => t.ramp_shape = wrap(key, RampShape::parse(v))?,
            "seed" => t.seed = num(key, v)?,
            "num_layers" => t.num_layers = num(key, v)?,
            "hidden_dim" => t.hidden_dim = num(key, v)?,
            "dropout" => t.dropout = num(key, v)?,
            "virtual_node" => t.virtual_node = boolean(key, v)?,
            "batch_norm" => t.batch_norm = boolean(key, v)?,
            "gin_epsilon" => t.gin_epsilon = num(key, v)?,
            "tau" => t.tau = num(key, v)?,
            "use_pfsc" => t.use_pfsc = boolean(key, v)?,
            "info_weight" => t.info_weight = num(key, v)?,
            "info_r" => t.info_r = num(key, v)?,
            "strict_alternation" => t.strict_alternation = boolean(key, v)?,
            "shards" => t.shards = num(key, v)?,
            "eval_batch_size" => t.eval_batch_size = num(key, v)?,
            "methods" => self.methods = wrap(key, list(v).map(Method::parse).collect())?,
            "seeds" => self.seeds = num(key, v)?,
            "probe_epochs" => self.probe_epochs = num(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let join = |v: Vec<String>| v.join(",");
        vec![
            ("data_seed", d.seed.to_string()),
            (
                "shift",
                match d.shift {
                    ShiftKind::Base => "base",
                    ShiftKind::Size => "size",
                }
                .into(),
            ),
            ("n_per_class_per_env", d.n_per_class_per_env.to_string()),
            ("n_id_val_per_class", d.n_id_val_per_class.to_string()),
            ("n_ood_per_class", d.n_ood_per_class.to_string()),
            ("train_bases", join(d.train_bases.iter().map(|b| b.name().to_string()).collect())),
            ("oodval_base", d.oodval_base.name().into()),
            ("oodtest_base", d.oodtest_base.name().into()),
            ("base_size_range", fmt_range(d.base_size_range)),
            ("size_buckets", join(d.size_buckets.iter().map(|&r| fmt_range(r)).collect())),
            ("oodval_size_range", fmt_range(d.oodval_size_range)),
            ("oodtest_size_range", fmt_range(d.oodtest_size_range)),
            ("feature_mode", d.feature_mode.name().into()),
            ("color_corr", d.color_corr.to_string()),
            ("noise_edge_prob", d.noise_edge_prob.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("lambda_e_max", t.lambda_e_max.to_string()),
            ("lambda_l_max", t.lambda_l_max.to_string()),
            ("lambda_pfsc_max", t.lambda_pfsc_max.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("ramp_shape", t.ramp_shape.name().into()),
            ("seed", t.seed.to_string()),
            ("num_layers", t.num_layers.to_string()),
            ("hidden_dim", t.hidden_dim.to_string()),
            ("dropout", t.dropout.to_string()),
            ("virtual_node", t.virtual_node.to_string()),
            ("batch_norm", t.batch_norm.to_string()),
            ("gin_epsilon", t.gin_epsilon.to_string()),
            ("tau", t.tau.to_string()),
            ("use_pfsc", t.use_pfsc.to_string()),
            ("info_weight", t.info_weight.to_string()),
            ("info_r", t.info_r.to_string()),
            ("strict_alternation", t.strict_alternation.to_string()),
            ("shards", t.shards.to_string()),
            ("eval_batch_size", t.eval_batch_size.to_string()),
            ("methods", join(self.methods.iter().map(|m| m.name().to_string()).collect())),
            ("seeds", self.seeds.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// The fully resolved configuration in the input syntax.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(bad("methods", "at least one method is required"));
        }
        if self.seeds == 0 {
            return Err(bad("seeds", "must be positive"));
        }
        Ok(())
    }

    /// Parse a configuration without sweep axes, starting from defaults.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for e in parse_entries(text)? {
            if e.is_grid {
                return Err(Error::config(format!(
                    "line {}: `{}` is a sweep list; use the sweep command",
                    e.line, e.key
                )));
            }
            cfg.set(&e.key, &e.values[0])?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
        RunConfig::from_text(&read(path)?)
    }
}

fn read(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Split configuration text into entries, rejecting malformed lines,
/// unknown keys and repeated keys.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let known = RunConfig::keys();
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key = value, got {content:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !known.contains(&key) {
            return Err(Error::config(format!("line {line}: unknown key `{key}`")));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::config(format!("line {line}: key `{key}` given twice")));
        }
        let (values, is_grid) = match value.strip_prefix('[') {
            Some(rest) => {
                let inner = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("unterminated list for `{key}`"),
                })?;
                let vals: Vec<String> = inner.split(';').map(|s| s.trim().to_string()).collect();
                if vals.iter().any(String::is_empty) {
                    return Err(Error::config(format!("line {line}: empty value in the `{key}` list")));
                }
                (vals, true)
            }
            None => (vec![value.to_string()], false),
        };
        if values[0].is_empty() {
            return Err(Error::config(format!("line {line}: `{key}` has no value")));
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            values,
            is_grid,
        });
    }
    Ok(out)
}

/// One point of a sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    /// The swept keys and their values at this point.
    pub assignment: Vec<(String, String)>,
    pub config: RunConfig,
}

/// Expand every sweep axis into the full Cartesian grid (first axis slowest).
pub fn expand_grid(text: &str) -> Result<Vec<GridPoint>> {
    let entries = parse_entries(text)?;
    let mut base = RunConfig::default();
    let mut axes = Vec::new();
    for e in entries {
        if e.is_grid {
            axes.push(e);
        } else {
            base.set(&e.key, &e.values[0])?;
        }
    }
    let mut points = vec![GridPoint {
        assignment: Vec::new(),
        config: base,
    }];
    for axis in &axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for v in &axis.values {
                let mut q = p.clone();
                q.config.set(&axis.key, v)?;
                q.assignment.push((axis.key.clone(), v.clone()));
                next.push(q);
            }
        }
        points = next;
    }
    for p in &points {
        p.config.validate()?;
    }
    Ok(points)
}

pub fn expand_grid_file(path: impl AsRef<std::path::Path>) -> Result<Vec<GridPoint>> {
    expand_grid(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips() {
        let text = "epochs = 7 # short\nwarmup_epochs = 2\nshift = size\nlambda_e_max=2.5\n";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.data.shift, ShiftKind::Size);
        assert_eq!(RunConfig::from_text(&cfg.resolved()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        let e = RunConfig::from_text("epochz = 3").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("epochz")));
        assert!(RunConfig::from_text("lr = 1\nlr = 2").is_err());
        assert!(RunConfig::from_text("lr 1").is_err());
        let e = RunConfig::from_text("dropout = lots").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.starts_with("dropout")));
    }

    #[test]
    fn invalid_values_name_the_key() {
        let e = RunConfig::from_text("epochs = 10\nwarmup_epochs = 10").unwrap_err();
        assert!(e.to_string().contains("warmup_epochs"));
    }

    #[test]
    fn grid_expansion() {
        let g = expand_grid("epochs = 5\nwarmup_epochs = 1\nlambda_e_max = [1; 2; 3]\nuse_pfsc = [true; false]").unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[1].assignment[1], ("use_pfsc".to_string(), "false".to_string()));
        assert_eq!(g[5].config.train.lambda_e_max, 3.0);
        assert!(RunConfig::from_text("lr = [1; 2]").is_err());
    }
}
