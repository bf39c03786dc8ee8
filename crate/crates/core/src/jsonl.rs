//! Line-delimited JSON graph files.
//!
//! The first line is the header object `{"format":"leci-graphs","version":1}`.
//! Every following line is one graph with the keys `num_nodes`, `edges`, `x`,
//! `y`, `env`, `motif_mask`, `split`, always in that order. `x` is the flat
//! row-major feature matrix and every float is written with 17 significant
//! digits, so a save/load/save cycle is byte-identical. Edge weights are not
//! stored; files hold unit-weight graphs only.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, Graph, SplitName};

pub const HEADER: &str = r#"{"format":"leci-graphs","version":1}"#;

/// Shortest form that still carries 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn graph_line(g: &Graph, split: SplitName) -> String {
    let mut s = String::with_capacity(64 + g.edges.len() * 8 + g.x.len() * 24);
    let _ = write!(s, r#"{{"num_nodes":{},"edges":["#, g.num_nodes);
    for (i, (u, v)) in g.edges.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "[{u},{v}]");
    }
    s.push_str(r#"],"x":["#);
    for (i, v) in g.x.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(*v));
    }
    let _ = write!(s, r#"],"y":{},"env":{},"motif_mask":["#, g.y, g.env);
    for (i, m) in g.motif_mask.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(if *m { "true" } else { "false" });
    }
    let _ = write!(s, r#"],"split":"{}"}}"#, split.as_str());
    s
}

/// Serialize graphs to the line format, header included.
pub fn to_string<'a>(graphs: impl IntoIterator<Item = (SplitName, &'a Graph)>) -> Result<String> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for (split, g) in graphs {
        if g.edge_weight.iter().any(|&w| w != 1.0) {
            return Err(Error::Contract(
                "graph files store unit edge weights only".into(),
            ));
        }
        out.push_str(&graph_line(g, split));
        out.push('\n');
    }
    Ok(out)
}

pub fn split_to_string(split: &DatasetSplit) -> Result<String> {
    to_string(
        SplitName::ALL
            .iter()
            .flat_map(|&name| split.get(name).iter().map(move |g| (name, g))),
    )
}

pub fn save_jsonl(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = split_to_string(split)?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    x: Vec<f64>,
    y: usize,
    env: usize,
    motif_mask: Vec<bool>,
    split: String,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn parse_record(line: &str, lineno: usize) -> Result<(SplitName, Graph)> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    let split = SplitName::parse(&rec.split).ok_or_else(|| Error::Validation {
        field: "split",
        msg: format!("line {lineno}: unknown split {:?}", rec.split),
    })?;
    if rec.num_nodes == 0 || rec.x.is_empty() || rec.x.len() % rec.num_nodes != 0 {
        return Err(Error::Validation {
            field: "x",
            msg: format!(
                "line {lineno}: {} feature values do not tile {} nodes",
                rec.x.len(),
                rec.num_nodes
            ),
        });
    }
    let g = Graph {
        num_nodes: rec.num_nodes,
        feature_dim: rec.x.len() / rec.num_nodes,
        x: rec.x,
        edge_weight: vec![1.0; rec.edges.len()],
        edges: rec.edges,
        y: rec.y,
        env: rec.env,
        motif_mask: rec.motif_mask,
    };
    g.validate().map_err(|e| match e {
        Error::Validation { field, msg } => Error::Validation {
            field,
            msg: format!("line {lineno}: {msg}"),
        },
        other => other,
    })?;
    Ok((split, g))
}

pub fn from_reader(reader: impl BufRead) -> Result<DatasetSplit> {
    let mut out = DatasetSplit::default();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let h: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad header: {e}"),
            })?;
            if h.format != "leci-graphs" || h.version != 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unsupported format {:?} version {}", h.format, h.version),
                });
            }
            saw_header = true;
            continue;
        }
        let (split, g) = parse_record(&line, lineno)?;
        out.get_mut(split).push(g);
    }
    if !saw_header {
        return Err(Error::Parse {
            line: 1,
            msg: "missing header line".into(),
        });
    }
    Ok(out)
}

pub fn from_str(text: &str) -> Result<DatasetSplit> {
    from_reader(text.as_bytes())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    from_reader(BufReader::new(f))
}

/// Write one file per split (`train.jsonl`, `id_val.jsonl`, ...) into `dir`.
pub fn save_dir(split: &DatasetSplit, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in SplitName::ALL {
        let path = dir.join(format!("{}.jsonl", name.as_str()));
        let text = to_string(split.get(name).iter().map(|g| (name, g)))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read the per-split files written by [`save_dir`].
pub fn load_dir(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let mut out = DatasetSplit::default();
    for name in SplitName::ALL {
        let part = load_jsonl(dir.join(format!("{}.jsonl", name.as_str())))?;
        for other in SplitName::ALL {
            out.get_mut(other).extend(part.get(other).iter().cloned());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetSplit {
        let g = Graph::new(
            3,
            2,
            vec![1.0, 0.1, -2.5, 1e-300, 0.3333333333333333, 7.0],
            vec![(0, 1), (1, 2)],
            2,
            1,
            vec![true, false],
        )
        .unwrap();
        DatasetSplit {
            train: vec![g.clone(), g.clone()],
            id_val: vec![],
            ood_val: vec![g.clone()],
            ood_test: vec![g],
        }
    }

    #[test]
    fn empty_split_is_header_only() {
        let text = split_to_string(&DatasetSplit::default()).unwrap();
        assert_eq!(text, format!("{HEADER}\n"));
        assert!(from_str(&text).unwrap().is_empty());
    }

    #[test]
    fn round_trip_exact_and_stable() {
        let s = sample();
        let text = split_to_string(&s).unwrap();
        let back = from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(split_to_string(&back).unwrap(), text);
    }

    #[test]
    fn bad_endpoint_names_edges() {
        let line = r#"{"num_nodes":2,"edges":[[0,5]],"x":[1.0,1.0],"y":0,"env":0,"motif_mask":[false],"split":"train"}"#;
        let text = format!("{HEADER}\n{line}\n");
        match from_str(&text) {
            Err(Error::Validation { field, msg }) => {
                assert_eq!(field, "edges");
                assert!(msg.contains("line 2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = format!("{HEADER}\n{{\"num_nodes\": 3,\n");
        match from_str(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn float_format_has_17_digits() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
