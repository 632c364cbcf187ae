//! Dataset bundles on disk.
//!
//! Edge-list bundle (a directory, UTF-8, whitespace separated):
//!
//! | file | content |
//! |------|---------|
//! | `features.csv` | one row of comma-separated reals per node |
//! | `edges.txt` | `src dst` per line; reversed and repeated lines collapse |
//! | `labels.txt` | one class id per node line; `-1` or `?` marks unlabeled |
//! | `meta.txt` | optional `key value` lines; `num_classes` is honored |
//! | `train.idx`, `val.idx`, `test.idx` | optional node ids, one per line |
//!
//! JSON bundle: one object with `features`, `edges`, `labels` (null for
//! unlabeled), optional `num_classes`, `train`, `val`, `test`.
//!
//! LINQS bundle: a directory holding `<name>.content` (`id f1 .. fd label`)
//! and `<name>.cites` (`cited citing`), as distributed for Cora and Citeseer.
//! Citations to unknown ids are skipped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use freekd_tensor::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    EdgeList,
    Json,
    Linqs,
}

impl FromStr for DatasetFormat {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edgelist" | "edge-list" => Ok(DatasetFormat::EdgeList),
            "json" => Ok(DatasetFormat::Json),
            "linqs" => Ok(DatasetFormat::Linqs),
            other => Err(CoreError::Contract(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl DatasetFormat {
    /// Guesses from the path: `.json` files, directories with a `.content` file, or edge-list directories.
    pub fn detect(path: &Path) -> DatasetFormat {
        if path.extension().is_some_and(|e| e == "json") {
            return DatasetFormat::Json;
        }
        if find_with_extension(path, "content").is_some() {
            DatasetFormat::Linqs
        } else {
            DatasetFormat::EdgeList
        }
    }
}

fn find_with_extension(dir: &Path, ext: &str) -> Option<PathBuf> {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    hits.sort();
    hits.into_iter().next()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CoreError {
    CoreError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-empty lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_num<T: FromStr>(path: &Path, line: usize, token: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse `{token}`")))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Graph> {
    match format {
        DatasetFormat::EdgeList => load_edge_list(path),
        DatasetFormat::Json => load_json(path),
        DatasetFormat::Linqs => load_linqs(path),
    }
}

fn load_edge_list(dir: &Path) -> Result<Graph> {
    let fpath = dir.join("features.csv");
    let mut rows = Vec::new();
    for (line, text) in content_lines(&read(&fpath)?) {
        let row = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| parse_num::<f64>(&fpath, line, t))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if row.len() != first.len() {
                return Err(parse_err(
                    &fpath,
                    line,
                    format!("{} features, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let features = Matrix::from_rows(&rows)?;
    let n = features.rows();

    let epath = dir.join("edges.txt");
    let mut edges = Vec::new();
    for (line, text) in content_lines(&read(&epath)?) {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(parse_err(&epath, line, "expected `src dst`"));
        }
        edges.push((parse_num(&epath, line, tokens[0])?, parse_num(&epath, line, tokens[1])?));
    }

    let lpath = dir.join("labels.txt");
    let mut labels = Vec::with_capacity(n);
    for (line, text) in content_lines(&read(&lpath)?) {
        labels.push(match text {
            "?" | "-1" => None,
            t => Some(parse_num::<usize>(&lpath, line, t)?),
        });
    }

    let mut num_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mpath = dir.join("meta.txt");
    if mpath.exists() {
        for (line, text) in content_lines(&read(&mpath)?) {
            let mut kv = text.split_whitespace();
            if let (Some("num_classes"), Some(v)) = (kv.next(), kv.next()) {
                num_classes = parse_num(&mpath, line, v)?;
            }
        }
    }

    let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
    for (slot, name) in ["train.idx", "val.idx", "test.idx"].iter().enumerate() {
        let ipath = dir.join(name);
        if !ipath.exists() {
            continue;
        }
        for (line, text) in content_lines(&read(&ipath)?) {
            let id: usize = parse_num(&ipath, line, text)?;
            if id >= n {
                return Err(CoreError::Validation(format!("{name}: node {id} outside 0..{n}")));
            }
            masks[slot][id] = true;
        }
    }
    Graph::new(features, &edges, labels, num_classes, masks)
}

#[derive(Serialize, Deserialize)]
struct JsonBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    labels: Vec<Option<usize>>,
    #[serde(default)]
    train: Vec<usize>,
    #[serde(default)]
    val: Vec<usize>,
    #[serde(default)]
    test: Vec<usize>,
}

fn load_json(path: &Path) -> Result<Graph> {
    let bundle: JsonBundle = serde_json::from_str(&read(path)?)?;
    let features = Matrix::from_rows(&bundle.features)?;
    let n = features.rows();
    let num_classes = bundle
        .num_classes
        .unwrap_or_else(|| bundle.labels.iter().flatten().max().map_or(0, |m| m + 1));
    let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
    for (slot, ids) in [&bundle.train, &bundle.val, &bundle.test].iter().enumerate() {
        for &id in ids.iter() {
            if id >= n {
                return Err(CoreError::Validation(format!("split node {id} outside 0..{n}")));
            }
            masks[slot][id] = true;
        }
    }
    let edges: Vec<(usize, usize)> = bundle.edges.iter().map(|e| (e[0], e[1])).collect();
    Graph::new(features, &edges, bundle.labels, num_classes, masks)
}

fn load_linqs(dir: &Path) -> Result<Graph> {
    let cpath = find_with_extension(dir, "content")
        .ok_or_else(|| CoreError::Validation(format!("no .content file in {}", dir.display())))?;
    let spath = find_with_extension(dir, "cites")
        .ok_or_else(|| CoreError::Validation(format!("no .cites file in {}", dir.display())))?;
    let mut ids = HashMap::new();
    let mut rows = Vec::new();
    let mut label_names = Vec::new();
    for (line, text) in content_lines(&read(&cpath)?) {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(parse_err(&cpath, line, "expected `id features.. label`"));
        }
        let row = tokens[1..tokens.len() - 1]
            .iter()
            .map(|t| parse_num::<f64>(&cpath, line, t))
            .collect::<Result<Vec<_>>>()?;
        if ids.insert(tokens[0].to_string(), rows.len()).is_some() {
            return Err(parse_err(&cpath, line, format!("duplicate id `{}`", tokens[0])));
        }
        rows.push(row);
        label_names.push(tokens[tokens.len() - 1].to_string());
    }
    let features = Matrix::from_rows(&rows)?;
    let mut classes: Vec<&String> = label_names.iter().collect();
    classes.sort();
    classes.dedup();
    let labels = label_names
        .iter()
        .map(|l| classes.binary_search(&l).ok())
        .collect::<Vec<_>>();
    let mut edges = Vec::new();
    for (line, text) in content_lines(&read(&spath)?) {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(parse_err(&spath, line, "expected `cited citing`"));
        }
        if let (Some(&a), Some(&b)) = (ids.get(tokens[0]), ids.get(tokens[1])) {
            edges.push((a, b));
        }
    }
    let n = features.rows();
    Graph::new(
        features,
        &edges,
        labels,
        classes.len(),
        [vec![false; n], vec![false; n], vec![false; n]],
    )
}

/// Writes an edge-list bundle that [`load_dataset`] reads back to an equal graph.
pub fn save_edge_list(graph: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let write = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| CoreError::io(p, e))
    };
    let mut body = String::new();
    for r in 0..graph.num_nodes() {
        let row: Vec<String> = graph.features().row(r).iter().map(|v| format!("{v:?}")).collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    write("features.csv", body)?;
    let mut body = String::new();
    for (u, v) in graph.edges() {
        let _ = writeln!(body, "{u} {v}");
    }
    write("edges.txt", body)?;
    let mut body = String::new();
    for l in graph.labels() {
        match l {
            Some(c) => {
                let _ = writeln!(body, "{c}");
            }
            None => body.push_str("-1\n"),
        }
    }
    write("labels.txt", body)?;
    write("meta.txt", format!("num_classes {}\n", graph.num_classes()))?;
    if graph.has_splits() {
        for (name, split) in [("train.idx", Split::Train), ("val.idx", Split::Val), ("test.idx", Split::Test)] {
            let body: String = graph.nodes_in(split).iter().map(|i| format!("{i}\n")).collect();
            write(name, body)?;
        }
    }
    Ok(())
}

pub fn save_json(graph: &Graph, path: &Path) -> Result<()> {
    let bundle = JsonBundle {
        num_classes: Some(graph.num_classes()),
        features: (0..graph.num_nodes()).map(|r| graph.features().row(r).to_vec()).collect(),
        edges: graph.edges().iter().map(|&(u, v)| [u, v]).collect(),
        labels: graph.labels().to_vec(),
        train: graph.nodes_in(Split::Train),
        val: graph.nodes_in(Split::Val),
        test: graph.nodes_in(Split::Test),
    };
    let text = serde_json::to_string(&bundle)?;
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}
