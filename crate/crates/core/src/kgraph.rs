//! The 14-node chest-disease knowledge graph and its symmetric normalization.

use std::collections::BTreeSet;
use std::fmt;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Number of disease entities in the graph.
pub const NUM_ENTITIES: usize = 14;

/// Canonical CheXpert labels, in index order.
pub const CHEXPERT_LABELS: [&str; NUM_ENTITIES] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Lung,
    Heart,
    Pleura,
    Global,
}

impl Region {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lung" => Some(Region::Lung),
            "heart" => Some(Region::Heart),
            "pleura" => Some(Region::Pleura),
            "global" => Some(Region::Global),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Lung => "lung",
            Region::Heart => "heart",
            Region::Pleura => "pleura",
            Region::Global => "global",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Default region of each CheXpert label.
pub fn default_region(index: usize) -> Region {
    match index {
        3..=9 => Region::Lung,
        1 | 2 => Region::Heart,
        10 | 11 => Region::Pleura,
        _ => Region::Global,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiseaseEntity {
    pub name: &'static str,
    pub region: Region,
    pub index: usize,
}

/// Index of a CheXpert label. Matching ignores case and treats `_` as a space.
pub fn entity_index(name: &str) -> Option<usize> {
    let wanted = name.replace('_', " ");
    CHEXPERT_LABELS
        .iter()
        .position(|l| l.eq_ignore_ascii_case(wanted.trim()))
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vec<DiseaseEntity>,
    adjacency: Tensor<f64>,
    normalized: Tensor<f64>,
}

impl KnowledgeGraph {
    /// Builds a graph from entity regions and an explicit undirected edge list.
    /// Self-loops are always added.
    pub fn from_edges(regions: [Region; NUM_ENTITIES], edges: &[(usize, usize)]) -> Result<Self> {
        let n = NUM_ENTITIES;
        let mut a = Tensor::<f64>::identity(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i}, {j}) out of range")));
            }
            a.data_mut()[i * n + j] = 1.0;
            a.data_mut()[j * n + i] = 1.0;
        }
        let normalized = normalize_adjacency(&a)?;
        let entities = CHEXPERT_LABELS
            .iter()
            .zip(regions)
            .enumerate()
            .map(|(index, (&name, region))| DiseaseEntity { name, region, index })
            .collect();
        Ok(Self {
            entities,
            adjacency: a,
            normalized,
        })
    }

    /// Region-derived edges: nodes sharing a region are fully connected and
    /// global nodes connect to everything.
    pub fn from_regions(regions: [Region; NUM_ENTITIES]) -> Result<Self> {
        Self::from_edges(regions, &region_edges(&regions))
    }

    pub fn entities(&self) -> &[DiseaseEntity] {
        &self.entities
    }

    /// Binary adjacency including self-loops.
    pub fn adjacency(&self) -> &Tensor<f64> {
        &self.adjacency
    }

    /// `D^{-1/2} A D^{-1/2}`.
    pub fn normalized(&self) -> &Tensor<f64> {
        &self.normalized
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.adjacency.at(i, j) != 0.0
    }

    /// Adjacency as 14 lines of `0`/`1` characters.
    pub fn adjacency_string(&self) -> String {
        let n = self.len();
        let mut out = String::with_capacity(n * (n + 1));
        for i in 0..n {
            for j in 0..n {
                out.push(if self.connected(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Parses an override document of `node <name> <region>` and
    /// `edge <name> <name>` lines. Names may be quoted or use `_` for spaces.
    /// Node lines reassign regions; if any edge line is present the listed
    /// edges replace the region-derived table.
    pub fn parse_override(text: &str) -> Result<Self> {
        let mut regions: [Region; NUM_ENTITIES] = std::array::from_fn(default_region);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut seen_nodes = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields = split_fields(line).map_err(|e| Error::Graph(format!("line {}: {e}", lineno + 1)))?;
            let lookup = |name: &str| {
                entity_index(name).ok_or_else(|| Error::Graph(format!("line {}: unknown entity {name:?}", lineno + 1)))
            };
            match fields.first().map(String::as_str) {
                Some("node") if fields.len() == 3 => {
                    let idx = lookup(&fields[1])?;
                    let region = Region::parse(&fields[2])
                        .ok_or_else(|| Error::Graph(format!("line {}: unknown region {:?}", lineno + 1, fields[2])))?;
                    if !seen_nodes.insert(idx) {
                        return Err(Error::Graph(format!("line {}: node {:?} declared twice", lineno + 1, fields[1])));
                    }
                    regions[idx] = region;
                }
                Some("edge") if fields.len() == 3 => {
                    let (i, j) = (lookup(&fields[1])?, lookup(&fields[2])?);
                    let key = (i.min(j), i.max(j));
                    if !seen.insert(key) {
                        return Err(Error::Graph(format!(
                            "line {}: duplicate edge {:?} - {:?}",
                            lineno + 1,
                            fields[1],
                            fields[2]
                        )));
                    }
                    edges.push(key);
                }
                _ => return Err(Error::Graph(format!("line {}: cannot parse {line:?}", lineno + 1))),
            }
        }
        if edges.is_empty() {
            Self::from_regions(regions)
        } else {
            Self::from_edges(regions, &edges)
        }
    }
}

fn split_fields(line: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            chars.next();
            let mut field = String::new();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(ch) => field.push(ch),
                    None => return Err("unterminated quote".into()),
                }
            }
            out.push(field);
        } else {
            let mut field = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                field.push(ch);
                chars.next();
            }
            out.push(field);
        }
    }
    Ok(out)
}

fn region_edges(regions: &[Region; NUM_ENTITIES]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..NUM_ENTITIES {
        for j in i + 1..NUM_ENTITIES {
            let linked = regions[i] == regions[j] || regions[i] == Region::Global || regions[j] == Region::Global;
            if linked {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// The default graph over the CheXpert-14 labels.
pub fn build_chexpert_graph() -> KnowledgeGraph {
    KnowledgeGraph::from_regions(std::array::from_fn(default_region)).expect("default table is well formed")
}

/// Symmetric degree normalization `D^{-1/2} A D^{-1/2}` with `D` the row sums.
pub fn normalize_adjacency(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Graph(format!("adjacency must be square, got {:?}", a.shape())));
    }
    let n = a.shape()[0];
    for i in 0..n {
        for j in 0..n {
            let v = a.at(i, j);
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Graph(format!("adjacency entry ({i}, {j}) = {v} must be finite and nonnegative")));
            }
            if v != a.at(j, i) {
                return Err(Error::Graph(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let degree: f64 = a.row(i).iter().sum();
            if degree > 0.0 {
                Ok(1.0 / degree.sqrt())
            } else {
                Err(Error::Graph(format!("node {i} has zero degree; add self-loops before normalizing")))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(out)
}
