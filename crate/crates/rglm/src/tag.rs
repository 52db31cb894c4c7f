//! Text-attributed graphs: data model, synthetic stochastic-block-model
//! generation, h-hop subgraph extraction, and JSON round-tripping.
//!
//! Node text is stood in for by feature vectors built from class
//! prototypes plus Gaussian noise, so the feature/structure learning
//! problem survives without an external text encoder.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMeta {
    pub d_z: usize,
    pub num_classes: usize,
    pub name: String,
}

/// An undirected simple graph with per-node features, optional class
/// labels, and split masks. Edges are stored as a sorted list of
/// `(min, max)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tag {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
    pub splits: Vec<Split>,
    pub meta: TagMeta,
}

impl Tag {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.node_count
            || self.labels.len() != self.node_count
            || self.splits.len() != self.node_count
        {
            return Err(Error::Parse("node-array length mismatch".into()));
        }
        for row in &self.features {
            if row.len() != self.meta.d_z {
                return Err(Error::Parse(format!(
                    "feature row of length {} (expected {})",
                    row.len(),
                    self.meta.d_z
                )));
            }
        }
        let mut seen = HashSet::new();
        for &(a, b) in &self.edges {
            if a >= self.node_count || b >= self.node_count {
                return Err(Error::Parse(format!("invalid endpoint in edge ({a},{b})")));
            }
            if a == b {
                return Err(Error::Parse(format!("self-loop at node {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::Parse(format!("duplicate edge ({a},{b})")));
            }
        }
        for (v, lab) in self.labels.iter().enumerate() {
            if let Some(c) = lab {
                if *c >= self.meta.num_classes {
                    return Err(Error::Parse(format!(
                        "label {c} of node {v} outside [0, {})",
                        self.meta.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for nbrs in &mut adj {
            nbrs.sort_unstable();
        }
        adj
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search(&key).is_ok()
    }

    pub fn nodes_in_split(&self, split: Split) -> Vec<usize> {
        (0..self.node_count).filter(|&v| self.splits[v] == split).collect()
    }
}

/// Parameters for the synthetic stochastic-block-model benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbmSpec {
    pub nodes: usize,
    pub classes: usize,
    pub d_z: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_noise: f64,
    pub seed: u64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub name: String,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            nodes: 300,
            classes: 4,
            d_z: 8,
            intra_p: 0.1,
            inter_p: 0.01,
            feature_noise: 1.0,
            seed: 0,
            train_ratio: 0.6,
            val_ratio: 0.2,
            name: "sbm".into(),
        }
    }
}

/// Stochastic-block-model graph whose node features are class-prototype
/// vectors plus Gaussian noise. Deterministic per spec + seed.
pub fn generate_synthetic_tag(spec: &SbmSpec) -> Result<Tag> {
    if spec.classes < 2 || spec.nodes < spec.classes {
        return Err(Error::Parameter(format!(
            "need nodes >= classes >= 2, got nodes={} classes={}",
            spec.nodes, spec.classes
        )));
    }
    if !(spec.inter_p >= 0.0 && spec.inter_p < spec.intra_p && spec.intra_p <= 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 <= inter_p < intra_p <= 1, got intra_p={} inter_p={}",
            spec.intra_p, spec.inter_p
        )));
    }
    if spec.d_z < spec.classes {
        return Err(Error::Parameter(format!(
            "need d_z >= classes, got d_z={} classes={}",
            spec.d_z, spec.classes
        )));
    }
    if spec.feature_noise < 0.0 {
        return Err(Error::Parameter("feature_noise must be nonnegative".into()));
    }
    if !(spec.train_ratio > 0.0 && spec.val_ratio >= 0.0 && spec.train_ratio + spec.val_ratio < 1.0)
    {
        return Err(Error::Parameter("split ratios must leave room for a test split".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    // Contiguous label blocks: node v belongs to class v*classes/nodes.
    let labels: Vec<usize> = (0..spec.nodes)
        .map(|v| v * spec.classes / spec.nodes)
        .collect();

    let mut edges = Vec::new();
    for a in 0..spec.nodes {
        for b in (a + 1)..spec.nodes {
            let p = if labels[a] == labels[b] { spec.intra_p } else { spec.inter_p };
            if rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    edges.sort_unstable();

    // Class prototypes: scaled standard-basis directions in d_z.
    let mut features = Vec::with_capacity(spec.nodes);
    for v in 0..spec.nodes {
        let mut feat = vec![0.0; spec.d_z];
        feat[labels[v]] = 1.0;
        for x in feat.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x += spec.feature_noise * noise;
        }
        features.push(feat);
    }

    let mut order: Vec<usize> = (0..spec.nodes).collect();
    order.shuffle(&mut rng);
    let n_train = ((spec.nodes as f64) * spec.train_ratio).round() as usize;
    let n_val = ((spec.nodes as f64) * spec.val_ratio).round() as usize;
    let mut splits = vec![Split::Test; spec.nodes];
    for &v in order.iter().take(n_train) {
        splits[v] = Split::Train;
    }
    for &v in order.iter().skip(n_train).take(n_val) {
        splits[v] = Split::Val;
    }

    let tag = Tag {
        node_count: spec.nodes,
        edges,
        features,
        labels: labels.into_iter().map(Some).collect(),
        splits,
        meta: TagMeta {
            d_z: spec.d_z,
            num_classes: spec.classes,
            name: spec.name.clone(),
        },
    };
    tag.validate().map(|_| tag)
}

/// Breadth-first closure of a center node up to `h` hops.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    /// Center as a local node id (always 0).
    pub center_local: usize,
    /// local id -> global id.
    pub node_ids: Vec<usize>,
    /// Induced edges among included nodes, as local id pairs.
    pub edges: Vec<(usize, usize)>,
    pub features: Vec<Vec<f64>>,
    /// Hop distance from the center per local node.
    pub hop_of: Vec<usize>,
    /// Local labels carried over from the parent graph.
    pub labels: Vec<Option<usize>>,
}

impl Subgraph {
    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for nbrs in &mut adj {
            nbrs.sort_unstable();
        }
        adj
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search(&key).is_ok()
    }
}

/// Extract the full BFS closure of `center` up to `h` hops, with the
/// induced edge set. Local ids follow BFS discovery order (ascending
/// global id within each hop), center first.
pub fn sample_subgraph(tag: &Tag, center: usize, h: usize) -> Result<Subgraph> {
    if center >= tag.node_count {
        return Err(Error::Parameter(format!(
            "center {center} out of range for {} nodes",
            tag.node_count
        )));
    }
    if h == 0 {
        return Err(Error::Parameter("hop count must be >= 1".into()));
    }
    let adj = tag.adjacency();
    let mut hop = vec![usize::MAX; tag.node_count];
    hop[center] = 0;
    let mut order = vec![center];
    let mut queue = VecDeque::from([center]);
    while let Some(v) = queue.pop_front() {
        if hop[v] == h {
            continue;
        }
        for &w in &adj[v] {
            if hop[w] == usize::MAX {
                hop[w] = hop[v] + 1;
                order.push(w);
                queue.push_back(w);
            }
        }
    }
    let mut local_of = vec![usize::MAX; tag.node_count];
    for (i, &v) in order.iter().enumerate() {
        local_of[v] = i;
    }
    let mut edges: Vec<(usize, usize)> = tag
        .edges
        .iter()
        .filter(|&&(a, b)| local_of[a] != usize::MAX && local_of[b] != usize::MAX)
        .map(|&(a, b)| {
            let (x, y) = (local_of[a], local_of[b]);
            (x.min(y), x.max(y))
        })
        .collect();
    edges.sort_unstable();
    Ok(Subgraph {
        center_local: 0,
        features: order.iter().map(|&v| tag.features[v].clone()).collect(),
        hop_of: order.iter().map(|&v| hop[v]).collect(),
        labels: order.iter().map(|&v| tag.labels[v]).collect(),
        node_ids: order,
        edges,
    })
}

// On-disk schema. One JSON document per dataset.
#[derive(Serialize, Deserialize)]
struct TagFile {
    meta: TagMeta,
    nodes: Vec<NodeRecord>,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    feat: Vec<f64>,
    label: Option<usize>,
    split: Split,
}

pub fn save_tag(tag: &Tag, path: &Path) -> Result<()> {
    tag.validate()?;
    let file = TagFile {
        meta: tag.meta.clone(),
        nodes: (0..tag.node_count)
            .map(|v| NodeRecord {
                id: v,
                feat: tag.features[v].clone(),
                label: tag.labels[v],
                split: tag.splits[v],
            })
            .collect(),
        edges: tag.edges.clone(),
    };
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn load_tag(path: &Path) -> Result<Tag> {
    let r = BufReader::new(File::open(path)?);
    let file: TagFile = serde_json::from_reader(r)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let n = file.nodes.len();
    let ids: BTreeSet<usize> = file.nodes.iter().map(|rec| rec.id).collect();
    if ids.len() != n || ids.last() != n.checked_sub(1).as_ref() {
        return Err(Error::Parse("node ids must be 0..n without gaps".into()));
    }
    let mut features = vec![Vec::new(); n];
    let mut labels = vec![None; n];
    let mut splits = vec![Split::Test; n];
    for rec in file.nodes {
        features[rec.id] = rec.feat;
        labels[rec.id] = rec.label;
        splits[rec.id] = rec.split;
    }
    let tag = Tag {
        node_count: n,
        edges: {
            let mut e: Vec<(usize, usize)> =
                file.edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
            e.sort_unstable();
            e
        },
        features,
        labels,
        splits,
        meta: file.meta,
    };
    tag.validate()?;
    Ok(tag)
}
