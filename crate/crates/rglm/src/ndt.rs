//! Neighbor Detail Template serialization: a fixed-size computational
//! tree rooted at the center node, padded with placeholders, emitted in
//! level order, plus the per-node slot-occurrence map used downstream
//! for mean aggregation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::tag::Subgraph;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborOrder {
    SortedById,
    SeededShuffle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NdtConfig {
    pub hops: usize,
    /// Per-level sample sizes (b_1..b_h).
    pub branch: Vec<usize>,
    pub neighbor_order: NeighborOrder,
}

impl NdtConfig {
    pub fn new(branch: &[usize]) -> NdtConfig {
        NdtConfig {
            hops: branch.len(),
            branch: branch.to_vec(),
            neighbor_order: NeighborOrder::SortedById,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 || self.branch.len() != self.hops {
            return Err(Error::Parameter(format!(
                "branch list of length {} for {} hops",
                self.branch.len(),
                self.hops
            )));
        }
        if self.branch.iter().any(|&b| b == 0) {
            return Err(Error::Parameter("per-level sample sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Total slot count: sum over levels of the product of branch sizes.
    pub fn seq_len(&self) -> usize {
        let mut total = 1;
        let mut width = 1;
        for &b in &self.branch {
            width *= b;
            total += width;
        }
        total
    }

    /// Number of slots at each level.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![1];
        let mut width = 1;
        for &b in &self.branch {
            width *= b;
            sizes.push(width);
        }
        sizes
    }
}

/// Level-order computational tree; each slot holds a local node id or a
/// placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationTree {
    pub levels: Vec<Vec<Option<usize>>>,
}

/// Build the fixed-size tree rooted at the subgraph center. Children of
/// a slot are the node's graph neighbors; oversized neighborhoods are
/// sampled uniformly without replacement, undersized ones are padded
/// with placeholders. Revisiting earlier nodes (including the parent)
/// is allowed.
pub fn build_tree(sub: &Subgraph, cfg: &NdtConfig, rng: &mut ChaCha12Rng) -> Result<ComputationTree> {
    cfg.validate()?;
    if sub.center_local >= sub.node_count() {
        return Err(Error::Parameter("subgraph center out of range".into()));
    }
    let adj = sub.adjacency();
    let mut levels = vec![vec![Some(sub.center_local)]];
    for &b in &cfg.branch {
        let prev = levels.last().unwrap().clone();
        let mut next = Vec::with_capacity(prev.len() * b);
        for slot in prev {
            match slot {
                None => next.extend(std::iter::repeat(None).take(b)),
                Some(v) => {
                    let mut nbrs = adj[v].clone();
                    if nbrs.len() > b {
                        nbrs.shuffle(rng);
                        nbrs.truncate(b);
                    }
                    match cfg.neighbor_order {
                        NeighborOrder::SortedById => nbrs.sort_unstable(),
                        NeighborOrder::SeededShuffle => nbrs.shuffle(rng),
                    }
                    next.extend(nbrs.iter().map(|&w| Some(w)));
                    next.extend(std::iter::repeat(None).take(b - nbrs.len()));
                }
            }
        }
        levels.push(next);
    }
    Ok(ComputationTree { levels })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    /// A real node occurrence carrying the node's feature vector.
    Node { node: usize, feat: Vec<f64> },
    /// Padding; carries the all-zero feature and a placeholder flag.
    Placeholder,
    /// Reserved boundary slot between the two halves of a pair encoding.
    Separator,
}

impl Slot {
    pub fn is_node(&self) -> bool {
        matches!(self, Slot::Node { .. })
    }
}

/// The serialized token stream plus the occurrence index map. `gamma`
/// keys are local node ids (offset for the second half of a pair).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTokenSequence {
    pub slots: Vec<Slot>,
    pub gamma: BTreeMap<usize, BTreeSet<usize>>,
    /// Level of each slot within its tree (separator slots get 0).
    pub levels: Vec<usize>,
    pub d_z: usize,
}

impl GraphTokenSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Feature matrix rows in slot order; placeholders and separators
    /// contribute the zero vector.
    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Node { feat, .. } => feat.clone(),
                _ => vec![0.0; self.d_z],
            })
            .collect()
    }

    /// True for each slot the attention analysis keeps (real nodes only).
    pub fn node_mask(&self) -> Vec<bool> {
        self.slots.iter().map(Slot::is_node).collect()
    }

    /// One line per slot: "level slot_index node_id|PAD" (SEP for
    /// separator slots).
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for (i, slot) in self.slots.iter().enumerate() {
            let what = match slot {
                Slot::Node { node, .. } => node.to_string(),
                Slot::Placeholder => "PAD".into(),
                Slot::Separator => "SEP".into(),
            };
            out.push_str(&format!("{} {} {}\n", self.levels[i], i, what));
        }
        out
    }
}

/// Flatten a tree in level order.
pub fn serialize(tree: &ComputationTree, sub: &Subgraph) -> GraphTokenSequence {
    let d_z = sub.features.first().map_or(0, Vec::len);
    let mut slots = Vec::new();
    let mut levels = Vec::new();
    let mut gamma: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (lvl, level) in tree.levels.iter().enumerate() {
        for entry in level {
            let idx = slots.len();
            match entry {
                Some(v) => {
                    gamma.entry(*v).or_default().insert(idx);
                    slots.push(Slot::Node { node: *v, feat: sub.features[*v].clone() });
                }
                None => slots.push(Slot::Placeholder),
            }
            levels.push(lvl);
        }
    }
    GraphTokenSequence { slots, gamma, levels, d_z }
}

pub fn serialize_subgraph(
    sub: &Subgraph,
    cfg: &NdtConfig,
    rng: &mut ChaCha12Rng,
) -> Result<GraphTokenSequence> {
    let tree = build_tree(sub, cfg, rng)?;
    Ok(serialize(&tree, sub))
}

/// Pair encoding for link tasks: the two per-node sequences joined by a
/// reserved separator slot. Gamma keys of the second half are offset by
/// the first subgraph's node count.
pub fn serialize_pair(
    sub_a: &Subgraph,
    sub_b: &Subgraph,
    cfg: &NdtConfig,
    rng: &mut ChaCha12Rng,
) -> Result<GraphTokenSequence> {
    let left = serialize_subgraph(sub_a, cfg, rng)?;
    let right = serialize_subgraph(sub_b, cfg, rng)?;
    let offset_nodes = sub_a.node_count();
    let offset_slots = left.len() + 1;
    let mut slots = left.slots;
    let mut levels = left.levels;
    slots.push(Slot::Separator);
    levels.push(0);
    slots.extend(right.slots);
    levels.extend(right.levels);
    let mut gamma = left.gamma;
    for (node, idxs) in right.gamma {
        gamma.insert(
            node + offset_nodes,
            idxs.into_iter().map(|i| i + offset_slots).collect(),
        );
    }
    Ok(GraphTokenSequence { slots, gamma, levels, d_z: left.d_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag::{sample_subgraph, Split, Tag, TagMeta};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn tiny_tag(n: usize, edges: Vec<(usize, usize)>) -> Tag {
        Tag {
            node_count: n,
            edges,
            features: (0..n).map(|v| vec![v as f64, 1.0]).collect(),
            labels: vec![None; n],
            splits: vec![Split::Train; n],
            meta: TagMeta { d_z: 2, num_classes: 2, name: "t".into() },
        }
    }

    #[test]
    fn isolated_node_all_placeholders() {
        let tag = tiny_tag(1, vec![]);
        let sub = sample_subgraph(&tag, 0, 1).unwrap();
        let seq = serialize_subgraph(&sub, &NdtConfig::new(&[2]), &mut rng(0)).unwrap();
        assert_eq!(seq.len(), 3);
        assert!(matches!(seq.slots[0], Slot::Node { node: 0, .. }));
        assert_eq!(seq.slots[1], Slot::Placeholder);
        assert_eq!(seq.slots[2], Slot::Placeholder);
        assert_eq!(seq.gamma[&0], BTreeSet::from([0]));
    }

    #[test]
    fn triangle_hand_trace() {
        let tag = tiny_tag(3, vec![(0, 1), (0, 2), (1, 2)]);
        let sub = sample_subgraph(&tag, 0, 2).unwrap();
        let seq = serialize_subgraph(&sub, &NdtConfig::new(&[2, 2]), &mut rng(0)).unwrap();
        let ids: Vec<Option<usize>> = seq
            .slots
            .iter()
            .map(|s| match s {
                Slot::Node { node, .. } => Some(*node),
                _ => None,
            })
            .collect();
        // level order: A | B C | A C A B (local ids 0,1,2)
        assert_eq!(
            ids,
            vec![Some(0), Some(1), Some(2), Some(0), Some(2), Some(0), Some(1)]
        );
        assert_eq!(seq.gamma[&0], BTreeSet::from([0, 3, 5]));
        assert_eq!(seq.gamma[&1], BTreeSet::from([1, 6]));
        assert_eq!(seq.gamma[&2], BTreeSet::from([2, 4]));
    }

    #[test]
    fn default_geometry_111_slots() {
        let cfg = NdtConfig::new(&[10, 10]);
        assert_eq!(cfg.seq_len(), 111);
        let tag = tiny_tag(3, vec![(0, 1), (0, 2), (1, 2)]);
        let sub = sample_subgraph(&tag, 0, 2).unwrap();
        let seq = serialize_subgraph(&sub, &cfg, &mut rng(1)).unwrap();
        assert_eq!(seq.len(), 111);
    }

    #[test]
    fn path_center_padding() {
        let tag = tiny_tag(2, vec![(0, 1)]);
        let sub = sample_subgraph(&tag, 0, 1).unwrap();
        let seq = serialize_subgraph(&sub, &NdtConfig::new(&[2]), &mut rng(0)).unwrap();
        let dump = seq.debug_dump();
        assert_eq!(dump, "0 0 0\n1 1 1\n1 2 PAD\n");
        assert_eq!(seq.gamma[&1], BTreeSet::from([1]));
    }

    #[test]
    fn pair_encoding_layout() {
        let tag = tiny_tag(2, vec![]);
        let sub_a = sample_subgraph(&tag, 0, 1).unwrap();
        let sub_b = sample_subgraph(&tag, 1, 1).unwrap();
        let cfg = NdtConfig::new(&[1]);
        let seq = serialize_pair(&sub_a, &sub_b, &cfg, &mut rng(0)).unwrap();
        assert_eq!(seq.len(), 2 * cfg.seq_len() + 1);
        assert!(matches!(seq.slots[0], Slot::Node { node: 0, .. }));
        assert_eq!(seq.slots[1], Slot::Placeholder);
        assert_eq!(seq.slots[2], Slot::Separator);
        assert!(matches!(seq.slots[3], Slot::Node { node: 0, .. }));
        assert_eq!(seq.slots[4], Slot::Placeholder);
        // gamma keys disjoint across halves, second half offset
        assert_eq!(seq.gamma[&0], BTreeSet::from([0]));
        assert_eq!(seq.gamma[&1], BTreeSet::from([3]));
    }

    #[test]
    fn determinism_under_seed() {
        let tag = crate::tag::generate_synthetic_tag(&crate::tag::SbmSpec {
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let sub = sample_subgraph(&tag, 0, 2).unwrap();
        let cfg = NdtConfig::new(&[3, 3]);
        let a = serialize_subgraph(&sub, &cfg, &mut rng(5)).unwrap();
        let b = serialize_subgraph(&sub, &cfg, &mut rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_partitions_node_slots() {
        let tag = crate::tag::generate_synthetic_tag(&crate::tag::SbmSpec {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let sub = sample_subgraph(&tag, 10, 2).unwrap();
        let seq = serialize_subgraph(&sub, &NdtConfig::new(&[3, 3]), &mut rng(9)).unwrap();
        let mut covered = BTreeSet::new();
        for (node, idxs) in &seq.gamma {
            for &i in idxs {
                assert!(covered.insert(i), "slot {i} in two gamma sets");
                match &seq.slots[i] {
                    Slot::Node { node: n, .. } => assert_eq!(n, node),
                    other => panic!("gamma index {i} points at {other:?}"),
                }
            }
        }
        let node_slots: BTreeSet<usize> = seq
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_node())
            .map(|(i, _)| i)
            .collect();
        assert_eq!(covered, node_slots);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(NdtConfig::new(&[]).validate().is_err());
        assert!(NdtConfig::new(&[2, 0]).validate().is_err());
    }
}
