//! Skeleton graph construction, sensor-set reduction and the normalized
//! propagation operator `D̂^{-1/2} (A + I) D̂^{-1/2}` used by graph convolution.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::numerics::{MixMatrix, Tensor};

/// Joint index in the canonical numbering (1-based).
pub type NodeId = u32;

pub const FULL_NODE_COUNT: usize = 22;

const CANONICAL_SKELETON: &str = include_str!("../data/skeleton22.txt");

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references a node that is not in the graph")]
    DanglingEdge(NodeId, NodeId),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("node {0} is not in the graph")]
    UnknownNode(NodeId),
    #[error("graph has no nodes")]
    Empty,
    #[error("sensor reduction needs the full {FULL_NODE_COUNT}-node graph, got {0} nodes")]
    NotFullGraph(usize),
    #[error("unknown sensor set `{0}`")]
    UnknownSensorSet(String),
    #[error("sensor set `{name}` leaves {got} nodes, expected {expected}")]
    PresetSize { name: String, got: usize, expected: usize },
    #[error("skeleton file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Undirected skeleton graph with its derived matrices; immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyGraph {
    node_ids: Vec<NodeId>,
    edges: BTreeSet<(NodeId, NodeId)>,
    adjacency: Tensor,
    propagation: Tensor,
    neighbor_mean: Tensor,
    propagation_mix: Arc<MixMatrix>,
    neighbor_mix: Arc<MixMatrix>,
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a < b { (a, b) } else { (b, a) }
}

/// Builds the graph for `node_ids` (row order of every matrix) and undirected `edges`.
pub fn build_graph(node_ids: &[NodeId], edges: &[(NodeId, NodeId)]) -> Result<BodyGraph, GraphError> {
    if node_ids.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut index = BTreeMap::new();
    for (i, &id) in node_ids.iter().enumerate() {
        if index.insert(id, i).is_some() {
            return Err(GraphError::DuplicateNode(id));
        }
    }
    let n = node_ids.len();
    let mut edge_set = BTreeSet::new();
    let mut adjacency = Tensor::zeros(vec![n, n]);
    for &(a, b) in edges {
        if a == b {
            return Err(GraphError::SelfLoop(a));
        }
        let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) else {
            return Err(GraphError::DanglingEdge(a, b));
        };
        edge_set.insert(ordered(a, b));
        adjacency.set(i, j, 1.0);
        adjacency.set(j, i, 1.0);
    }

    // Â = A + I, D̂_ii = Σ_j Â_ij
    let degree: Vec<f64> = (0..n).map(|i| 1.0 + adjacency.row(i).iter().sum::<f64>()).collect();
    let mut propagation = Tensor::zeros(vec![n, n]);
    let mut neighbor_mean = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        let neighbors = degree[i] - 1.0;
        for j in 0..n {
            let a_hat = adjacency.at(i, j) + if i == j { 1.0 } else { 0.0 };
            if a_hat != 0.0 {
                propagation.set(i, j, a_hat / (degree[i] * degree[j]).sqrt());
            }
            if adjacency.at(i, j) != 0.0 {
                neighbor_mean.set(i, j, 1.0 / neighbors);
            }
        }
    }

    let graph = BodyGraph {
        node_ids: node_ids.to_vec(),
        edges: edge_set,
        propagation_mix: Arc::new(MixMatrix::from_dense(&propagation)),
        neighbor_mix: Arc::new(MixMatrix::from_dense(&neighbor_mean)),
        adjacency,
        propagation,
        neighbor_mean,
    };
    let components = graph.component_count();
    if components > 1 {
        log::warn!("body graph with {n} nodes has {components} connected components");
    }
    Ok(graph)
}

impl BodyGraph {
    /// The canonical 22-joint skeleton.
    pub fn full() -> BodyGraph {
        SkeletonDef::canonical().full_graph().expect("canonical skeleton is valid")
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.node_ids
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn identity(&self) -> Tensor {
        Tensor::identity(self.node_count())
    }

    /// `D̂^{-1/2} Â D̂^{-1/2}`.
    pub fn propagation(&self) -> &Tensor {
        &self.propagation
    }

    /// Row-normalized adjacency: each node averages its neighbors (excluding itself).
    pub fn neighbor_mean(&self) -> &Tensor {
        &self.neighbor_mean
    }

    pub fn propagation_mix(&self) -> Arc<MixMatrix> {
        Arc::clone(&self.propagation_mix)
    }

    pub fn neighbor_mix(&self) -> Arc<MixMatrix> {
        Arc::clone(&self.neighbor_mix)
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.node_ids.iter().position(|&n| n == id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index_of(id).is_some()
    }

    /// Nodes within `max_distance` edges of `node`, including `node`.
    pub fn neighbor_set(&self, node: NodeId, max_distance: usize) -> Result<BTreeSet<NodeId>, GraphError> {
        let start = self.index_of(node).ok_or(GraphError::UnknownNode(node))?;
        let n = self.node_count();
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            if dist[u] == max_distance {
                continue;
            }
            for v in 0..n {
                if self.adjacency.at(u, v) != 0.0 && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok((0..n).filter(|&i| dist[i] != usize::MAX).map(|i| self.node_ids[i]).collect())
    }

    fn component_count(&self) -> usize {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for v in 0..n {
                    if self.adjacency.at(u, v) != 0.0 && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }
}

/// Parsed skeleton definition: joints, edges and named removal presets.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonDef {
    pub joints: Vec<(NodeId, String)>,
    pub edges: Vec<(NodeId, NodeId)>,
    pub presets: Vec<(String, Vec<NodeId>)>,
}

impl SkeletonDef {
    pub fn canonical() -> SkeletonDef {
        CANONICAL_SKELETON.parse().expect("canonical skeleton parses")
    }

    pub fn load(path: &Path) -> Result<SkeletonDef, GraphError> {
        let text = std::fs::read_to_string(path).map_err(|e| GraphError::Parse {
            line: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        text.parse()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.joints.iter().map(|(id, _)| *id).collect()
    }

    pub fn joint_name(&self, id: NodeId) -> Option<&str> {
        self.joints.iter().find(|(j, _)| *j == id).map(|(_, n)| n.as_str())
    }

    pub fn full_graph(&self) -> Result<BodyGraph, GraphError> {
        build_graph(&self.node_ids(), &self.edges)
    }

    pub fn preset(&self, name: &str) -> Option<&[NodeId]> {
        self.presets.iter().find(|(n, _)| n == name).map(|(_, r)| r.as_slice())
    }
}

impl FromStr for SkeletonDef {
    type Err = GraphError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut def = SkeletonDef { joints: Vec::new(), edges: Vec::new(), presets: Vec::new() };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: &str| GraphError::Parse { line, msg: msg.to_string() };
            let id = |s: &str| s.parse::<NodeId>().map_err(|_| err(&format!("bad node id `{s}`")));
            let mut parts = content.split_whitespace();
            match parts.next() {
                Some("edge") => {
                    let a = id(parts.next().ok_or_else(|| err("edge needs two ids"))?)?;
                    let b = id(parts.next().ok_or_else(|| err("edge needs two ids"))?)?;
                    if parts.next().is_some() {
                        return Err(err("edge takes exactly two ids"));
                    }
                    def.edges.push((a, b));
                }
                Some("preset") => {
                    let name = parts.next().ok_or_else(|| err("preset needs a name"))?;
                    let removed = parts.map(id).collect::<Result<Vec<_>, _>>()?;
                    def.presets.push((name.to_string(), removed));
                }
                Some("node") => {
                    let n = id(parts.next().ok_or_else(|| err("node needs an id"))?)?;
                    let name = parts.next().ok_or_else(|| err("node needs a joint name"))?;
                    if !def.edges.is_empty() {
                        return Err(err("node lines must precede edge lines"));
                    }
                    def.joints.push((n, name.to_string()));
                }
                Some(tok) => {
                    // Bare `<id> <joint_name>` lines are accepted as node lines.
                    let n = id(tok)?;
                    let name = parts.next().ok_or_else(|| err("node needs a joint name"))?;
                    def.joints.push((n, name.to_string()));
                }
                None => unreachable!(),
            }
        }
        Ok(def)
    }
}

/// Named subsets of the full skeleton simulating fewer worn sensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorSetName {
    Full22,
    OneSide14,
    OneSide7,
    Symmetric7,
    Custom,
}

impl SensorSetName {
    pub const PRESETS: [SensorSetName; 4] =
        [SensorSetName::Full22, SensorSetName::OneSide14, SensorSetName::OneSide7, SensorSetName::Symmetric7];

    pub fn as_str(self) -> &'static str {
        match self {
            SensorSetName::Full22 => "full22",
            SensorSetName::OneSide14 => "one_side14",
            SensorSetName::OneSide7 => "one_side7",
            SensorSetName::Symmetric7 => "symmetric7",
            SensorSetName::Custom => "custom",
        }
    }

    pub fn expected_nodes(self) -> Option<usize> {
        match self {
            SensorSetName::Full22 => Some(22),
            SensorSetName::OneSide14 => Some(14),
            SensorSetName::OneSide7 | SensorSetName::Symmetric7 => Some(7),
            SensorSetName::Custom => None,
        }
    }
}

impl fmt::Display for SensorSetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorSetName {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full22" => Ok(SensorSetName::Full22),
            "one_side14" => Ok(SensorSetName::OneSide14),
            "one_side7" => Ok(SensorSetName::OneSide7),
            "symmetric7" => Ok(SensorSetName::Symmetric7),
            "custom" => Ok(SensorSetName::Custom),
            other => Err(GraphError::UnknownSensorSet(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorSet {
    pub name: SensorSetName,
    pub removal: Vec<NodeId>,
}

impl SensorSet {
    /// Looks up a named preset's removal list in `skeleton`.
    pub fn preset(name: SensorSetName, skeleton: &SkeletonDef) -> Result<SensorSet, GraphError> {
        if name == SensorSetName::Custom {
            return Ok(SensorSet { name, removal: Vec::new() });
        }
        let removal = skeleton
            .preset(name.as_str())
            .ok_or_else(|| GraphError::UnknownSensorSet(name.to_string()))?;
        Ok(SensorSet { name, removal: removal.to_vec() })
    }

    pub fn custom(removal: Vec<NodeId>) -> SensorSet {
        SensorSet { name: SensorSetName::Custom, removal }
    }
}

/// Removes the sensor set's nodes from the full graph.
///
/// Surviving nodes that were joined only through removed nodes are re-linked
/// (any path whose interior consists solely of removed nodes becomes an edge),
/// so removing the middle of a limb chain keeps the chain connected.
pub fn reduce_sensors(full: &BodyGraph, set: &SensorSet) -> Result<BodyGraph, GraphError> {
    if full.node_count() != FULL_NODE_COUNT {
        return Err(GraphError::NotFullGraph(full.node_count()));
    }
    for &id in &set.removal {
        if !full.contains(id) {
            return Err(GraphError::UnknownNode(id));
        }
    }
    let removed: BTreeSet<NodeId> = set.removal.iter().copied().collect();
    let kept: Vec<NodeId> = full.node_ids().iter().copied().filter(|id| !removed.contains(id)).collect();
    if kept.is_empty() {
        return Err(GraphError::Empty);
    }
    if let Some(expected) = set.name.expected_nodes() {
        if kept.len() != expected {
            return Err(GraphError::PresetSize { name: set.name.to_string(), got: kept.len(), expected });
        }
    }

    let mut neighbors: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (a, b) in full.edges() {
        neighbors.entry(a).or_default().push(b);
        neighbors.entry(b).or_default().push(a);
    }
    let mut edges = BTreeSet::new();
    for &start in &kept {
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in neighbors.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
                if !seen.insert(v) {
                    continue;
                }
                if removed.contains(&v) {
                    stack.push(v);
                } else {
                    edges.insert(ordered(start, v));
                }
            }
        }
    }
    let edges: Vec<_> = edges.into_iter().collect();
    build_graph(&kept, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn single_node_propagation_is_one() {
        let g = build_graph(&[1], &[]).unwrap();
        assert_eq!(g.propagation().data(), &[1.0]);
    }

    #[test]
    fn two_node_edge() {
        let g = build_graph(&[1, 2], &[(1, 2)]).unwrap();
        assert_eq!(g.propagation().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn path_of_three() {
        let g = build_graph(&[1, 2, 3], &[(1, 2), (2, 3)]).unwrap();
        let p = g.propagation();
        assert!(close(p.at(0, 0), 0.5));
        assert!(close(p.at(1, 1), 1.0 / 3.0));
        assert!(close(p.at(2, 2), 0.5));
        assert!(close(p.at(0, 1), 1.0 / 6f64.sqrt()));
        assert_eq!(p.at(0, 2), 0.0);
    }

    #[test]
    fn invalid_edges_are_rejected() {
        assert_eq!(build_graph(&[1, 2], &[(1, 3)]), Err(GraphError::DanglingEdge(1, 3)));
        assert_eq!(build_graph(&[1, 2], &[(2, 2)]), Err(GraphError::SelfLoop(2)));
        assert_eq!(build_graph(&[], &[]), Err(GraphError::Empty));
    }

    #[test]
    fn disconnected_graph_is_allowed() {
        let g = build_graph(&[1, 2, 3], &[(1, 2)]).unwrap();
        assert_eq!(g.component_count(), 2);
    }

    #[test]
    fn neighbor_sets() {
        let iso = build_graph(&[4], &[]).unwrap();
        assert_eq!(iso.neighbor_set(4, 1).unwrap(), BTreeSet::from([4]));
        let path = build_graph(&[1, 2, 3], &[(1, 2), (2, 3)]).unwrap();
        assert_eq!(path.neighbor_set(2, 1).unwrap(), BTreeSet::from([1, 2, 3]));
        assert_eq!(path.neighbor_set(1, 1).unwrap(), BTreeSet::from([1, 2]));
        assert_eq!(path.neighbor_set(1, 2).unwrap(), BTreeSet::from([1, 2, 3]));
        assert_eq!(path.neighbor_set(9, 1), Err(GraphError::UnknownNode(9)));
    }

    #[test]
    fn canonical_skeleton_is_a_spanning_tree() {
        let def = SkeletonDef::canonical();
        let g = def.full_graph().unwrap();
        assert_eq!(g.node_count(), 22);
        assert_eq!(g.edge_count(), 21);
        assert_eq!(g.component_count(), 1);
        assert_eq!(def.joint_name(9), Some("chest"));
    }

    #[test]
    fn preset_node_counts() {
        let def = SkeletonDef::canonical();
        let full = def.full_graph().unwrap();
        for name in SensorSetName::PRESETS {
            let set = SensorSet::preset(name, &def).unwrap();
            let g = reduce_sensors(&full, &set).unwrap();
            assert_eq!(Some(g.node_count()), name.expected_nodes(), "{name}");
            assert_eq!(g.component_count(), 1, "{name} stays connected");
            assert_eq!(g.edge_count(), g.node_count() - 1, "{name} stays a tree");
        }
    }

    #[test]
    fn one_side7_relinks_chains() {
        let def = SkeletonDef::canonical();
        let full = def.full_graph().unwrap();
        let g = reduce_sensors(&full, &SensorSet::preset(SensorSetName::OneSide7, &def).unwrap()).unwrap();
        assert_eq!(g.node_ids(), &[1, 5, 7, 9, 16, 19, 22]);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(1, 5), (1, 9), (5, 7), (9, 16), (9, 22), (16, 19)]);
    }

    #[test]
    fn symmetric7_keeps_both_sides() {
        let def = SkeletonDef::canonical();
        let full = def.full_graph().unwrap();
        let g = reduce_sensors(&full, &SensorSet::preset(SensorSetName::Symmetric7, &def).unwrap()).unwrap();
        assert_eq!(g.node_ids(), &[1, 2, 5, 9, 14, 19, 22]);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(1, 2), (1, 5), (1, 9), (9, 14), (9, 19), (9, 22)]);
    }

    #[test]
    fn full22_reduction_is_identity() {
        let def = SkeletonDef::canonical();
        let full = def.full_graph().unwrap();
        let g = reduce_sensors(&full, &SensorSet::preset(SensorSetName::Full22, &def).unwrap()).unwrap();
        assert_eq!(g, full);
    }

    #[test]
    fn removing_everything_fails() {
        let full = BodyGraph::full();
        let all = SensorSet::custom((1..=22).collect());
        assert_eq!(reduce_sensors(&full, &all), Err(GraphError::Empty));
        let small = build_graph(&[1, 2], &[(1, 2)]).unwrap();
        assert_eq!(reduce_sensors(&small, &SensorSet::custom(vec![])), Err(GraphError::NotFullGraph(2)));
    }

    #[test]
    fn skeleton_parse_errors_carry_line_numbers() {
        let err = "node 1 a\nedge 1 x\n".parse::<SkeletonDef>().unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 2, .. }));
        let def: SkeletonDef = "1 root\n2 tip\nedge 1 2\n".parse().unwrap();
        assert_eq!(def.joints.len(), 2);
    }

    fn random_graph() -> impl Strategy<Value = (Vec<NodeId>, Vec<(NodeId, NodeId)>)> {
        (1usize..=22).prop_flat_map(|n| {
            let pairs: Vec<(NodeId, NodeId)> = (1..=n as NodeId)
                .flat_map(|a| ((a + 1)..=n as NodeId).map(move |b| (a, b)))
                .collect();
            let m = pairs.len();
            (Just((1..=n as NodeId).collect::<Vec<_>>()), prop::collection::vec(any::<bool>(), m))
                .prop_map(move |(ids, keep)| {
                    let edges = pairs.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect();
                    (ids, edges)
                })
        })
    }

    proptest! {
        #[test]
        fn propagation_matches_entrywise_definition((ids, edges) in random_graph()) {
            let g = build_graph(&ids, &edges).unwrap();
            let n = g.node_count();
            let a = g.adjacency();
            let deg: Vec<f64> = (0..n).map(|i| 1.0 + (0..n).map(|j| a.at(i, j)).sum::<f64>()).collect();
            for i in 0..n {
                prop_assert_eq!(a.at(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(a.at(i, j), a.at(j, i));
                    let a_hat = a.at(i, j) + if i == j { 1.0 } else { 0.0 };
                    let expect = a_hat / (deg[i] * deg[j]).sqrt();
                    let p = g.propagation().at(i, j);
                    prop_assert!((p - expect).abs() <= 1e-12);
                    prop_assert!((p - g.propagation().at(j, i)).abs() <= 1e-12);
                    prop_assert!(p >= 0.0);
                    prop_assert_eq!(p != 0.0, a_hat != 0.0);
                }
            }
        }
    }
}
