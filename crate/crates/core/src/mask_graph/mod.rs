//! Class-agnostic 3D detection by view-consensus clustering of 2D masks.
//!
//! Every 2D instance mask is lifted to a 3D point set and becomes a graph
//! node. For each node we record the frames that see it (`F`) and the
//! original masks whose points contain its visible portion in those frames
//! (`M`). Two nodes are linked when the share of their common observer frames
//! in which one mask contains both of them reaches `tau_rate`. Connected
//! components are merged in rounds with a rising minimum observer count, and
//! each surviving instance becomes an axis-aligned box.

mod union_find;
mod voxel;

use std::collections::BTreeSet;

use nalgebra::Point3;
use rayon::prelude::*;

use crate::geometry::{backproject_pixel, box_from_points, visible_indices, Box3D, CameraFrame};
use crate::scene_io::{decode_rle, InstanceMask2D, Scene};

pub use union_find::UnionFind;
pub use voxel::VoxelHash;

/// `(frame_id, mask_id)` of an original 2D mask.
pub type MaskKey = (u32, u32);

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MaskGraphError {
    #[error("containee point set is empty")]
    EmptyContainee,
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeConfig {
    /// Minimum consensus rate for an edge.
    pub tau_rate: f64,
    /// Minimum observer count per merge round; one round per entry.
    pub observer_schedule: Vec<usize>,
    /// Fraction of containee points that must lie near the container.
    pub tau_contain: f64,
    /// Neighbor radius for containment, meters.
    pub contain_radius: f64,
    /// Instances with fewer points are discarded before box fitting.
    pub min_points: usize,
    /// Masks with fewer valid-depth pixels do not become nodes.
    pub min_mask_pixels: usize,
    /// A frame observes a node when at least this many of its points are visible.
    pub min_visible_points: usize,
    /// Occlusion threshold, meters.
    pub tau_occ: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            tau_rate: 0.9,
            observer_schedule: vec![1, 2, 3],
            tau_contain: 0.8,
            contain_radius: 0.04,
            min_points: 50,
            min_mask_pixels: 100,
            min_visible_points: 25,
            tau_occ: crate::geometry::DEFAULT_TAU_OCC,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MaskGraphError> {
        let bad = |m: String| Err(MaskGraphError::InvalidConfig(m));
        if !(self.tau_rate > 0.0 && self.tau_rate <= 1.0) {
            return bad(format!("tau_rate {} must lie in (0, 1]", self.tau_rate));
        }
        if self.observer_schedule.is_empty() {
            return bad("observer schedule is empty".into());
        }
        if self.observer_schedule.windows(2).any(|w| w[1] < w[0]) {
            return bad("observer schedule must be non-decreasing".into());
        }
        if self.observer_schedule[0] == 0 {
            return bad("observer counts must be >= 1".into());
        }
        if !(self.tau_contain > 0.0 && self.tau_contain <= 1.0) {
            return bad(format!("tau_contain {} must lie in (0, 1]", self.tau_contain));
        }
        if !(self.contain_radius > 0.0) || !self.contain_radius.is_finite() {
            return bad(format!("contain_radius {} must be > 0", self.contain_radius));
        }
        if !(self.tau_occ > 0.0) || !self.tau_occ.is_finite() {
            return bad(format!("tau_occ {} must be > 0", self.tau_occ));
        }
        Ok(())
    }
}

/// Backprojects every mask pixel with valid depth, in column-major pixel
/// order. Empty when the mask does not match the frame.
pub fn lift_mask(mask: &InstanceMask2D, frame: &CameraFrame) -> Vec<Point3<f64>> {
    if mask.frame_id != frame.id || mask.rle.width != frame.width() || mask.rle.height != frame.height() {
        return Vec::new();
    }
    let Ok(bits) = decode_rle(&mask.rle) else {
        return Vec::new();
    };
    bits.pixels()
        .filter_map(|(x, y)| {
            let d = frame.depth.get(x, y);
            backproject_pixel((x as f64, y as f64), d, frame).ok()
        })
        .collect()
}

/// Points of `points` that pass the occlusion test in `frame`.
pub fn visible_portion(points: &[Point3<f64>], frame: &CameraFrame, tau_occ: f64) -> Vec<Point3<f64>> {
    let (idx, _) = visible_indices(points, frame, tau_occ);
    idx.into_iter().map(|i| points[i]).collect()
}

/// True when at least `tau_contain` of `containee` lies within
/// `contain_radius` of some `container` point.
pub fn contains(
    container: &[Point3<f64>],
    containee: &[Point3<f64>],
    tau_contain: f64,
    contain_radius: f64,
) -> Result<bool, MaskGraphError> {
    if containee.is_empty() {
        return Err(MaskGraphError::EmptyContainee);
    }
    Ok(VoxelHash::new(container, contain_radius).covers(containee, tau_contain))
}

/// Observer and supporter frame counts for a node pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Consensus {
    pub supporters: usize,
    pub observers: usize,
}

impl Consensus {
    /// `supporters / observers`, or 0 without observers.
    pub fn rate(&self) -> f64 {
        if self.observers == 0 {
            0.0
        } else {
            self.supporters as f64 / self.observers as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskNode {
    /// Smallest original node index among the members.
    pub node_id: usize,
    pub members: BTreeSet<MaskKey>,
    pub points: Vec<Point3<f64>>,
    /// `F`: frames seeing at least `min_visible_points` of the node.
    pub visible_frames: BTreeSet<u32>,
    /// `M`: original masks containing the node's visible portion.
    pub containing_masks: BTreeSet<MaskKey>,
}

/// Consensus between two nodes: observers are the shared visible frames,
/// supporters the observer frames holding a mask that contains both.
pub fn consensus_rate(a: &MaskNode, b: &MaskNode) -> Consensus {
    let observers: BTreeSet<u32> = a.visible_frames.intersection(&b.visible_frames).copied().collect();
    let supporters: BTreeSet<u32> = a
        .containing_masks
        .intersection(&b.containing_masks)
        .map(|&(f, _)| f)
        .filter(|f| observers.contains(f))
        .collect();
    Consensus {
        supporters: supporters.len(),
        observers: observers.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub consensus: Consensus,
}

impl Edge {
    pub fn rate(&self) -> f64 {
        self.consensus.rate()
    }

    pub fn observers(&self) -> usize {
        self.consensus.observers
    }
}

struct Container {
    key: MaskKey,
    hash: VoxelHash,
}

/// Per-frame containment targets: every original mask with lifted points.
struct ContainerIndex {
    by_frame: Vec<Vec<Container>>,
}

pub struct MaskGraph<'s> {
    scene: &'s Scene,
    config: MergeConfig,
    containers: std::sync::Arc<ContainerIndex>,
    pub nodes: Vec<MaskNode>,
    /// Sorted by `(a, b)`, `a < b`, indices into `nodes`.
    pub edges: Vec<Edge>,
}

impl std::fmt::Debug for MaskGraph<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskGraph")
            .field("nodes", &self.nodes.len())
            .field("edges", &self.edges)
            .finish_non_exhaustive()
    }
}

impl<'s> MaskGraph<'s> {
    pub fn config(&self) -> &MergeConfig {
        &self.config
    }

    /// Recomputes `F` and fresh containment for `points`, as seen by the
    /// frames of the scene. Member frames always count as visible.
    fn relations(&self, points: &[Point3<f64>], members: &BTreeSet<MaskKey>) -> (BTreeSet<u32>, BTreeSet<MaskKey>) {
        relations(self.scene, &self.config, &self.containers, points, members)
    }

    fn build_edges(nodes: &[MaskNode], tau_rate: f64) -> Vec<Edge> {
        let n = nodes.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        pairs
            .par_iter()
            .filter_map(|&(a, b)| {
                let c = consensus_rate(&nodes[a], &nodes[b]);
                (c.observers > 0 && c.rate() >= tau_rate).then_some(Edge { a, b, consensus: c })
            })
            .collect()
    }
}

fn relations(
    scene: &Scene,
    config: &MergeConfig,
    containers: &ContainerIndex,
    points: &[Point3<f64>],
    members: &BTreeSet<MaskKey>,
) -> (BTreeSet<u32>, BTreeSet<MaskKey>) {
    let member_frames: BTreeSet<u32> = members.iter().map(|&(f, _)| f).collect();
    let mut visible = BTreeSet::new();
    let mut containing = BTreeSet::new();
    for (fi, frame) in scene.frames.iter().enumerate() {
        let portion = visible_portion(points, frame, config.tau_occ);
        if portion.len() < config.min_visible_points && !member_frames.contains(&frame.id) {
            continue;
        }
        visible.insert(frame.id);
        if portion.is_empty() {
            continue;
        }
        for c in &containers.by_frame[fi] {
            if c.hash.covers(&portion, config.tau_contain) {
                containing.insert(c.key);
            }
        }
    }
    (visible, containing)
}

/// Lifts all masks, computes visibility and containment, and links node
/// pairs whose consensus rate reaches `tau_rate`.
pub fn build_graph<'s>(scene: &'s Scene, config: &MergeConfig) -> Result<MaskGraph<'s>, MaskGraphError> {
    config.validate()?;
    let lifted: Vec<(MaskKey, Vec<Point3<f64>>)> = scene
        .masks
        .par_iter()
        .map(|m| {
            let pts = scene.frame(m.frame_id).map(|f| lift_mask(m, f)).unwrap_or_default();
            ((m.frame_id, m.mask_id), pts)
        })
        .collect();

    let by_frame: Vec<Vec<Container>> = scene
        .frames
        .iter()
        .map(|f| {
            lifted
                .iter()
                .filter(|((fid, _), pts)| *fid == f.id && !pts.is_empty())
                .map(|(key, pts)| Container {
                    key: *key,
                    hash: VoxelHash::new(pts, config.contain_radius),
                })
                .collect()
        })
        .collect();
    let containers = std::sync::Arc::new(ContainerIndex { by_frame });

    let seeds: Vec<(MaskKey, Vec<Point3<f64>>)> = lifted
        .into_iter()
        .filter(|(_, pts)| pts.len() >= config.min_mask_pixels)
        .collect();
    let nodes: Vec<MaskNode> = seeds
        .into_par_iter()
        .enumerate()
        .map(|(node_id, (key, points))| {
            let members = BTreeSet::from([key]);
            let (visible_frames, containing_masks) = relations(scene, config, &containers, &points, &members);
            MaskNode {
                node_id,
                members,
                points,
                visible_frames,
                containing_masks,
            }
        })
        .collect();
    let edges = MaskGraph::build_edges(&nodes, config.tau_rate);
    Ok(MaskGraph {
        scene,
        config: config.clone(),
        containers,
        nodes,
        edges,
    })
}

/// Drops edges with fewer than `min_observers` observers, collapses each
/// connected component into one node and recomputes the edges.
pub fn merge_step<'s>(graph: &MaskGraph<'s>, min_observers: usize) -> MaskGraph<'s> {
    let mut uf = UnionFind::new(graph.nodes.len());
    for e in graph.edges.iter().filter(|e| e.observers() >= min_observers) {
        uf.union(e.a, e.b);
    }
    let nodes: Vec<MaskNode> = uf
        .components()
        .into_par_iter()
        .map(|comp| {
            if comp.len() == 1 {
                return graph.nodes[comp[0]].clone();
            }
            let parts: Vec<&MaskNode> = comp.iter().map(|&i| &graph.nodes[i]).collect();
            let members: BTreeSet<MaskKey> = parts.iter().flat_map(|n| n.members.iter().copied()).collect();
            let points: Vec<Point3<f64>> = parts.iter().flat_map(|n| n.points.iter().copied()).collect();
            let (visible_frames, fresh) = graph.relations(&points, &members);
            let containing_masks = parts
                .iter()
                .flat_map(|n| n.containing_masks.iter().copied())
                .chain(fresh)
                .collect();
            MaskNode {
                node_id: parts.iter().map(|n| n.node_id).min().expect("non-empty component"),
                members,
                points,
                visible_frames,
                containing_masks,
            }
        })
        .collect();
    let edges = MaskGraph::build_edges(&nodes, graph.config.tau_rate);
    MaskGraph {
        scene: graph.scene,
        config: graph.config.clone(),
        containers: graph.containers.clone(),
        nodes,
        edges,
    }
}

/// Builds the graph and runs every merge round, returning the final
/// instances with at least `min_points` points, largest first (ties by node id).
pub fn cluster_instances(scene: &Scene, config: &MergeConfig) -> Result<Vec<MaskNode>, MaskGraphError> {
    let mut graph = build_graph(scene, config)?;
    for &n_k in &config.observer_schedule {
        graph = merge_step(&graph, n_k);
    }
    let mut instances: Vec<MaskNode> = graph
        .nodes
        .into_iter()
        .filter(|n| n.points.len() >= config.min_points)
        .collect();
    instances.sort_by(|a, b| b.points.len().cmp(&a.points.len()).then(a.node_id.cmp(&b.node_id)));
    Ok(instances)
}

/// Class-agnostic boxes, one per surviving instance. Instances whose points
/// collapse to zero extent on some axis are skipped.
pub fn detect_class_agnostic(scene: &Scene, config: &MergeConfig) -> Result<Vec<Box3D>, MaskGraphError> {
    Ok(cluster_instances(scene, config)?
        .iter()
        .filter_map(|n| box_from_points(&n.points).ok())
        .filter(|b| !b.is_degenerate())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DepthMap, Intrinsics};
    use nalgebra::Matrix4;

    fn node(frames: &[u32], masks: &[MaskKey]) -> MaskNode {
        MaskNode {
            node_id: 0,
            members: BTreeSet::new(),
            points: vec![Point3::origin()],
            visible_frames: frames.iter().copied().collect(),
            containing_masks: masks.iter().copied().collect(),
        }
    }

    #[test]
    fn consensus_self_and_disjoint() {
        let a = node(&[0, 1], &[(0, 0), (1, 2)]);
        let c = consensus_rate(&a, &a);
        assert_eq!(c, Consensus { supporters: 2, observers: 2 });
        assert_eq!(c.rate(), 1.0);
        let b = node(&[3], &[(3, 0)]);
        let c = consensus_rate(&a, &b);
        assert_eq!(c, Consensus { supporters: 0, observers: 0 });
        assert_eq!(c.rate(), 0.0);
    }

    #[test]
    fn consensus_two_of_three() {
        let a = node(&[0, 1, 2], &[(0, 0), (1, 0), (2, 1)]);
        let b = node(&[0, 1, 2], &[(0, 0), (1, 0), (2, 2)]);
        let c = consensus_rate(&a, &b);
        assert_eq!(c, Consensus { supporters: 2, observers: 3 });
        assert_eq!(consensus_rate(&b, &a), c);
    }

    #[test]
    fn containment_cases() {
        let pts: Vec<_> = (0..10).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        assert!(contains(&pts, &pts, 1.0, 0.04).unwrap());
        let far: Vec<_> = pts.iter().map(|p| p + nalgebra::Vector3::new(1.0, 0.0, 0.0)).collect();
        assert!(!contains(&pts, &far, 0.1, 0.04).unwrap());
        assert_eq!(contains(&pts, &[], 0.8, 0.04), Err(MaskGraphError::EmptyContainee));
    }

    #[test]
    fn containment_at_eighty_percent() {
        let container: Vec<_> = (0..8).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let containee: Vec<_> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(contains(&container, &containee, 0.8, 0.04).unwrap());
        assert!(!contains(&container, &containee, 0.85, 0.04).unwrap());
    }

    #[test]
    fn lift_single_pixel_at_principal_point() {
        let mut depth = DepthMap::filled(5, 5, 0.0);
        depth.set(2, 2, 2.0);
        let f = CameraFrame::new(0, Intrinsics::new(10.0, 10.0, 2.0, 2.0), Matrix4::identity(), depth).unwrap();
        let mut bits = crate::scene_io::Bitmap::new(5, 5);
        bits.set(2, 2, true);
        bits.set(0, 0, true);
        let m = InstanceMask2D { frame_id: 0, mask_id: 0, rle: crate::scene_io::encode_rle(&bits) };
        assert_eq!(lift_mask(&m, &f), vec![Point3::new(0.0, 0.0, 2.0)]);
    }

    #[test]
    fn config_validation() {
        assert!(MergeConfig::default().validate().is_ok());
        let c = MergeConfig { observer_schedule: vec![2, 1], ..Default::default() };
        assert!(c.validate().is_err());
        let c = MergeConfig { observer_schedule: vec![], ..Default::default() };
        assert!(c.validate().is_err());
        let c = MergeConfig { tau_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
