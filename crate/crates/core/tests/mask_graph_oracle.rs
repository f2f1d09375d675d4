//! Consensus rates and merge rounds checked against brute-force recomputation
//! on random micro-scenes.

use std::collections::BTreeSet;

use nalgebra::{Point3, Vector3, Vector4};
use ovdet3d::geometry::CameraFrame;
use ovdet3d::mask_graph::{build_graph, cluster_instances, consensus_rate, merge_step, MaskKey, MergeConfig};
use ovdet3d::scene_io::{decode_rle, Scene};
use ovdet3d::synth::micro_scene;

fn micro_config() -> MergeConfig {
    MergeConfig {
        min_mask_pixels: 5,
        min_visible_points: 5,
        contain_radius: 0.12,
        min_points: 10,
        ..MergeConfig::default()
    }
}

/// Pinhole lift straight from the pose matrix.
fn lift(scene: &Scene, key: MaskKey) -> Vec<Point3<f64>> {
    let frame = scene.frame(key.0).unwrap();
    let mask = scene.masks.iter().find(|m| (m.frame_id, m.mask_id) == key).unwrap();
    let bits = decode_rle(&mask.rle).unwrap();
    let inv = frame.world_to_camera().try_inverse().unwrap();
    let k = frame.intrinsics;
    let mut out = Vec::new();
    for x in 0..bits.width() {
        for y in 0..bits.height() {
            let d = frame.depth.get(x, y);
            if bits.get(x, y) && d > 0.0 {
                let c = Vector4::new((x as f64 - k.cx) / k.fx * d, (y as f64 - k.cy) / k.fy * d, d, 1.0);
                let w = inv * c;
                out.push(Point3::new(w.x, w.y, w.z));
            }
        }
    }
    out
}

fn visible(points: &[Point3<f64>], frame: &CameraFrame, tau_occ: f64) -> Vec<Point3<f64>> {
    let m = frame.world_to_camera();
    let inv = m.try_inverse().unwrap();
    let k = frame.intrinsics;
    points
        .iter()
        .filter(|p| {
            let c = m * p.to_homogeneous();
            if c.z <= 1e-6 {
                return false;
            }
            let (u, v) = (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
            if u < 0.0 || v < 0.0 || u >= frame.width() as f64 || v >= frame.height() as f64 {
                return false;
            }
            let (x, y) = (u.round(), v.round());
            if x >= frame.width() as f64 || y >= frame.height() as f64 {
                return false;
            }
            let d = frame.depth.get(x as u32, y as u32);
            if d <= 0.0 {
                return false;
            }
            let s = inv * Vector4::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d, 1.0);
            (Vector3::new(s.x, s.y, s.z) - p.coords).norm() < tau_occ
        })
        .copied()
        .collect()
}

fn covered(container: &[Point3<f64>], containee: &[Point3<f64>], cfg: &MergeConfig) -> bool {
    let hits = containee
        .iter()
        .filter(|q| container.iter().any(|p| (p - *q).norm() <= cfg.contain_radius))
        .count();
    hits as f64 / containee.len() as f64 >= cfg.tau_contain
}

/// `F` and `M` of a single original mask, by exhaustive search.
fn relations(scene: &Scene, key: MaskKey, cfg: &MergeConfig) -> (BTreeSet<u32>, BTreeSet<MaskKey>) {
    let pts = lift(scene, key);
    let mut f_set = BTreeSet::new();
    let mut m_set = BTreeSet::new();
    for frame in &scene.frames {
        let vis = visible(&pts, frame, cfg.tau_occ);
        if vis.len() < cfg.min_visible_points && frame.id != key.0 {
            continue;
        }
        f_set.insert(frame.id);
        if vis.is_empty() {
            continue;
        }
        for m in scene.masks_in_frame(frame.id) {
            let other = lift(scene, (m.frame_id, m.mask_id));
            if covered(&other, &vis, cfg) {
                m_set.insert((m.frame_id, m.mask_id));
            }
        }
    }
    (f_set, m_set)
}

/// `(supporters, observers)` by enumerating frames.
fn oracle(a: &(BTreeSet<u32>, BTreeSet<MaskKey>), b: &(BTreeSet<u32>, BTreeSet<MaskKey>), scene: &Scene) -> (usize, usize) {
    let mut supporters = 0;
    let mut observers = 0;
    for frame in &scene.frames {
        if !(a.0.contains(&frame.id) && b.0.contains(&frame.id)) {
            continue;
        }
        observers += 1;
        if scene
            .masks_in_frame(frame.id)
            .iter()
            .any(|m| a.1.contains(&(m.frame_id, m.mask_id)) && b.1.contains(&(m.frame_id, m.mask_id)))
        {
            supporters += 1;
        }
    }
    (supporters, observers)
}

#[test]
fn consensus_matches_brute_force_on_random_scenes() {
    let cfg = micro_config();
    let mut fractional = 0;
    let mut pairs = 0;
    for seed in 0..100 {
        let scene = micro_scene(seed, 6, 4);
        let graph = build_graph(&scene, &cfg).unwrap();
        let rel: Vec<_> = graph
            .nodes
            .iter()
            .map(|n| relations(&scene, *n.members.iter().next().unwrap(), &cfg))
            .collect();
        for (n, r) in graph.nodes.iter().zip(&rel) {
            assert_eq!(n.visible_frames, r.0, "seed {seed}: F of {:?}", n.members);
            assert_eq!(n.containing_masks, r.1, "seed {seed}: M of {:?}", n.members);
        }
        for a in 0..graph.nodes.len() {
            for b in a + 1..graph.nodes.len() {
                let (s, o) = oracle(&rel[a], &rel[b], &scene);
                let c = consensus_rate(&graph.nodes[a], &graph.nodes[b]);
                assert_eq!((c.supporters, c.observers), (s, o), "seed {seed} pair {a},{b}");
                let expect_edge = o > 0 && s as f64 / o as f64 >= cfg.tau_rate;
                let has_edge = graph.edges.iter().any(|e| (e.a, e.b) == (a, b));
                assert_eq!(has_edge, expect_edge, "seed {seed} pair {a},{b}");
                pairs += 1;
                if s > 0 && s < o {
                    fractional += 1;
                }
            }
        }
    }
    // the scenes must exercise more than the all-or-nothing cases
    assert!(pairs > 200, "only {pairs} pairs");
    assert!(fractional > 10, "only {fractional} fractional rates");
}

#[test]
fn consensus_is_symmetric_and_bounded() {
    let cfg = micro_config();
    for seed in 100..130 {
        let scene = micro_scene(seed, 6, 4);
        let graph = build_graph(&scene, &cfg).unwrap();
        for a in &graph.nodes {
            for b in &graph.nodes {
                let ab = consensus_rate(a, b);
                assert_eq!(ab, consensus_rate(b, a));
                assert!(ab.supporters <= ab.observers);
                assert!((0.0..=1.0).contains(&ab.rate()));
            }
        }
    }
}

#[test]
fn merge_rounds_partition_masks_and_conserve_points() {
    let cfg = micro_config();
    for seed in 200..240 {
        let scene = micro_scene(seed, 6, 4);
        let mut graph = build_graph(&scene, &cfg).unwrap();
        let originals: BTreeSet<MaskKey> = graph.nodes.iter().flat_map(|n| n.members.iter().copied()).collect();
        let total_points: usize = graph.nodes.iter().map(|n| n.points.len()).sum();
        let sorted_points = |g: &ovdet3d::mask_graph::MaskGraph| {
            let mut v: Vec<[u64; 3]> = g
                .nodes
                .iter()
                .flat_map(|n| n.points.iter().map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]))
                .collect();
            v.sort_unstable();
            v
        };
        let before = sorted_points(&graph);
        for &n_k in &cfg.observer_schedule {
            let prev = graph.nodes.len();
            graph = merge_step(&graph, n_k);
            assert!(graph.nodes.len() <= prev, "seed {seed}: merge grew the node count");
            let mut seen = BTreeSet::new();
            for n in &graph.nodes {
                assert!(!n.members.is_empty());
                for m in &n.members {
                    assert!(seen.insert(*m), "seed {seed}: mask {m:?} in two nodes");
                }
                let frames: BTreeSet<u32> = n.members.iter().map(|m| m.0).collect();
                assert!(frames.is_subset(&n.visible_frames));
                assert!(n.containing_masks.iter().all(|m| n.visible_frames.contains(&m.0)));
            }
            assert_eq!(seen, originals, "seed {seed}: members are not a partition");
            assert_eq!(graph.nodes.iter().map(|n| n.points.len()).sum::<usize>(), total_points);
        }
        assert_eq!(sorted_points(&graph), before, "seed {seed}: point multiset changed");
    }
}

#[test]
fn clustering_is_deterministic() {
    let cfg = micro_config();
    for seed in 300..310 {
        let scene = micro_scene(seed, 6, 4);
        let a = cluster_instances(&scene, &cfg).unwrap();
        let b = cluster_instances(&scene, &cfg).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = single.install(|| cluster_instances(&scene, &cfg).unwrap());
        assert_eq!(a, c);
        assert!(a.iter().all(|n| n.points.len() >= cfg.min_points));
        assert!(a.windows(2).all(|w| w[0].points.len() >= w[1].points.len()));
    }
}

#[test]
fn small_instances_are_dropped() {
    let scene = micro_scene(5, 6, 4);
    let cfg = MergeConfig { min_points: usize::MAX, ..micro_config() };
    assert!(cluster_instances(&scene, &cfg).unwrap().is_empty());
    let empty = Scene { masks: vec![], ..scene };
    assert!(cluster_instances(&empty, &micro_config()).unwrap().is_empty());
}

#[test]
fn planar_depth_lifts_onto_the_plane() {
    use ovdet3d::geometry::{compose_pose, DepthMap, Intrinsics};
    use ovdet3d::mask_graph::lift_mask;
    use ovdet3d::scene_io::{encode_rle, Bitmap, InstanceMask2D};
    use nalgebra::Rotation3;

    // plane n·X = c in world coordinates, seen by a tilted camera
    let n = Vector3::new(0.2, -0.3, 1.0).normalize();
    let c = 0.4;
    let r = *Rotation3::from_euler_angles(2.5, 0.2, -0.4).matrix();
    let t = Vector3::new(0.1, -0.2, 3.0);
    let k = Intrinsics::new(50.0, 50.0, 31.5, 23.5);
    let (w, h) = (64u32, 48u32);
    let center = -(r.transpose() * t);
    let mut depth = DepthMap::filled(w, h, 0.0);
    let mut bits = Bitmap::new(w, h);
    for x in 0..w {
        for y in 0..h {
            let ray_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let ray = r.transpose() * ray_cam;
            let d = (c - n.dot(&center)) / n.dot(&ray);
            if d > 0.0 {
                depth.set(x, y, d);
                bits.set(x, y, true);
            }
        }
    }
    let frame = CameraFrame::new(0, k, compose_pose(&r, &t), depth).unwrap();
    let mask = InstanceMask2D { frame_id: 0, mask_id: 0, rle: encode_rle(&bits) };
    let pts = lift_mask(&mask, &frame);
    assert_eq!(pts.len(), bits.area());
    assert!(!pts.is_empty());
    for p in &pts {
        assert!((n.dot(&p.coords) - c).abs() < 1e-6);
    }
}

#[test]
fn invalid_depth_lifts_to_nothing() {
    let scene = micro_scene(11, 6, 4);
    let mut frame = scene.frames[0].clone();
    frame.depth = ovdet3d::geometry::DepthMap::filled(frame.width(), frame.height(), 0.0);
    for m in scene.masks_in_frame(frame.id) {
        assert!(ovdet3d::mask_graph::lift_mask(m, &frame).is_empty());
    }
}
