//! Seeded synthetic navigation worlds.
//!
//! A [`World`] is a connected graph of viewpoints with metric positions.
//! Every viewpoint carries a fixed panorama of [`VIEWS_PER_PANORAMA`] views
//! at evenly spaced headings; the views that point at graph neighbours are
//! navigable. Landmark tags on each view stand in for the RGB image.
//!
//! Headings follow a compass convention: `0` looks along `+y`, positive
//! angles turn toward `+x`. The agent keeps the world-frame heading
//! [`AGENT_HEADING`] throughout an episode, so relative directions are
//! measured against a fixed frame.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cotforge::{map_direction, normalize_angle, relative_heading};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const VIEWS_PER_PANORAMA: usize = 12;
pub const HEADING_STEP: f64 = PI / 6.0;
pub const ELEVATIONS: [f64; 3] = [-PI / 6.0, 0.0, PI / 6.0];
/// Sampling weights for [`ELEVATIONS`]; most views are level.
const ELEVATION_WEIGHTS: [f64; 3] = [0.15, 0.70, 0.15];
pub const AGENT_HEADING: f64 = 0.0;
pub const WORLD_EXTENT: [f64; 3] = [20.0, 20.0, 3.0];
pub const MAX_DEGREE: usize = VIEWS_PER_PANORAMA;
const EDGE_LENGTH_TOLERANCE: f64 = 1e-9;

const LANDMARK_POOL: [&str; 48] = [
    "sofa", "lamp", "door", "hallway", "bed", "table", "chair", "window", "stairs", "rug",
    "plant", "sink", "mirror", "shelf", "painting", "fireplace", "counter", "toilet", "bathtub",
    "desk", "cabinet", "piano", "clock", "vase", "curtain", "pillow", "television", "fridge",
    "oven", "bench", "railing", "archway", "closet", "dresser", "wardrobe", "statue", "column",
    "carpet", "ottoman", "bookcase", "towel", "shower", "stool", "armchair", "fountain",
    "balcony", "doorway", "kitchen",
];

/// First `count` landmark names. Names past the built-in pool are
/// synthesized as `landmarkN`.
pub fn landmark_pool(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| match LANDMARK_POOL.get(i) {
            Some(name) => (*name).to_string(),
            None => format!("landmark{i}"),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: usize,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub landmark_tags: Vec<String>,
    pub heading: f64,
    pub elevation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Navigable {
    pub view_index: usize,
    pub neighbor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub views: Vec<View>,
    /// Sorted by `view_index`, i.e. in panorama heading order.
    pub navigable: Vec<Navigable>,
}

impl Observation {
    pub fn n_navigable(&self) -> usize {
        self.navigable.len()
    }

    pub fn candidate_view(&self, nav_index: usize) -> &View {
        &self.views[self.navigable[nav_index].view_index]
    }

    pub fn index_of_neighbor(&self, neighbor: usize) -> Option<usize> {
        self.navigable.iter().position(|n| n.neighbor == neighbor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Index into the observation's navigable list.
    Move(usize),
    Stop,
}

impl Action {
    /// Position in the `N + 1` action space, stop last.
    pub fn index(self, n_navigable: usize) -> usize {
        match self {
            Action::Move(i) => i,
            Action::Stop => n_navigable,
        }
    }

    pub fn from_index(index: usize, n_navigable: usize) -> Action {
        if index >= n_navigable {
            Action::Stop
        } else {
            Action::Move(index)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldRecord {
    seed: u64,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<Edge>,
    landmark_vocab: Vec<String>,
    panoramas: Vec<Vec<View>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldRecord", into = "WorldRecord")]
pub struct World {
    seed: u64,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<Edge>,
    landmark_vocab: Vec<String>,
    panoramas: Vec<Vec<View>>,
    adjacency: Vec<Vec<(usize, f64)>>,
    navigable: Vec<Vec<Navigable>>,
}

impl From<World> for WorldRecord {
    fn from(w: World) -> Self {
        WorldRecord {
            seed: w.seed,
            viewpoints: w.viewpoints,
            edges: w.edges,
            landmark_vocab: w.landmark_vocab,
            panoramas: w.panoramas,
        }
    }
}

impl TryFrom<WorldRecord> for World {
    type Error = Error;

    fn try_from(r: WorldRecord) -> Result<Self> {
        World::assemble(r.seed, r.viewpoints, r.edges, r.landmark_vocab, r.panoramas)
    }
}

fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d: [f64; 3] = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn bearing(from: [f64; 3], to: [f64; 3]) -> f64 {
    (to[0] - from[0]).atan2(to[1] - from[1])
}

/// Heading of panorama view `k`; view 0 looks along `-π`.
pub fn view_heading(k: usize) -> f64 {
    -PI + k as f64 * HEADING_STEP
}

fn angular_gap(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

impl World {
    fn assemble(
        seed: u64,
        viewpoints: Vec<Viewpoint>,
        edges: Vec<Edge>,
        landmark_vocab: Vec<String>,
        panoramas: Vec<Vec<View>>,
    ) -> Result<World> {
        let n = viewpoints.len();
        if n < 2 {
            return Err(Error::InvalidInput("world needs at least two viewpoints".into()));
        }
        for (i, vp) in viewpoints.iter().enumerate() {
            if vp.id != i {
                return Err(Error::InvalidInput(format!("viewpoint ids must be dense, got {} at {i}", vp.id)));
            }
            if vp.position.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!("viewpoint {i} has a non-finite position")));
            }
        }
        if panoramas.len() != n || panoramas.iter().any(|p| p.len() != VIEWS_PER_PANORAMA) {
            return Err(Error::InvalidInput("every viewpoint needs a full panorama".into()));
        }
        let vocab: BTreeSet<&str> = landmark_vocab.iter().map(String::as_str).collect();
        for view in panoramas.iter().flatten() {
            if view.landmark_tags.is_empty()
                || view.landmark_tags.iter().any(|t| !vocab.contains(t.as_str()))
            {
                return Err(Error::InvalidInput("view tags must be non-empty and in the vocabulary".into()));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for e in &edges {
            if e.a >= n || e.b >= n || e.a == e.b {
                return Err(Error::InvalidInput(format!("bad edge {}-{}", e.a, e.b)));
            }
            let expected = euclidean(viewpoints[e.a].position, viewpoints[e.b].position);
            if (expected - e.length).abs() > EDGE_LENGTH_TOLERANCE {
                return Err(Error::InvalidInput(format!("edge {}-{} length mismatch", e.a, e.b)));
            }
            adjacency[e.a].push((e.b, e.length));
            adjacency[e.b].push((e.a, e.length));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidInput("duplicate edge".into()));
            }
            if list.len() > MAX_DEGREE {
                return Err(Error::InvalidInput("viewpoint degree exceeds the panorama size".into()));
            }
        }
        let mut world = World {
            seed,
            viewpoints,
            edges,
            landmark_vocab,
            panoramas,
            adjacency,
            navigable: Vec::new(),
        };
        if !world.is_connected() {
            return Err(Error::InvalidInput("world graph is not connected".into()));
        }
        world.navigable = (0..n).map(|i| world.assign_navigable(i)).collect();
        Ok(world)
    }

    /// Maps each neighbour to the free panorama view closest to its bearing.
    /// Neighbours closest to a view centre claim first.
    fn assign_navigable(&self, at: usize) -> Vec<Navigable> {
        let here = self.viewpoints[at].position;
        let mut wanted: Vec<(f64, usize, f64)> = self.adjacency[at]
            .iter()
            .map(|&(j, _)| {
                let b = bearing(here, self.viewpoints[j].position);
                let gap = (0..VIEWS_PER_PANORAMA)
                    .map(|k| angular_gap(b, view_heading(k)))
                    .fold(f64::INFINITY, f64::min);
                (gap, j, b)
            })
            .collect();
        wanted.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut taken = [false; VIEWS_PER_PANORAMA];
        let mut out = Vec::with_capacity(wanted.len());
        for (_, j, b) in wanted {
            let k = (0..VIEWS_PER_PANORAMA)
                .filter(|&k| !taken[k])
                .min_by(|&x, &y| {
                    angular_gap(b, view_heading(x))
                        .total_cmp(&angular_gap(b, view_heading(y)))
                        .then(x.cmp(&y))
                })
                .expect("degree never exceeds the panorama size");
            taken[k] = true;
            out.push(Navigable { view_index: k, neighbor: j });
        }
        out.sort_by_key(|n| n.view_index);
        out
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.viewpoints.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &(j, _) in &self.adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_nodes(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn viewpoints(&self) -> &[Viewpoint] {
        &self.viewpoints
    }

    pub fn position(&self, id: usize) -> [f64; 3] {
        self.viewpoints[id].position
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn landmark_vocab(&self) -> &[String] {
        &self.landmark_vocab
    }

    /// Neighbours of `id` with edge lengths, sorted by neighbour id.
    pub fn neighbors(&self, id: usize) -> &[(usize, f64)] {
        &self.adjacency[id]
    }

    pub fn degree(&self, id: usize) -> usize {
        self.adjacency[id].len()
    }

    pub fn edge_length(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|&&(j, _)| j == b)
            .map(|&(_, l)| l)
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.edge_length(a, b).is_some()
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id < self.viewpoints.len() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("unknown viewpoint id {id}")))
        }
    }

    pub fn observe(&self, at: usize) -> Result<Observation> {
        self.check_id(at)?;
        Ok(Observation {
            views: self.panoramas[at].clone(),
            navigable: self.navigable[at].clone(),
        })
    }

    /// Metric-shortest path; equal-length paths resolve to the
    /// lexicographically smallest id sequence.
    pub fn shortest_path(&self, a: usize, b: usize) -> Result<(Vec<usize>, f64)> {
        self.check_id(a)?;
        self.check_id(b)?;
        let tree = self.shortest_path_tree(a);
        let (dist, path) = tree[b].clone().expect("graph is connected");
        Ok((path, dist))
    }

    /// Geodesic distances from `source` to every viewpoint.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let n = self.n_nodes();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: source, path: Vec::new() });
        while let Some(HeapEntry { dist: d, node, .. }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &(j, len) in &self.adjacency[node] {
                let nd = d + len;
                if nd < dist[j] {
                    dist[j] = nd;
                    heap.push(HeapEntry { dist: nd, node: j, path: Vec::new() });
                }
            }
        }
        dist
    }

    pub fn geodesic(&self, a: usize, b: usize) -> f64 {
        self.distances_from(a)[b]
    }

    /// Dijkstra over (distance, path) labels ordered lexicographically.
    fn shortest_path_tree(&self, source: usize) -> Vec<Option<(f64, Vec<usize>)>> {
        let n = self.n_nodes();
        let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        best[source] = Some((0.0, vec![source]));
        heap.push(HeapEntry { dist: 0.0, node: source, path: vec![source] });
        while let Some(entry) = heap.pop() {
            if done[entry.node] {
                continue;
            }
            match &best[entry.node] {
                Some((d, p)) if *d == entry.dist && *p == entry.path => {}
                _ => continue,
            }
            done[entry.node] = true;
            for &(j, len) in &self.adjacency[entry.node] {
                if done[j] {
                    continue;
                }
                let nd = entry.dist + len;
                let mut np = entry.path.clone();
                np.push(j);
                let better = match &best[j] {
                    None => true,
                    Some((d, p)) => nd < *d || (nd == *d && np < *p),
                };
                if better {
                    best[j] = Some((nd, np.clone()));
                    heap.push(HeapEntry { dist: nd, node: j, path: np });
                }
            }
        }
        best
    }
}

#[derive(Debug)]
struct HeapEntry {
    dist: f64,
    node: usize,
    path: Vec<usize>,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.path.cmp(&self.path))
            .then_with(|| other.node.cmp(&self.node))
    }
}

fn sample_elevation(rng: &mut impl rand::Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (e, w) in ELEVATIONS.iter().zip(ELEVATION_WEIGHTS) {
        acc += w;
        if u < acc {
            return *e;
        }
    }
    ELEVATIONS[ELEVATIONS.len() - 1]
}

/// Builds a connected world: a nearest-predecessor spanning tree over a random
/// insertion order, then the shortest (jittered) remaining pairs until the
/// edge budget `round(n_nodes * avg_degree / 2)` is met.
pub fn generate_world(seed: u64, n_nodes: usize, avg_degree: f64, vocab_size: usize) -> Result<World> {
    if n_nodes < 2 {
        return Err(Error::InvalidConfig("n_nodes must be at least 2".into()));
    }
    if vocab_size < 8 {
        return Err(Error::InvalidConfig("vocab_size must be at least 8".into()));
    }
    if !avg_degree.is_finite() {
        return Err(Error::InvalidConfig("avg_degree must be finite".into()));
    }
    let target_edges = (n_nodes as f64 * avg_degree / 2.0).round();
    let max_edges = (n_nodes * (n_nodes - 1) / 2).min(n_nodes * MAX_DEGREE / 2);
    if target_edges < (n_nodes - 1) as f64 || target_edges > max_edges as f64 {
        return Err(Error::InvalidConfig(format!(
            "avg_degree {avg_degree} cannot yield a connected graph on {n_nodes} nodes \
             (needs {}..={max_edges} edges)",
            n_nodes - 1
        )));
    }
    let target_edges = target_edges as usize;
    let mut rng = rng_from(seed);

    let positions: Vec<[f64; 3]> = (0..n_nodes)
        .map(|_| {
            [
                rng.random::<f64>() * WORLD_EXTENT[0],
                rng.random::<f64>() * WORLD_EXTENT[1],
                rng.random::<f64>() * WORLD_EXTENT[2],
            ]
        })
        .collect();
    let viewpoints: Vec<Viewpoint> = positions
        .iter()
        .enumerate()
        .map(|(id, &position)| Viewpoint { id, position })
        .collect();

    let mut degree = vec![0usize; n_nodes];
    let mut present = BTreeSet::new();
    let mut order: Vec<usize> = (0..n_nodes).collect();
    order.shuffle(&mut rng);
    for i in 1..n_nodes {
        let v = order[i];
        let u = order[..i]
            .iter()
            .copied()
            .filter(|&u| degree[u] < MAX_DEGREE)
            .min_by(|&x, &y| {
                euclidean(positions[v], positions[x])
                    .total_cmp(&euclidean(positions[v], positions[y]))
                    .then(x.cmp(&y))
            })
            .ok_or_else(|| Error::InvalidConfig("degree cap prevents a spanning tree".into()))?;
        present.insert((u.min(v), u.max(v)));
        degree[u] += 1;
        degree[v] += 1;
    }

    let mut extra: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n_nodes {
        for b in a + 1..n_nodes {
            if !present.contains(&(a, b)) {
                let jitter = 1.0 + 0.5 * rng.random::<f64>();
                extra.push((euclidean(positions[a], positions[b]) * jitter, a, b));
            }
        }
    }
    extra.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    for &(_, a, b) in &extra {
        if present.len() >= target_edges {
            break;
        }
        if degree[a] < MAX_DEGREE && degree[b] < MAX_DEGREE {
            present.insert((a, b));
            degree[a] += 1;
            degree[b] += 1;
        }
    }
    if present.len() < target_edges {
        return Err(Error::InvalidConfig("degree cap prevents reaching the edge budget".into()));
    }
    let edges: Vec<Edge> = present
        .iter()
        .map(|&(a, b)| Edge { a, b, length: euclidean(positions[a], positions[b]) })
        .collect();

    let landmark_vocab = landmark_pool(vocab_size);
    let panoramas: Vec<Vec<View>> = (0..n_nodes)
        .map(|_| {
            (0..VIEWS_PER_PANORAMA)
                .map(|k| {
                    let n_tags = rng.random_range(1..=3usize);
                    let landmark_tags: Vec<String> = landmark_vocab
                        .choose_multiple(&mut rng, n_tags)
                        .cloned()
                        .collect();
                    View {
                        landmark_tags,
                        heading: view_heading(k),
                        elevation: sample_elevation(&mut rng),
                    }
                })
                .collect()
        })
        .collect();

    World::assemble(seed, viewpoints, edges, landmark_vocab, panoramas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub instruction: String,
    pub start_id: usize,
    pub goal_id: usize,
    pub gt_path: Vec<usize>,
    /// One entry per viewpoint on `gt_path`; the last is always `Stop`.
    pub gt_actions: Vec<Action>,
}

impl Episode {
    pub fn hops(&self) -> usize {
        self.gt_path.len() - 1
    }

    /// Checks the structural invariants against `world`.
    pub fn validate(&self, world: &World) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("episode {}: {m}", self.seed)));
        if self.gt_path.first() != Some(&self.start_id) || self.gt_path.last() != Some(&self.goal_id) {
            return bad("gt_path endpoints disagree with start/goal");
        }
        if self.gt_actions.len() != self.gt_path.len() {
            return bad("one action per path viewpoint expected");
        }
        let (path, _) = world.shortest_path(self.start_id, self.goal_id)?;
        if path != self.gt_path {
            return bad("gt_path is not the shortest path");
        }
        let mut at = self.start_id;
        for (t, action) in self.gt_actions.iter().enumerate() {
            let obs = world.observe(at)?;
            match *action {
                Action::Move(i) if t + 1 < self.gt_path.len() => {
                    let Some(nav) = obs.navigable.get(i) else {
                        return bad("move index out of range");
                    };
                    if nav.neighbor != self.gt_path[t + 1] {
                        return bad("gt_actions do not replay gt_path");
                    }
                    at = nav.neighbor;
                }
                Action::Stop if t + 1 == self.gt_path.len() => {}
                _ => return bad("gt_actions must move along the path and end with stop"),
            }
        }
        if at != self.goal_id {
            return bad("replay does not end at the goal");
        }
        Ok(())
    }
}

/// Relative heading of the step `from -> to` for an agent facing
/// [`AGENT_HEADING`], falling back to the view heading when the two points
/// coincide horizontally.
pub fn step_heading(world: &World, from: usize, view: &View, to: usize) -> f64 {
    relative_heading(world.position(from), world.position(to), AGENT_HEADING)
        .unwrap_or_else(|_| normalize_angle(view.heading - AGENT_HEADING))
}

/// Samples a (start, goal) pair whose shortest path has `min_hops..=max_hops`
/// hops and narrates the path as an ordered clause list.
pub fn generate_episode(world: &World, seed: u64, min_hops: usize, max_hops: usize) -> Result<Episode> {
    if min_hops < 1 || min_hops > max_hops || max_hops >= world.n_nodes() {
        return Err(Error::InvalidConfig(format!(
            "hop window {min_hops}..={max_hops} invalid for {} nodes",
            world.n_nodes()
        )));
    }
    let mut pairs = Vec::new();
    for s in 0..world.n_nodes() {
        let tree = world.shortest_path_tree(s);
        for (g, entry) in tree.into_iter().enumerate() {
            if g == s {
                continue;
            }
            let (_, path) = entry.expect("graph is connected");
            let hops = path.len() - 1;
            if (min_hops..=max_hops).contains(&hops) {
                pairs.push(path);
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::InfeasibleEpisode { min_hops, max_hops });
    }
    let mut rng = rng_from(seed);
    let gt_path = pairs.swap_remove(rng.random_range(0..pairs.len()));

    let mut clauses = Vec::with_capacity(gt_path.len());
    let mut gt_actions = Vec::with_capacity(gt_path.len());
    for w in gt_path.windows(2) {
        let obs = world.observe(w[0])?;
        let idx = obs.index_of_neighbor(w[1]).expect("path steps are adjacent");
        let view = obs.candidate_view(idx);
        let dir = map_direction(step_heading(world, w[0], view, w[1]), view.elevation);
        clauses.push(format!("go {} toward the {}", dir.instruction_word(), view.landmark_tags[0]));
        gt_actions.push(Action::Move(idx));
    }
    clauses.push("stop".to_string());
    gt_actions.push(Action::Stop);

    Ok(Episode {
        seed,
        instruction: format!("{}.", clauses.join(", then ")),
        start_id: gt_path[0],
        goal_id: *gt_path.last().unwrap(),
        gt_path,
        gt_actions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bfs_reachable(world: &World) -> Vec<bool> {
        let mut seen = vec![false; world.n_nodes()];
        let mut queue = std::collections::VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for e in world.edges() {
                for (x, y) in [(e.a, e.b), (e.b, e.a)] {
                    if x == i && !seen[y] {
                        seen[y] = true;
                        queue.push_back(y);
                    }
                }
            }
        }
        seen
    }

    fn all_simple_paths(world: &World, a: usize, b: usize) -> Vec<(f64, Vec<usize>)> {
        fn walk(w: &World, at: usize, b: usize, path: &mut Vec<usize>, len: f64, out: &mut Vec<(f64, Vec<usize>)>) {
            if at == b {
                out.push((len, path.clone()));
                return;
            }
            for &(j, l) in w.neighbors(at) {
                if !path.contains(&j) {
                    path.push(j);
                    walk(w, j, b, path, len + l, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::new();
        walk(world, a, b, &mut vec![a], 0.0, &mut out);
        out
    }

    #[test]
    fn two_node_world() {
        let w = generate_world(7, 2, 1.0, 8).unwrap();
        assert_eq!(w.edges().len(), 1);
        assert_eq!(bfs_reachable(&w), vec![true, true]);
        let obs = w.observe(0).unwrap();
        assert_eq!(obs.n_navigable(), 1);
        assert_eq!(obs.navigable[0].neighbor, 1);
        let len = w.edges()[0].length;
        assert_eq!(w.shortest_path(0, 1).unwrap(), (vec![0, 1], len));
        assert_eq!(w.shortest_path(1, 1).unwrap(), (vec![1], 0.0));
    }

    #[test]
    fn generation_is_deterministic_and_connected() {
        let a = generate_world(7, 20, 3.0, 24).unwrap();
        let b = generate_world(7, 20, 3.0, 24).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(bfs_reachable(&a).into_iter().all(|r| r));
        assert_eq!(a.edges().len(), 30);
    }

    #[test]
    fn rejects_disconnecting_parameters() {
        assert!(matches!(generate_world(1, 10, 1.0, 8), Err(Error::InvalidConfig(_))));
        assert!(matches!(generate_world(1, 5, 5.0, 8), Err(Error::InvalidConfig(_))));
        assert!(matches!(generate_world(1, 1, 1.0, 8), Err(Error::InvalidConfig(_))));
        assert!(matches!(generate_world(1, 4, 2.0, 7), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn world_invariants() {
        for seed in 0..20 {
            let w = generate_world(seed, 15, 3.0, 16).unwrap();
            for e in w.edges() {
                let d = euclidean(w.position(e.a), w.position(e.b));
                assert!((d - e.length).abs() <= 1e-9);
            }
            for id in 0..w.n_nodes() {
                let obs = w.observe(id).unwrap();
                assert_eq!(obs.views.len(), VIEWS_PER_PANORAMA);
                assert_eq!(obs.n_navigable(), w.degree(id));
                let idx: BTreeSet<_> = obs.navigable.iter().map(|n| n.view_index).collect();
                assert_eq!(idx.len(), obs.n_navigable());
                for n in &obs.navigable {
                    assert_ne!(n.neighbor, id);
                    assert!(w.is_adjacent(id, n.neighbor));
                }
                for v in &obs.views {
                    assert!((1..=3).contains(&v.landmark_tags.len()));
                    assert!((-PI..PI).contains(&v.heading));
                }
                assert_eq!(obs, w.observe(id).unwrap());
            }
        }
    }

    #[test]
    fn navigable_view_points_near_neighbor() {
        let w = generate_world(3, 12, 3.0, 16).unwrap();
        for id in 0..w.n_nodes() {
            let obs = w.observe(id).unwrap();
            for n in &obs.navigable {
                let b = bearing(w.position(id), w.position(n.neighbor));
                // Collisions can push a neighbour off its nearest view, but
                // never to the opposite side of the panorama.
                assert!(angular_gap(b, obs.views[n.view_index].heading) < PI / 2.0);
            }
        }
    }

    #[test]
    fn shortest_path_matches_enumeration() {
        for seed in 0..25 {
            let w = generate_world(seed, 8, 3.0, 8).unwrap();
            for a in 0..8 {
                for b in 0..8 {
                    let (path, len) = w.shortest_path(a, b).unwrap();
                    let paths = all_simple_paths(&w, a, b);
                    let best = paths.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                    assert!((len - best).abs() < 1e-9, "seed {seed} {a}->{b}");
                    let recomputed: f64 = path.windows(2).map(|s| w.edge_length(s[0], s[1]).unwrap()).sum();
                    assert!((recomputed - len).abs() < 1e-9);
                    assert!((w.geodesic(a, b) - best).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unknown_viewpoint_is_rejected() {
        let w = generate_world(7, 4, 2.0, 8).unwrap();
        assert!(matches!(w.observe(4), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn single_hop_episode() {
        let w = generate_world(7, 2, 1.0, 8).unwrap();
        let ep = generate_episode(&w, 3, 1, 1).unwrap();
        assert_eq!(ep.hops(), 1);
        assert_eq!(ep.instruction.matches("go ").count(), 1);
        assert!(ep.instruction.ends_with(", then stop."));
        assert_eq!(ep.gt_actions, vec![Action::Move(0), Action::Stop]);
        ep.validate(&w).unwrap();
    }

    #[test]
    fn episodes_are_shortest_and_replayable() {
        let w = generate_world(11, 20, 3.0, 24).unwrap();
        for seed in 0..30 {
            let ep = generate_episode(&w, seed, 2, 4).unwrap();
            assert_eq!(ep, generate_episode(&w, seed, 2, 4).unwrap());
            ep.validate(&w).unwrap();
            assert!((2..=4).contains(&ep.hops()));
            let (_, len) = w.shortest_path(ep.start_id, ep.goal_id).unwrap();
            let walked: f64 = ep.gt_path.windows(2).map(|s| w.edge_length(s[0], s[1]).unwrap()).sum();
            assert!((walked - len).abs() < 1e-9);
            let clauses = ep.instruction.split(", then ").count();
            assert_eq!(clauses, ep.hops() + 1);
        }
    }

    #[test]
    fn infeasible_hop_window() {
        // Complete graph on 4 nodes: by the triangle inequality every
        // shortest path is the direct edge.
        let w = generate_world(7, 4, 3.0, 8).unwrap();
        assert!(matches!(generate_episode(&w, 0, 3, 3), Err(Error::InfeasibleEpisode { .. })));
        assert!(matches!(generate_episode(&w, 0, 2, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn json_round_trip_validates() {
        let w = generate_world(5, 10, 3.0, 12).unwrap();
        let text = serde_json::to_string(&w).unwrap();
        let back: World = serde_json::from_str(&text).unwrap();
        assert_eq!(w, back);
        let tampered = text.replacen("\"length\":", "\"length\":1000.0,\"x\":", 1);
        assert!(serde_json::from_str::<World>(&tampered).is_err());
    }
}
