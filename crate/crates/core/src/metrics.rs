//! Navigation metrics over rolled-out trajectories.
//!
//! Distances to the goal are geodesic (shortest path through the graph).
//! Success is `NE <= radius`, boundary included.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::envworld::World;
use crate::error::{Error, Result};

pub const SUCCESS_RADIUS: f64 = 3.0;

/// The path an agent actually took for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_seed: u64,
    pub start_id: usize,
    pub goal_id: usize,
    /// Visited viewpoints, starting at `start_id`.
    pub visited: Vec<usize>,
    /// `false` when the step cap ended the episode.
    pub stopped: bool,
    /// Generated reasoning per decision, when generation was requested.
    #[serde(default)]
    pub reasoning: Vec<String>,
}

impl TrajectoryRecord {
    pub fn final_id(&self) -> usize {
        *self.visited.last().expect("validated records are non-empty")
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("trajectory {}: {m}", self.episode_seed)));
        if self.visited.first() != Some(&self.start_id) {
            return bad("must start at start_id");
        }
        if self.start_id >= world.n_nodes() || self.goal_id >= world.n_nodes() {
            return bad("endpoint outside the world");
        }
        if self.visited.windows(2).any(|w| !world.is_adjacent(w[0], w[1])) {
            return bad("consecutive viewpoints must be adjacent");
        }
        Ok(())
    }
}

pub fn trajectory_length(record: &TrajectoryRecord, world: &World) -> Result<f64> {
    record.validate(world)?;
    Ok(record
        .visited
        .windows(2)
        .map(|w| world.edge_length(w[0], w[1]).expect("validated adjacency"))
        // f64's `sum` starts from -0.0; fold from +0.0 so empty paths print as 0.
        .fold(0.0, |a, b| a + b))
}

pub fn navigation_error(record: &TrajectoryRecord, world: &World) -> Result<f64> {
    record.validate(world)?;
    Ok(world.geodesic(record.final_id(), record.goal_id))
}

pub fn success(record: &TrajectoryRecord, world: &World, radius: f64) -> Result<bool> {
    Ok(navigation_error(record, world)? <= radius)
}

/// `success * l / max(p, l)`; equals `success` when start and goal coincide.
pub fn spl(record: &TrajectoryRecord, world: &World, radius: f64) -> Result<f64> {
    let s = f64::from(u8::from(success(record, world, radius)?));
    let l = world.geodesic(record.start_id, record.goal_id);
    if l == 0.0 {
        return Ok(s);
    }
    Ok(s * l / trajectory_length(record, world)?.max(l))
}

/// Whether any visited viewpoint came within `radius` of the goal.
pub fn oracle_success(record: &TrajectoryRecord, world: &World, radius: f64) -> Result<bool> {
    record.validate(world)?;
    let d = world.distances_from(record.goal_id);
    Ok(record.visited.iter().any(|&v| d[v] <= radius))
}

/// Reduction in geodesic distance to the goal; negative when the agent
/// ended farther away than it started.
pub fn goal_progress(record: &TrajectoryRecord, world: &World) -> Result<f64> {
    record.validate(world)?;
    let d = world.distances_from(record.goal_id);
    Ok(d[record.start_id] - d[record.final_id()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_seed: u64,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub osr: f64,
    pub gp: f64,
}

pub fn evaluate(record: &TrajectoryRecord, world: &World, radius: f64) -> Result<EpisodeMetrics> {
    let as_f = |b: bool| f64::from(u8::from(b));
    Ok(EpisodeMetrics {
        episode_seed: record.episode_seed,
        tl: trajectory_length(record, world)?,
        ne: navigation_error(record, world)?,
        sr: as_f(success(record, world, radius)?),
        spl: spl(record, world, radius)?,
        osr: as_f(oracle_success(record, world, radius)?),
        gp: goal_progress(record, world)?,
    })
}

/// Means over a batch of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub osr: f64,
    pub gp: f64,
    pub success_radius: f64,
    pub count: usize,
}

pub fn aggregate(per_episode: &[EpisodeMetrics], radius: f64) -> Result<MetricSet> {
    if per_episode.is_empty() {
        return Err(Error::InvalidInput("no episodes to aggregate".into()));
    }
    let n = per_episode.len() as f64;
    let mean = |f: fn(&EpisodeMetrics) -> f64| per_episode.iter().map(f).fold(0.0, |a, b| a + b) / n;
    Ok(MetricSet {
        tl: mean(|m| m.tl),
        ne: mean(|m| m.ne),
        sr: mean(|m| m.sr),
        spl: mean(|m| m.spl),
        osr: mean(|m| m.osr),
        gp: mean(|m| m.gp),
        success_radius: radius,
        count: per_episode.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_episode: Vec<EpisodeMetrics>,
    pub means: MetricSet,
}

impl MetricReport {
    pub fn new(per_episode: Vec<EpisodeMetrics>, radius: f64) -> Result<MetricReport> {
        let means = aggregate(&per_episode, radius)?;
        Ok(MetricReport { per_episode, means })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode_seed,tl,ne,sr,spl,osr,gp\n");
        for m in &self.per_episode {
            writeln!(out, "{},{},{},{},{},{},{}", m.episode_seed, m.tl, m.ne, m.sr, m.spl, m.osr, m.gp)
                .expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envworld::{generate_world, World};
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn euclid(world: &World, a: usize, b: usize) -> f64 {
        let (p, q) = (world.position(a), world.position(b));
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }

    /// Minimum over every simple path, by depth-first enumeration.
    fn brute_geodesic(world: &World, a: usize, b: usize) -> f64 {
        fn dfs(world: &World, at: usize, goal: usize, seen: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if at == goal {
                *best = best.min(acc);
                return;
            }
            for &(n, _) in world.neighbors(at) {
                if !seen[n] {
                    seen[n] = true;
                    dfs(world, n, goal, seen, acc + euclid(world, at, n), best);
                    seen[n] = false;
                }
            }
        }
        let mut seen = vec![false; world.n_nodes()];
        seen[a] = true;
        let mut best = f64::INFINITY;
        dfs(world, a, b, &mut seen, 0.0, &mut best);
        best
    }

    fn random_walk(world: &World, seed: u64, goal: usize) -> TrajectoryRecord {
        let mut rng = rng_from(seed);
        let start = rng.random_range(0..world.n_nodes());
        let mut visited = vec![start];
        for _ in 0..rng.random_range(0..8) {
            let nb = world.neighbors(*visited.last().unwrap());
            visited.push(nb[rng.random_range(0..nb.len())].0);
        }
        TrajectoryRecord { episode_seed: seed, start_id: start, goal_id: goal, visited, stopped: true, reasoning: vec![] }
    }

    fn record(start: usize, goal: usize, visited: Vec<usize>) -> TrajectoryRecord {
        TrajectoryRecord { episode_seed: 0, start_id: start, goal_id: goal, visited, stopped: true, reasoning: vec![] }
    }

    #[test]
    fn trivial_cases() {
        let w = generate_world(3, 2, 1.0, 8).unwrap();
        let edge = w.edge_length(0, 1).unwrap();
        let at_start = record(0, 1, vec![0]);
        assert!(trajectory_length(&at_start, &w).unwrap().is_sign_positive());
        assert_eq!(trajectory_length(&at_start, &w).unwrap(), 0.0);
        assert_eq!(navigation_error(&at_start, &w).unwrap(), edge);
        assert_eq!(goal_progress(&at_start, &w).unwrap(), 0.0);
        let at_goal = record(0, 1, vec![0, 1]);
        assert_eq!(navigation_error(&at_goal, &w).unwrap(), 0.0);
        assert!(success(&at_goal, &w, SUCCESS_RADIUS).unwrap());
        assert_eq!(spl(&at_goal, &w, SUCCESS_RADIUS).unwrap(), 1.0);
        assert_eq!(goal_progress(&at_goal, &w).unwrap(), edge);
        // Exactly on the radius counts as success.
        assert!(success(&at_start, &w, edge).unwrap());
        assert!(!success(&at_start, &w, edge - 1e-9).unwrap());
        // Start equals goal: l = 0.
        assert_eq!(spl(&record(0, 0, vec![0, 1, 0]), &w, SUCCESS_RADIUS).unwrap(), 1.0);
        // Success with p = 2l.
        let back_and_forth = record(0, 1, vec![0, 1, 0, 1]);
        let e = evaluate(&back_and_forth, &w, edge).unwrap();
        assert!((e.spl - 1.0 / 3.0).abs() < 1e-12);
        let double = record(0, 1, vec![0, 1, 0]);
        assert_eq!(trajectory_length(&double, &w).unwrap(), 2.0 * edge);
        assert_eq!(spl(&double, &w, edge).unwrap(), 0.5);
        assert!(record(1, 0, vec![0]).validate(&w).is_err());
    }

    #[test]
    fn gt_replay_scores_perfectly() {
        let w = generate_world(5, 8, 2.5, 8).unwrap();
        let (path, l) = w.shortest_path(0, 7).unwrap();
        let r = record(0, 7, path);
        let e = evaluate(&r, &w, SUCCESS_RADIUS).unwrap();
        assert!((e.tl - l).abs() < 1e-12);
        assert_eq!((e.ne, e.sr, e.spl, e.osr), (0.0, 1.0, 1.0, 1.0));
        assert!((e.gp - l).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force_on_small_worlds() {
        for seed in 0..50u64 {
            let n = 2 + (seed % 7) as usize;
            let deg = (2.0 * (n - 1) as f64 / n as f64 + 0.5 * (seed % 3) as f64).min((n - 1) as f64);
            let w = generate_world(seed, n, deg, 8).unwrap();
            for k in 0..4 {
                let goal = ((seed + k) % n as u64) as usize;
                let r = random_walk(&w, seed * 31 + k, goal);
                let e = evaluate(&r, &w, SUCCESS_RADIUS).unwrap();
                let tl: f64 = r.visited.windows(2).map(|p| euclid(&w, p[0], p[1])).sum();
                let ne = brute_geodesic(&w, r.final_id(), goal);
                let l = brute_geodesic(&w, r.start_id, goal);
                let sr = if ne <= SUCCESS_RADIUS { 1.0 } else { 0.0 };
                let spl = if l == 0.0 { sr } else { sr * l / tl.max(l) };
                let osr = r.visited.iter().any(|&v| brute_geodesic(&w, v, goal) <= SUCCESS_RADIUS);
                assert!((e.tl - tl).abs() < 1e-9);
                assert!((e.ne - ne).abs() < 1e-9);
                assert_eq!(e.sr, sr);
                assert!((e.spl - spl).abs() < 1e-9);
                assert_eq!(e.osr, f64::from(u8::from(osr)));
                assert!((e.gp - (l - ne)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aggregate_means_and_csv() {
        let w = generate_world(5, 8, 2.5, 8).unwrap();
        let per: Vec<_> = (0..10).map(|s| evaluate(&random_walk(&w, s, 3), &w, SUCCESS_RADIUS).unwrap()).collect();
        let report = MetricReport::new(per.clone(), SUCCESS_RADIUS).unwrap();
        let spl_mean = per.iter().map(|m| m.spl).sum::<f64>() / 10.0;
        assert!((report.means.spl - spl_mean).abs() < 1e-12);
        assert!(report.means.spl <= report.means.sr);
        assert_eq!(report.means.count, 10);
        assert_eq!(report.to_csv().lines().count(), 11);
        assert!(aggregate(&[], SUCCESS_RADIUS).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ordering_invariants(world_seed in 0u64..1000, walk_seed: u64, goal in 0usize..10, radius in 0.0f64..8.0) {
            let w = generate_world(world_seed, 10, 2.5, 8).unwrap();
            let r = random_walk(&w, walk_seed, goal);
            let e = evaluate(&r, &w, radius).unwrap();
            prop_assert!(e.spl <= e.sr);
            prop_assert!((0.0..=1.0).contains(&e.spl));
            prop_assert!(e.osr >= e.sr);
            prop_assert!(e.tl >= 0.0);
            prop_assert!(e.gp <= w.geodesic(r.start_id, goal) + 1e-12);
        }
    }
}
