//! Navigation metrics over node trajectories.

use serde::{Deserialize, Serialize};

use crate::env::{Episode, World};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::topo_map::NodeId;

/// Distance threshold for success and for the DTW decay, in metres.
pub const THRESHOLD: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub trajectory_length: f64,
    pub navigation_error: f64,
    pub success: f64,
    pub oracle_success: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

/// Means over episodes; success rates are percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

impl Summary {
    pub const CSV_HEADER: &'static str = "episodes,tl,ne,sr,osr,spl,ndtw,sdtw";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.episodes, self.tl, self.ne, self.sr, self.osr, self.spl, self.ndtw, self.sdtw
        )
    }
}

/// Plain dynamic time warping cost between two point sequences.
pub fn dtw(query: &[Vec3], reference: &[Vec3]) -> f64 {
    let m = reference.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for q in query {
        cur[0] = f64::INFINITY;
        for (j, r) in reference.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = (q - r).norm() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Normalized DTW: `exp(-dtw / (|reference| * threshold))`.
pub fn ndtw(query: &[Vec3], reference: &[Vec3], threshold: f64) -> Result<f64> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput("ndtw needs non-empty paths".into()));
    }
    Ok((-dtw(query, reference) / (reference.len() as f64 * threshold)).exp())
}

fn positions(world: &World, path: &[NodeId]) -> Result<Vec<Vec3>> {
    path.iter().map(|id| world.position(*id)).collect()
}

pub fn evaluate(trajectory: &[NodeId], episode: &Episode, world: &World) -> Result<EpisodeMetrics> {
    if trajectory.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let traj = positions(world, trajectory)?;
    let reference = positions(world, &episode.expert_path)?;
    let target = world.position(episode.target)?;
    let radius = episode.success_radius;

    let mut tl = 0.0;
    for w in trajectory.windows(2) {
        tl += world
            .edge(w[0], w[1])
            .ok_or_else(|| Error::InvalidInput(format!("trajectory jumps from {} to {}", w[0], w[1])))?;
    }
    let ne = (traj[traj.len() - 1] - target).norm();
    let success = f64::from(u8::from(ne < radius));
    let oracle_success = f64::from(u8::from(traj.iter().any(|p| (p - target).norm() < radius)));
    let shortest = world.shortest_distance(episode.start, episode.target)?;
    let spl = if success > 0.0 {
        let denom = shortest.max(tl);
        if denom > 0.0 {
            shortest / denom
        } else {
            1.0
        }
    } else {
        0.0
    };
    let ndtw = ndtw(&traj, &reference, THRESHOLD)?;
    Ok(EpisodeMetrics {
        trajectory_length: tl,
        navigation_error: ne,
        success,
        oracle_success,
        spl,
        ndtw,
        sdtw: success * ndtw,
    })
}

pub fn aggregate(records: &[EpisodeMetrics]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to aggregate".into()));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&EpisodeMetrics) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(Summary {
        episodes: records.len(),
        tl: mean(|r| r.trajectory_length),
        ne: mean(|r| r.navigation_error),
        sr: 100.0 * mean(|r| r.success),
        osr: 100.0 * mean(|r| r.oracle_success),
        spl: mean(|r| r.spl),
        ndtw: mean(|r| r.ndtw),
        sdtw: mean(|r| r.sdtw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_episode, generate_world, EpisodeKind, WorldParams};

    #[test]
    fn expert_replay_is_perfect() {
        let w = generate_world(8, &WorldParams::default()).unwrap();
        let ep = generate_episode(&w, 1, EpisodeKind::Goal).unwrap();
        let m = evaluate(&ep.expert_path, &ep, &w).unwrap();
        assert_eq!(m.success, 1.0);
        assert!((m.spl - 1.0).abs() < 1e-12);
        assert_eq!(m.ndtw, 1.0);
        assert_eq!(m.sdtw, 1.0);
    }

    #[test]
    fn failure_zeroes_success_metrics() {
        let w = generate_world(8, &WorldParams::default()).unwrap();
        let ep = generate_episode(&w, 2, EpisodeKind::Goal).unwrap();
        let target = w.position(ep.target).unwrap();
        let far =
            w.nodes.iter().max_by(|a, b| (a.pos() - target).norm().total_cmp(&(b.pos() - target).norm())).unwrap();
        assert!((far.pos() - target).norm() > 3.0);
        let m = evaluate(&[far.id], &ep, &w).unwrap();
        assert_eq!((m.success, m.oracle_success, m.spl, m.sdtw), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn double_length_halves_spl() {
        let w = generate_world(8, &WorldParams::default()).unwrap();
        let ep = generate_episode(&w, 3, EpisodeKind::Goal).unwrap();
        let (a, b) = (ep.expert_path[0], ep.expert_path[1]);
        let mut ep2 = ep.clone();
        ep2.expert_path = vec![a, b];
        ep2.target = b;
        // a -> b -> a -> b is three times the shortest path
        let m = evaluate(&[a, b, a, b], &ep2, &w).unwrap();
        assert!((m.spl - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let w = generate_world(8, &WorldParams::default()).unwrap();
        let ep = generate_episode(&w, 1, EpisodeKind::Goal).unwrap();
        assert!(matches!(evaluate(&[], &ep, &w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn aggregate_percentages() {
        let a = EpisodeMetrics { success: 1.0, oracle_success: 1.0, ..Default::default() };
        let s = aggregate(&[a, EpisodeMetrics::default()]).unwrap();
        assert_eq!(s.sr, 50.0);
        assert_eq!(s.osr, 50.0);
        assert!(aggregate(&[]).is_err());
    }
}
