//! Fixed-horizon multi-agent windows and the per-agent model frame.

use super::scene::Scene;

/// All agents with complete coverage around one anchor frame:
/// `past` holds the H observed positions (anchor last), `future` the
/// F positions after the anchor. World coordinates, meters.
#[derive(Debug, Clone)]
pub struct TrajectoryWindow {
    pub scene: String,
    pub anchor: usize,
    pub agent_ids: Vec<i64>,
    pub past: Vec<Vec<[f64; 2]>>,
    pub future: Vec<Vec<[f64; 2]>>,
    pub dt: f64,
}

/// One window per anchor time, containing exactly the agents present at
/// every frame of `[anchor - h + 1, anchor + f]`. Windows with no
/// qualifying agent are omitted.
pub fn build_windows(scene: &Scene, h: usize, f: usize) -> Vec<TrajectoryWindow> {
    assert!(h >= 2, "need at least 2 past steps for velocities");
    assert!(f >= 1, "need at least 1 future step");
    let span = h + f;
    if scene.n_frames() < span {
        return Vec::new();
    }
    let mut windows = Vec::new();
    for anchor in (h - 1)..=(scene.n_frames() - f - 1) {
        let lo = anchor + 1 - h;
        let hi = anchor + f;
        let mut agent_ids = Vec::new();
        for (&agent, _) in &scene.frames[anchor] {
            if (lo..=hi).all(|t| scene.frames[t].contains_key(&agent)) {
                agent_ids.push(agent);
            }
        }
        if agent_ids.is_empty() {
            continue;
        }
        let past = agent_ids
            .iter()
            .map(|a| (lo..=anchor).map(|t| scene.frames[t][a]).collect())
            .collect();
        let future = agent_ids
            .iter()
            .map(|a| (anchor + 1..=hi).map(|t| scene.frames[t][a]).collect())
            .collect();
        windows.push(TrajectoryWindow {
            scene: scene.name.clone(),
            anchor,
            agent_ids,
            past,
            future,
            dt: scene.dt,
        });
    }
    windows
}

/// Per-agent model features in the agent's own frame: positions are
/// translated so the last observed position is the origin, and
/// finite-difference velocities are appended. The stored origin is the
/// inverse transform back to world coordinates.
#[derive(Debug, Clone)]
pub struct NormalizedWindow {
    pub scene: String,
    pub anchor: usize,
    pub agent_ids: Vec<i64>,
    /// World position of each agent at the anchor frame.
    pub origins: Vec<[f64; 2]>,
    /// Per agent, per past step: relative position and velocity.
    pub node_feats: Vec<Vec<[f32; 4]>>,
    /// Per agent, per past step: neighbor states summed within the
    /// radius, relative position and relative velocity.
    pub edge_feats: Vec<Vec<[f32; 4]>>,
    /// Ground-truth destination (final future position) per agent, in
    /// that agent's frame.
    pub dest: Vec<[f32; 2]>,
    /// Ground-truth future positions per agent, in that agent's frame.
    pub future_rel: Vec<Vec<[f32; 2]>>,
    pub dt: f64,
}

impl NormalizedWindow {
    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn horizon(&self) -> usize {
        self.node_feats.first().map(|f| f.len()).unwrap_or(0)
    }

    pub fn future_len(&self) -> usize {
        self.future_rel.first().map(|f| f.len()).unwrap_or(0)
    }

    /// Map a point from agent `i`'s frame back to world coordinates.
    pub fn denormalize(&self, agent: usize, p: [f64; 2]) -> [f64; 2] {
        [p[0] + self.origins[agent][0], p[1] + self.origins[agent][1]]
    }
}

/// Sum-aggregate neighbor states into one vector. Summation runs in a
/// canonical sorted order, so the result is bit-identical under any
/// permutation of the input.
pub fn sum_relative_states(states: &mut Vec<[f64; 4]>) -> [f64; 4] {
    states.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut acc = [0.0f64; 4];
    for s in states.iter() {
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    acc
}

pub fn normalize_window(w: &TrajectoryWindow, radius: f64) -> NormalizedWindow {
    let n = w.agent_ids.len();
    let h = w.past.first().map(|p| p.len()).unwrap_or(0);
    let dt = w.dt;

    // World-frame velocities at each past step; the first step copies
    // the second since no earlier in-window point exists.
    let velocities: Vec<Vec<[f64; 2]>> = w
        .past
        .iter()
        .map(|past| {
            let mut v = vec![[0.0; 2]; h];
            for j in 1..h {
                v[j] = [
                    (past[j][0] - past[j - 1][0]) / dt,
                    (past[j][1] - past[j - 1][1]) / dt,
                ];
            }
            if h > 1 {
                v[0] = v[1];
            }
            v
        })
        .collect();

    let origins: Vec<[f64; 2]> = w.past.iter().map(|p| p[h - 1]).collect();

    let mut node_feats = Vec::with_capacity(n);
    let mut edge_feats = Vec::with_capacity(n);
    let mut dest = Vec::with_capacity(n);
    let mut future_rel = Vec::with_capacity(n);

    for i in 0..n {
        let origin = origins[i];
        let node: Vec<[f32; 4]> = (0..h)
            .map(|j| {
                [
                    (w.past[i][j][0] - origin[0]) as f32,
                    (w.past[i][j][1] - origin[1]) as f32,
                    velocities[i][j][0] as f32,
                    velocities[i][j][1] as f32,
                ]
            })
            .collect();
        let edge: Vec<[f32; 4]> = (0..h)
            .map(|j| {
                let mut states: Vec<[f64; 4]> = Vec::new();
                for other in 0..n {
                    if other == i {
                        continue;
                    }
                    let dx = w.past[other][j][0] - w.past[i][j][0];
                    let dy = w.past[other][j][1] - w.past[i][j][1];
                    if (dx * dx + dy * dy).sqrt() <= radius {
                        states.push([
                            dx,
                            dy,
                            velocities[other][j][0] - velocities[i][j][0],
                            velocities[other][j][1] - velocities[i][j][1],
                        ]);
                    }
                }
                let acc = sum_relative_states(&mut states);
                [acc[0] as f32, acc[1] as f32, acc[2] as f32, acc[3] as f32]
            })
            .collect();
        let fut: Vec<[f32; 2]> = w.future[i]
            .iter()
            .map(|p| [(p[0] - origin[0]) as f32, (p[1] - origin[1]) as f32])
            .collect();
        dest.push(*fut.last().expect("future is non-empty"));
        node_feats.push(node);
        edge_feats.push(edge);
        future_rel.push(fut);
    }

    NormalizedWindow {
        scene: w.scene.clone(),
        anchor: w.anchor,
        agent_ids: w.agent_ids.clone(),
        origins,
        node_feats,
        edge_feats,
        dest,
        future_rel,
        dt,
    }
}
