//! Synthetic scene generation for tests, calibration, and demos.
//!
//! Agents walk at constant speed toward an assigned goal with additive
//! Gaussian position noise on the recorded observations. Everything is
//! deterministic given the seed; each agent draws from its own stream,
//! so changing the agent count never reshuffles other trajectories.

use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use super::scene::{DataError, Scene};
use crate::rng::{rng_for, synth_agent_stream};

#[derive(Debug, Clone, Copy)]
pub struct Route {
    pub start: [f64; 2],
    pub goal: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub name: String,
    pub n_agents: usize,
    /// Agent `i` follows `routes[i % routes.len()]`.
    pub routes: Vec<Route>,
    pub speed: f64,
    /// Relative per-agent speed variation, uniform in `1 +- jitter`.
    pub speed_jitter: f64,
    /// Standard deviation of the recorded-position noise, meters.
    pub noise: f64,
    pub frames: usize,
    /// Walk straight along +x until this frame, then turn toward the
    /// goal. Keeps early observations uninformative about the goal.
    pub turn_frame: Option<usize>,
    /// Give each agent its own disjoint frame range so agents never
    /// interact; one window per agent.
    pub stagger: bool,
    pub dt: f64,
}

pub fn synth_scene(spec: &SynthSpec, seed: u64) -> Result<Scene, DataError> {
    if spec.routes.is_empty() {
        return Err(DataError::BadSpec("no routes".into()));
    }
    if !(spec.speed > 0.0) {
        return Err(DataError::BadSpec(format!("speed {} must be positive", spec.speed)));
    }
    if spec.frames < 2 {
        return Err(DataError::BadSpec("need at least 2 frames".into()));
    }

    let total_frames = if spec.stagger {
        spec.frames * spec.n_agents
    } else {
        spec.frames
    };
    let mut frames: Vec<BTreeMap<i64, [f64; 2]>> = vec![BTreeMap::new(); total_frames];

    for agent in 0..spec.n_agents {
        let route = spec.routes[agent % spec.routes.len()];
        let mut rng = rng_for(seed, synth_agent_stream(agent));
        let speed = if spec.speed_jitter > 0.0 {
            spec.speed * (1.0 + rng.gen_range(-spec.speed_jitter..spec.speed_jitter))
        } else {
            spec.speed
        };
        let step = speed * spec.dt;
        let base = if spec.stagger { agent * spec.frames } else { 0 };
        let mut pos = route.start;
        for f in 0..spec.frames {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let recorded = [pos[0] + spec.noise * nx, pos[1] + spec.noise * ny];
            frames[base + f].insert(agent as i64, recorded);

            let toward_goal = match spec.turn_frame {
                Some(t) if f < t => false,
                _ => true,
            };
            if toward_goal {
                let dx = route.goal[0] - pos[0];
                let dy = route.goal[1] - pos[1];
                let dist = (dx * dx + dy * dy).sqrt();
                if dist <= step {
                    pos = route.goal; // reached: idle here
                } else {
                    pos = [pos[0] + step * dx / dist, pos[1] + step * dy / dist];
                }
            } else {
                pos = [pos[0] + step, pos[1]];
            }
        }
    }

    Ok(Scene {
        name: spec.name.clone(),
        dt: spec.dt,
        frames,
        first_frame: 0,
        stride: 1,
    })
}

/// Named scene generators used by the CLI and the test suites.
pub fn preset(name: &str) -> Result<SynthSpec, DataError> {
    let spec = match name {
        // Ambiguous history, bimodal future: everyone walks +x through
        // the origin, then half turn to (2, 2) and half to (2, -2).
        // The two goals are 4 m apart at +-45 degrees from the anchor.
        "two-goal" => SynthSpec {
            name: "two-goal".into(),
            n_agents: 200,
            routes: vec![
                Route { start: [-2.8, 0.0], goal: [2.0, 2.0] },
                Route { start: [-2.8, 0.0], goal: [2.0, -2.0] },
            ],
            speed: 1.0,
            speed_jitter: 0.0,
            noise: 0.05,
            frames: 20,
            turn_frame: Some(8),
            stagger: true,
            dt: 0.4,
        },
        "straight" => SynthSpec {
            name: "straight".into(),
            n_agents: 4,
            routes: vec![Route { start: [0.0, 0.0], goal: [1000.0, 0.0] }],
            speed: 1.0,
            speed_jitter: 0.0,
            noise: 0.0,
            frames: 24,
            turn_frame: None,
            stagger: true,
            dt: 0.4,
        },
        // Two co-present agents whose paths intersect at the origin;
        // exercises edge features and the collision filter.
        "crossing" => SynthSpec {
            name: "crossing".into(),
            n_agents: 2,
            routes: vec![
                Route { start: [-3.0, 0.0], goal: [5.0, 0.0] },
                Route { start: [0.0, -3.0], goal: [0.0, 5.0] },
            ],
            speed: 1.0,
            speed_jitter: 0.0,
            noise: 0.02,
            frames: 20,
            turn_frame: None,
            stagger: false,
            dt: 0.4,
        },
        // Varied headings and speeds with observation noise; wide
        // motion-primitive distributions for realism checks.
        "scatter" => {
            let routes = (0..8)
                .map(|g| {
                    let theta = std::f64::consts::TAU * g as f64 / 8.0 + 0.3;
                    let (s, c) = theta.sin_cos();
                    Route {
                        start: [4.0 * c, 4.0 * s],
                        goal: [-4.0 * c, -4.0 * s],
                    }
                })
                .collect();
            SynthSpec {
                name: "scatter".into(),
                n_agents: 10,
                routes,
                speed: 0.9,
                speed_jitter: 0.5,
                noise: 0.03,
                frames: 20,
                turn_frame: None,
                stagger: true,
                dt: 0.4,
            }
        }
        _ => {
            return Err(DataError::BadSpec(format!(
                "unknown preset {name}; known: two-goal, straight, crossing, scatter"
            )))
        }
    };
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::window::build_windows;

    #[test]
    fn straight_walker_with_zero_noise_is_straight() {
        let spec = SynthSpec {
            name: "s".into(),
            n_agents: 1,
            routes: vec![Route { start: [0.0, 0.0], goal: [100.0, 0.0] }],
            speed: 1.0,
            speed_jitter: 0.0,
            noise: 0.0,
            frames: 10,
            turn_frame: None,
            stagger: false,
            dt: 0.4,
        };
        let scene = synth_scene(&spec, 1).unwrap();
        for (f, frame) in scene.frames.iter().enumerate() {
            let p = frame[&0];
            assert!((p[0] - 0.4 * f as f64).abs() < 1e-12);
            assert_eq!(p[1], 0.0);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = preset("scatter").unwrap();
        let a = synth_scene(&spec, 9).unwrap();
        let b = synth_scene(&spec, 9).unwrap();
        assert_eq!(a.serialize(), b.serialize());
        let c = synth_scene(&spec, 10).unwrap();
        assert_ne!(a.serialize(), c.serialize());
    }

    #[test]
    fn goal_reached_early_means_idle_not_error() {
        let spec = SynthSpec {
            name: "idle".into(),
            n_agents: 1,
            routes: vec![Route { start: [0.0, 0.0], goal: [0.5, 0.0] }],
            speed: 2.0,
            speed_jitter: 0.0,
            noise: 0.0,
            frames: 8,
            turn_frame: None,
            stagger: false,
            dt: 0.4,
        };
        let scene = synth_scene(&spec, 0).unwrap();
        let last = scene.frames.last().unwrap()[&0];
        assert_eq!(last, [0.5, 0.0]);
    }

    #[test]
    fn two_goal_destination_scatter_is_bimodal() {
        let spec = preset("two-goal").unwrap();
        let scene = synth_scene(&spec, 3).unwrap();
        let windows = build_windows(&scene, 8, 12);
        assert_eq!(windows.len(), 200);
        let mut near_a = 0;
        let mut near_b = 0;
        for w in &windows {
            let dest = *w.future[0].last().unwrap();
            let da = ((dest[0] - 2.0).powi(2) + (dest[1] - 2.0).powi(2)).sqrt();
            let db = ((dest[0] - 2.0).powi(2) + (dest[1] + 2.0).powi(2)).sqrt();
            if da < 0.5 {
                near_a += 1;
            }
            if db < 0.5 {
                near_b += 1;
            }
        }
        assert!(near_a >= 90 && near_b >= 90, "near_a={near_a} near_b={near_b}");
    }

    #[test]
    fn two_goal_past_is_goal_ambiguous() {
        // At the anchor the two groups have walked the same straight
        // segment; their pasts must be statistically indistinguishable.
        let spec = preset("two-goal").unwrap();
        let scene = synth_scene(&spec, 3).unwrap();
        let windows = build_windows(&scene, 8, 12);
        for w in windows.iter().take(4) {
            for p in &w.past[0] {
                assert!(p[1].abs() < 0.3, "past strayed off axis: {p:?}");
            }
        }
    }

    #[test]
    fn crossing_agents_are_co_present() {
        let spec = preset("crossing").unwrap();
        let scene = synth_scene(&spec, 5).unwrap();
        let windows = build_windows(&scene, 8, 12);
        assert!(!windows.is_empty());
        assert_eq!(windows[0].agent_ids.len(), 2);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = preset("straight").unwrap();
        spec.routes.clear();
        assert!(synth_scene(&spec, 0).is_err());
        assert!(preset("nonexistent").is_err());
    }
}
