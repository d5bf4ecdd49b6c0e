//! Evaluation metrics: displacement errors, sample-set diversity,
//! motion-primitive distributions, and chi-square histogram distances.
//! Everything is f64 and backed by plain loops so independent oracles
//! can match to tight tolerances.

use crate::config::{AsdMode, Config};
use crate::data::TrajectoryWindow;
use crate::exec::maybe_par_map;
use crate::generation::LoadedSamples;

pub const REPORT_FORMAT_VERSION: u32 = 1;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean per-step displacement of one agent's trajectory.
pub fn ade_single(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "horizon mismatch");
    assert!(!pred.is_empty());
    pred.iter()
        .zip(truth)
        .map(|(p, t)| dist(*p, *t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Final-step displacement of one agent's trajectory.
pub fn fde_single(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "horizon mismatch");
    dist(*pred.last().unwrap(), *truth.last().unwrap())
}

/// Mean displacement over agents and steps.
pub fn ade(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "agent count mismatch");
    assert!(!pred.is_empty());
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ade_single(p, t) * p.len() as f64)
        .sum();
    let steps: usize = pred.iter().map(|p| p.len()).sum();
    total / steps as f64
}

/// Mean final displacement over agents.
pub fn fde(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "agent count mismatch");
    assert!(!pred.is_empty());
    pred.iter()
        .zip(truth)
        .map(|(p, t)| fde_single(p, t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Best-of-L metric: per agent, the minimum over samples of the
/// per-agent metric; averaged over agents.
pub fn best_of(
    samples: &[Vec<Vec<[f64; 2]>>],
    truth: &[Vec<[f64; 2]>],
    metric: impl Fn(&[[f64; 2]], &[[f64; 2]]) -> f64,
) -> f64 {
    assert!(!samples.is_empty(), "need at least one sample");
    let n = truth.len();
    let mut total = 0.0;
    for agent in 0..n {
        let best = samples
            .iter()
            .map(|s| metric(&s[agent], &truth[agent]))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    total / n as f64
}

/// Diversity of one agent's sample set: pairwise time-averaged
/// distances, reduced by max (default) or mean over pairs.
pub fn asd(samples: &[Vec<[f64; 2]>], mode: AsdMode) -> f64 {
    assert!(samples.len() >= 2, "diversity needs at least two samples");
    let f = samples[0].len() as f64;
    let mut best = 0.0f64;
    let mut sum = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let avg: f64 = samples[i]
                .iter()
                .zip(&samples[j])
                .map(|(a, b)| dist(*a, *b))
                .sum::<f64>()
                / f;
            best = best.max(avg);
            sum += avg;
            pairs += 1;
        }
    }
    match mode {
        AsdMode::MaxPair => best,
        AsdMode::MeanPair => sum / pairs as f64,
    }
}

/// Flat multisets of motion primitives pooled over trajectories.
/// Velocity and acceleration are magnitudes; angular velocity and
/// acceleration are signed.
#[derive(Debug, Clone, Default)]
pub struct PrimitiveSeries {
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
    pub angular_velocity: Vec<f64>,
    pub angular_acceleration: Vec<f64>,
}

impl PrimitiveSeries {
    pub fn extend(&mut self, other: PrimitiveSeries) {
        self.velocity.extend(other.velocity);
        self.acceleration.extend(other.acceleration);
        self.angular_velocity.extend(other.angular_velocity);
        self.angular_acceleration.extend(other.angular_acceleration);
    }
}

/// Wrap an angle difference into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Primitives of one trajectory. Heading is undefined below `v_min`;
/// the last valid heading is carried forward, and angular samples
/// whose headings were never defined are dropped.
pub fn primitives_single(traj: &[[f64; 2]], dt: f64, v_min: f64) -> PrimitiveSeries {
    assert!(traj.len() >= 4, "need at least 4 points for angular acceleration");
    let n = traj.len();
    let vel: Vec<[f64; 2]> = (0..n - 1)
        .map(|i| {
            [
                (traj[i + 1][0] - traj[i][0]) / dt,
                (traj[i + 1][1] - traj[i][1]) / dt,
            ]
        })
        .collect();
    let speed: Vec<f64> = vel.iter().map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt()).collect();
    let acc: Vec<f64> = (0..vel.len() - 1)
        .map(|i| {
            let ax = (vel[i + 1][0] - vel[i][0]) / dt;
            let ay = (vel[i + 1][1] - vel[i][1]) / dt;
            (ax * ax + ay * ay).sqrt()
        })
        .collect();

    let mut headings: Vec<Option<f64>> = Vec::with_capacity(vel.len());
    let mut last: Option<f64> = None;
    for (v, &s) in vel.iter().zip(&speed) {
        if s >= v_min {
            last = Some(v[1].atan2(v[0]));
        }
        headings.push(last);
    }
    let mut angular_velocity = Vec::new();
    let mut omega: Vec<Option<f64>> = Vec::with_capacity(headings.len().saturating_sub(1));
    for i in 0..headings.len() - 1 {
        match (headings[i], headings[i + 1]) {
            (Some(a), Some(b)) => {
                let w = wrap_angle(b - a) / dt;
                angular_velocity.push(w);
                omega.push(Some(w));
            }
            _ => omega.push(None),
        }
    }
    let mut angular_acceleration = Vec::new();
    for i in 0..omega.len().saturating_sub(1) {
        if let (Some(a), Some(b)) = (omega[i], omega[i + 1]) {
            angular_acceleration.push((b - a) / dt);
        }
    }
    PrimitiveSeries {
        velocity: speed,
        acceleration: acc,
        angular_velocity,
        angular_acceleration,
    }
}

/// Pool primitives over many trajectories. Parallel map, ordered
/// sequential reduction.
pub fn motion_primitives(
    trajs: &[Vec<[f64; 2]>],
    dt: f64,
    v_min: f64,
    parallel: bool,
) -> PrimitiveSeries {
    let parts = maybe_par_map(trajs, parallel, |t| primitives_single(t, dt, v_min));
    let mut out = PrimitiveSeries::default();
    for p in parts {
        out.extend(p);
    }
    out
}

/// Equal-width histogram over a shared range, normalized to sum 1.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub densities: Vec<f64>,
    pub count: usize,
}

impl Histogram {
    pub fn bin_edges(&self) -> Vec<f64> {
        let bins = self.densities.len();
        (0..=bins)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / bins as f64)
            .collect()
    }
}

/// Histogram both series over the union of their ranges.
pub fn histogram_pair(a: &[f64], b: &[f64], bins: usize) -> (Histogram, Histogram) {
    assert!(bins >= 1);
    assert!(!a.is_empty() && !b.is_empty(), "empty primitive series");
    let lo = a
        .iter()
        .chain(b)
        .fold(f64::INFINITY, |acc, &x| acc.min(x));
    let hi = a
        .iter()
        .chain(b)
        .fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    let build = |series: &[f64]| -> Histogram {
        let mut counts = vec![0usize; bins];
        for &x in series {
            let idx = if hi > lo {
                (((x - lo) / (hi - lo)) * bins as f64).floor() as usize
            } else {
                0
            };
            counts[idx.min(bins - 1)] += 1;
        }
        let total = series.len() as f64;
        Histogram {
            lo,
            hi,
            densities: counts.iter().map(|&c| c as f64 / total).collect(),
            count: series.len(),
        }
    };
    (build(a), build(b))
}

/// Chi-square distance between two normalized histograms:
/// sum over bins of (x - y)^2 / (x + y), empty bins contributing zero.
pub fn chi_square(a: &Histogram, b: &Histogram) -> f64 {
    assert_eq!(a.densities.len(), b.densities.len());
    a.densities
        .iter()
        .zip(&b.densities)
        .map(|(&x, &y)| {
            if x + y == 0.0 {
                0.0
            } else {
                (x - y) * (x - y) / (x + y)
            }
        })
        .sum()
}

/// Per-primitive chi-square distances between two pooled series.
#[derive(Debug, Clone)]
pub struct ChiSquareReport {
    pub velocity: f64,
    pub acceleration: f64,
    pub angular_velocity: f64,
    pub angular_acceleration: f64,
    pub histograms: Vec<(String, Histogram, Histogram)>,
}

pub fn chi_square_primitives(
    generated: &PrimitiveSeries,
    reference: &PrimitiveSeries,
    bins: usize,
) -> ChiSquareReport {
    let mut histograms = Vec::new();
    let mut run = |name: &str, g: &[f64], r: &[f64]| -> f64 {
        let (hr, hg) = histogram_pair(r, g, bins);
        let chi = chi_square(&hg, &hr);
        histograms.push((name.to_string(), hr, hg));
        chi
    };
    let velocity = run("velocity", &generated.velocity, &reference.velocity);
    let acceleration = run("acceleration", &generated.acceleration, &reference.acceleration);
    let angular_velocity = run(
        "angular_velocity",
        &generated.angular_velocity,
        &reference.angular_velocity,
    );
    let angular_acceleration = run(
        "angular_acceleration",
        &generated.angular_acceleration,
        &reference.angular_acceleration,
    );
    ChiSquareReport {
        velocity,
        acceleration,
        angular_velocity,
        angular_acceleration,
        histograms,
    }
}

/// Aggregated evaluation of generated sample sets against reference
/// windows.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub ade_best: f64,
    pub fde_best: f64,
    pub asd: f64,
    pub asd_agents: usize,
    pub chi2: ChiSquareReport,
    pub windows: usize,
    pub agents: usize,
    pub samples_total: usize,
    pub config_lines: Vec<String>,
    pub seed: u64,
}

impl MetricReport {
    /// Stable-order structured text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("trajgen-report {REPORT_FORMAT_VERSION}\n"));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("config {}\n", self.config_lines.len()));
        for line in &self.config_lines {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&format!("windows {}\n", self.windows));
        out.push_str(&format!("agents {}\n", self.agents));
        out.push_str(&format!("samples_total {}\n", self.samples_total));
        out.push_str(&format!("ade {:.9}\n", self.ade_best));
        out.push_str(&format!("fde {:.9}\n", self.fde_best));
        out.push_str(&format!("asd {:.9}\n", self.asd));
        out.push_str(&format!("asd_agents {}\n", self.asd_agents));
        out.push_str(&format!("chi2.velocity {:.9}\n", self.chi2.velocity));
        out.push_str(&format!("chi2.acceleration {:.9}\n", self.chi2.acceleration));
        out.push_str(&format!(
            "chi2.angular_velocity {:.9}\n",
            self.chi2.angular_velocity
        ));
        out.push_str(&format!(
            "chi2.angular_acceleration {:.9}\n",
            self.chi2.angular_acceleration
        ));
        out
    }

    /// Histogram tables: bin edges plus reference and generated
    /// densities, one file body per primitive.
    pub fn histogram_tables(&self) -> Vec<(String, String)> {
        self.chi2
            .histograms
            .iter()
            .map(|(name, hr, hg)| {
                let mut out = String::new();
                out.push_str(&format!(
                    "# primitive {name} bins {}\n# columns: bin_lo bin_hi density_ref density_gen\n",
                    hr.densities.len()
                ));
                let edges = hr.bin_edges();
                for i in 0..hr.densities.len() {
                    out.push_str(&format!(
                        "{} {} {:.9} {:.9}\n",
                        edges[i],
                        edges[i + 1],
                        hr.densities[i],
                        hg.densities[i]
                    ));
                }
                (name.clone(), out)
            })
            .collect()
    }
}

/// Evaluate generated samples against reference windows, pooling over
/// all (window, agent) pairs. Sample sets align with windows by index.
pub fn evaluate(
    windows: &[TrajectoryWindow],
    samples: &[LoadedSamples],
    cfg: &Config,
    seed: u64,
    parallel: bool,
) -> MetricReport {
    struct WindowEval {
        ade_sum: f64,
        fde_sum: f64,
        asd_sum: f64,
        asd_agents: usize,
        agents: usize,
        samples: usize,
        gen_trajs: Vec<Vec<[f64; 2]>>,
        ref_trajs: Vec<Vec<[f64; 2]>>,
    }

    let paired: Vec<(&TrajectoryWindow, &LoadedSamples)> = samples
        .iter()
        .filter_map(|s| windows.get(s.window_idx).map(|w| (w, s)))
        .collect();

    let evals = maybe_par_map(&paired, parallel, |(w, s)| {
        let n = w.agent_ids.len();
        let mut ev = WindowEval {
            ade_sum: 0.0,
            fde_sum: 0.0,
            asd_sum: 0.0,
            asd_agents: 0,
            agents: n,
            samples: s.trajectories.len(),
            gen_trajs: Vec::new(),
            ref_trajs: w.future.clone(),
        };
        for agent in 0..n {
            let best_ade = s
                .trajectories
                .iter()
                .map(|sample| ade_single(&sample[agent], &w.future[agent]))
                .fold(f64::INFINITY, f64::min);
            let best_fde = s
                .trajectories
                .iter()
                .map(|sample| fde_single(&sample[agent], &w.future[agent]))
                .fold(f64::INFINITY, f64::min);
            ev.ade_sum += best_ade;
            ev.fde_sum += best_fde;
            if s.trajectories.len() >= 2 {
                let agent_samples: Vec<Vec<[f64; 2]>> = s
                    .trajectories
                    .iter()
                    .map(|sample| sample[agent].clone())
                    .collect();
                ev.asd_sum += asd(&agent_samples, cfg.metrics_asd_mode);
                ev.asd_agents += 1;
            }
        }
        for sample in &s.trajectories {
            for traj in sample {
                ev.gen_trajs.push(traj.clone());
            }
        }
        ev
    });

    let mut ade_sum = 0.0;
    let mut fde_sum = 0.0;
    let mut asd_sum = 0.0;
    let mut asd_agents = 0;
    let mut agents = 0;
    let mut samples_total = 0;
    let mut gen_trajs = Vec::new();
    let mut ref_trajs = Vec::new();
    for ev in evals {
        ade_sum += ev.ade_sum;
        fde_sum += ev.fde_sum;
        asd_sum += ev.asd_sum;
        asd_agents += ev.asd_agents;
        agents += ev.agents;
        samples_total += ev.samples;
        gen_trajs.extend(ev.gen_trajs);
        ref_trajs.extend(ev.ref_trajs);
    }

    let gen_prims = motion_primitives(&gen_trajs, cfg.data_dt, cfg.metrics_v_min, parallel);
    let ref_prims = motion_primitives(&ref_trajs, cfg.data_dt, cfg.metrics_v_min, parallel);
    let chi2 = chi_square_primitives(&gen_prims, &ref_prims, cfg.metrics_bins);

    MetricReport {
        ade_best: if agents > 0 { ade_sum / agents as f64 } else { 0.0 },
        fde_best: if agents > 0 { fde_sum / agents as f64 } else { 0.0 },
        asd: if asd_agents > 0 {
            asd_sum / asd_agents as f64
        } else {
            0.0
        },
        asd_agents,
        chi2,
        windows: paired.len(),
        agents,
        samples_total,
        config_lines: cfg.to_lines(),
        seed,
    }
}
