//! Simulation of the system and of pair trajectories, Monte-Carlo runs of
//! the safety and reachability experiments, and CSV export.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedSystem, RegionBundle};
use crate::certvalidate::Certificate;
use crate::error::{Error, Result};
use crate::poly::Polynomial;
use crate::sysmodel::{sample_set, ControlSystem, Interval};

/// `f(x, u)`.
pub fn step(sys: &ControlSystem, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if x.len() != sys.state_dim || u.len() != sys.input_dim {
        return Err(Error::Dimension(format!(
            "step expects {} states and {} inputs, got {} and {}",
            sys.state_dim,
            sys.input_dim,
            x.len(),
            u.len()
        )));
    }
    let point: Vec<f64> = x.iter().chain(u).copied().collect();
    Ok(sys.dynamics.iter().map(|f| f.eval(&point)).collect())
}

/// `‖h(x) − h(x̂)‖`.
pub fn output_gap(sys: &ControlSystem, x: &[f64], xh: &[f64]) -> f64 {
    let (a, b) = (sys.observe(x), sys.observe(xh));
    a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Where the inputs of one copy come from.
#[derive(Debug, Clone)]
pub enum InputSource {
    /// Polynomials over the product space, evaluated at `(x, x̂, u, û)`.
    Policy(Vec<Polynomial>),
    /// One input vector per step.
    Sequence(Vec<Vec<f64>>),
    /// Uniform draws from the input box.
    Random,
    /// Grid point of the input box, `levels` per dimension, that minimizes
    /// `gap` (a polynomial over the product space) at the next state.
    Greedy { levels: usize, gap: Polynomial },
}

/// Run of the product system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub partner_states: Vec<Vec<f64>>,
    /// One entry per transition.
    pub inputs: Vec<Vec<f64>>,
    pub partner_inputs: Vec<Vec<f64>>,
    /// Output gap at every visited pair.
    pub gaps: Vec<f64>,
    /// Times at which either copy is outside the state set.
    pub exits: Vec<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Product-space point of time `t`; inputs are those applied at `t`, or
    /// zero at the final time.
    pub fn point(&self, aug: &AugmentedSystem, t: usize) -> Vec<f64> {
        let mut z = vec![0.0; aug.space.len()];
        let (n, m) = (aug.n(), aug.m());
        z[..n].copy_from_slice(&self.states[t]);
        z[n..2 * n].copy_from_slice(&self.partner_states[t]);
        if t < self.inputs.len() {
            z[2 * n..2 * n + m].copy_from_slice(&self.inputs[t]);
            z[2 * n + m..].copy_from_slice(&self.partner_inputs[t]);
        }
        z
    }
}

fn input_box(sys: &ControlSystem) -> Result<Vec<Interval>> {
    sys.input_vars()
        .into_iter()
        .map(|v| {
            sys.input_set.bounds[v]
                .filter(|b| b.lo.is_finite() && b.hi.is_finite())
                .ok_or_else(|| Error::MissingBounds(sys.space.name(v).to_string()))
        })
        .collect()
}

fn grid(bounds: &[Interval], levels: usize) -> Vec<Vec<f64>> {
    let axis = |iv: &Interval| -> Vec<f64> {
        if levels <= 1 {
            return vec![0.5 * (iv.lo + iv.hi)];
        }
        (0..levels)
            .map(|k| iv.lo + iv.width() * k as f64 / (levels - 1) as f64)
            .collect()
    };
    let mut out = vec![Vec::new()];
    for iv in bounds {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis(iv).into_iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

enum Slot {
    Known(Vec<f64>),
    Pending,
}

/// Simulates both copies from `(x0, x̂0)` for `horizon` steps.
pub fn simulate_pair(
    aug: &AugmentedSystem,
    x0: &[f64],
    xh0: &[f64],
    source: &InputSource,
    partner_source: &InputSource,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    let sys = &aug.base;
    let (n, m) = (aug.n(), aug.m());
    if x0.len() != n || xh0.len() != n {
        return Err(Error::Dimension(format!(
            "initial pair must have {n} coordinates per copy, got {} and {}",
            x0.len(),
            xh0.len()
        )));
    }
    for src in [source, partner_source] {
        match src {
            InputSource::Policy(p) if p.len() != m => {
                return Err(Error::Dimension(format!("policy has {} components for {m} inputs", p.len())))
            }
            InputSource::Sequence(s) if s.len() < horizon || s.iter().any(|u| u.len() != m) => {
                return Err(Error::Dimension(format!(
                    "input sequence must hold {horizon} vectors of length {m}"
                )))
            }
            _ => {}
        }
    }
    if matches!(source, InputSource::Greedy { .. }) && matches!(partner_source, InputSource::Greedy { .. }) {
        return Err(Error::Invalid("at most one copy can be driven greedily".into()));
    }
    let needs_box = [source, partner_source]
        .iter()
        .any(|s| matches!(s, InputSource::Random | InputSource::Greedy { .. }));
    let bounds = if needs_box { input_box(sys)? } else { Vec::new() };
    let inputs_of = |copy: usize| -> Vec<usize> {
        if copy == 0 {
            aug.inputs()
        } else {
            aug.partner_inputs()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traj = Trajectory {
        states: vec![x0.to_vec()],
        partner_states: vec![xh0.to_vec()],
        inputs: Vec::with_capacity(horizon),
        partner_inputs: Vec::with_capacity(horizon),
        gaps: vec![output_gap(sys, x0, xh0)],
        exits: Vec::new(),
    };
    let outside = |x: &[f64]| {
        let mut p = x.to_vec();
        p.resize(sys.space.len(), 0.0);
        !sys.state_set.contains_unchecked(&p, 0.0)
    };
    if outside(x0) || outside(xh0) {
        traj.exits.push(0);
    }
    let sources = [source, partner_source];
    for t in 0..horizon {
        let x = traj.states[t].clone();
        let xh = traj.partner_states[t].clone();
        let mut slots = [Slot::Pending, Slot::Pending];
        for (c, src) in sources.iter().enumerate() {
            match src {
                InputSource::Sequence(s) => slots[c] = Slot::Known(s[t].clone()),
                InputSource::Random => {
                    slots[c] = Slot::Known(bounds.iter().map(|b| draw(&mut rng, b)).collect())
                }
                _ => {}
            }
        }
        let assemble = |slots: &[Slot; 2]| {
            let mut z = vec![0.0; aug.space.len()];
            z[..n].copy_from_slice(&x);
            z[n..2 * n].copy_from_slice(&xh);
            for (c, s) in slots.iter().enumerate() {
                if let Slot::Known(v) = s {
                    for (&k, &val) in inputs_of(c).iter().zip(v) {
                        z[k] = val;
                    }
                }
            }
            z
        };
        for (c, src) in sources.iter().enumerate() {
            let InputSource::Policy(p) = src else { continue };
            let other = inputs_of(1 - c);
            if matches!(slots[1 - c], Slot::Pending)
                && p.iter().any(|q| q.variables_used().iter().any(|v| other.contains(v)))
            {
                return Err(Error::Invalid(
                    "a policy may only read the other copy's input when that input is given".into(),
                ));
            }
            let z = assemble(&slots);
            slots[c] = Slot::Known(p.iter().map(|q| q.eval(&z)).collect());
        }
        for (c, src) in sources.iter().enumerate() {
            let InputSource::Greedy { levels, gap } = src else { continue };
            let z = assemble(&slots);
            let Slot::Known(fixed) = &slots[1 - c] else {
                return Err(Error::Invalid("greedy input needs the other copy's input".into()));
            };
            let fixed_next = if c == 0 { step(sys, &xh, fixed)? } else { step(sys, &x, fixed)? };
            let mut best: Option<(f64, Vec<f64>)> = None;
            for cand in grid(&bounds, *levels) {
                let own = if c == 0 { &x } else { &xh };
                let next = step(sys, own, &cand)?;
                let mut w = z.clone();
                let (a, b) = if c == 0 { (&next, &fixed_next) } else { (&fixed_next, &next) };
                w[..n].copy_from_slice(a);
                w[n..2 * n].copy_from_slice(b);
                let score = gap.eval(&w);
                if best.as_ref().is_none_or(|(s, _)| score < *s) {
                    best = Some((score, cand));
                }
            }
            slots[c] = Slot::Known(best.map(|b| b.1).unwrap_or_default());
        }
        let [Slot::Known(u), Slot::Known(uh)] = slots else {
            unreachable!("every input slot is resolved above");
        };
        let next = step(sys, &x, &u)?;
        let next_h = step(sys, &xh, &uh)?;
        traj.gaps.push(output_gap(sys, &next, &next_h));
        if outside(&next) || outside(&next_h) {
            traj.exits.push(t + 1);
        }
        traj.states.push(next);
        traj.partner_states.push(next_h);
        traj.inputs.push(u);
        traj.partner_inputs.push(uh);
    }
    Ok(traj)
}

fn draw(rng: &mut ChaCha8Rng, b: &Interval) -> f64 {
    if b.width() == 0.0 {
        b.lo
    } else {
        rng.random_range(b.lo..=b.hi)
    }
}

/// Seed of trial `k` derived from the run seed.
pub fn trial_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn initial_pairs(aug: &AugmentedSystem, regions: &RegionBundle, trials: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = aug.n();
    Ok(sample_set(&regions.r0, None, trials, seed)?
        .into_iter()
        .map(|z| z[..2 * n].to_vec())
        .collect())
}

fn in_ru(aug: &AugmentedSystem, regions: &RegionBundle, traj: &Trajectory, t: usize) -> bool {
    regions.ru.contains_unchecked(&traj.point(aug, t), 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetySummary {
    pub trials: usize,
    pub horizon: usize,
    /// Visited pairs lying in `Ru`, over all trials.
    pub ru_entries: usize,
    pub trials_entering_ru: usize,
    pub worst_gap: f64,
    /// Largest gap over pairs with both copies in `X`.
    pub worst_gap_in_x: f64,
    pub trials_leaving_x: usize,
    /// Steps at which the policy chose a partner input outside `U`.
    pub policy_outside_u: usize,
}

#[derive(Debug, Clone)]
pub struct SafetyRun {
    pub summary: SafetySummary,
    pub trajectories: Vec<Trajectory>,
}

/// Pair runs from sampled `R0` with random `u` and the certificate's policy
/// choosing `û`.
pub fn monte_carlo_safety(
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    cert: &Certificate,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<SafetyRun> {
    if cert.policy.len() != aug.m() {
        return Err(Error::Invalid("safety simulation needs a certificate with a policy".into()));
    }
    let starts = initial_pairs(aug, regions, trials, seed)?;
    let n = aug.n();
    let policy = InputSource::Policy(cert.policy.clone());
    let trajectories = starts
        .par_iter()
        .enumerate()
        .map(|(k, z)| simulate_pair(aug, &z[..n], &z[n..], &InputSource::Random, &policy, horizon, trial_seed(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    let ubox = input_box(&aug.base)?;
    let mut summary = SafetySummary {
        trials: trajectories.len(),
        horizon,
        ru_entries: 0,
        trials_entering_ru: 0,
        worst_gap: 0.0,
        worst_gap_in_x: 0.0,
        trials_leaving_x: 0,
        policy_outside_u: 0,
    };
    for traj in &trajectories {
        let hits = (0..=traj.horizon()).filter(|&t| in_ru(aug, regions, traj, t)).count();
        summary.ru_entries += hits;
        summary.trials_entering_ru += usize::from(hits > 0);
        summary.worst_gap = traj.gaps.iter().copied().fold(summary.worst_gap, f64::max);
        summary.worst_gap_in_x = (0..=traj.horizon())
            .filter(|t| !traj.exits.contains(t))
            .map(|t| traj.gaps[t])
            .fold(summary.worst_gap_in_x, f64::max);
        summary.trials_leaving_x += usize::from(!traj.exits.is_empty());
        summary.policy_outside_u += traj
            .partner_inputs
            .iter()
            .filter(|u| u.iter().zip(&ubox).any(|(v, b)| !b.contains(*v)))
            .count();
    }
    Ok(SafetyRun { summary, trajectories })
}

/// Partner-input strategy in reachability experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adversary {
    Random,
    /// Grid search over `levels` points per input dimension, minimizing the
    /// gap that defines `Ru`.
    Greedy { levels: usize },
}

pub const DEFAULT_GREEDY_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachSummary {
    pub trials: usize,
    pub horizon: usize,
    pub adversary: Adversary,
    pub reached: usize,
    pub timed_out: usize,
    pub median_time_to_ru: Option<f64>,
    /// First time in `Ru`, per trial.
    pub times: Vec<Option<usize>>,
    /// Trials in which a copy left `X` before reaching `Ru`.
    pub left_x_first: usize,
}

#[derive(Debug, Clone)]
pub struct ReachRun {
    pub summary: ReachSummary,
    pub trajectories: Vec<Trajectory>,
}

/// Pair runs from sampled `R0` with `u` from `policy` and `û` from the
/// adversary; records the first time in `Ru`.
pub fn monte_carlo_reach(
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    policy: &[Polynomial],
    adversary: Adversary,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<ReachRun> {
    let starts = initial_pairs(aug, regions, trials, seed)?;
    let n = aug.n();
    let own = InputSource::Policy(policy.to_vec());
    let partner = match adversary {
        Adversary::Random => InputSource::Random,
        Adversary::Greedy { levels } => InputSource::Greedy {
            levels,
            gap: regions.region_gap.clone(),
        },
    };
    let trajectories = starts
        .par_iter()
        .enumerate()
        .map(|(k, z)| simulate_pair(aug, &z[..n], &z[n..], &own, &partner, horizon, trial_seed(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<Option<usize>> = trajectories
        .iter()
        .map(|tr| (0..=tr.horizon()).find(|&t| in_ru(aug, regions, tr, t)))
        .collect();
    let left_x_first = trajectories
        .iter()
        .zip(&times)
        .filter(|(tr, hit)| tr.exits.first().is_some_and(|&e| hit.is_none_or(|h| e < h)))
        .count();
    let mut hits: Vec<usize> = times.iter().flatten().copied().collect();
    hits.sort_unstable();
    let median_time_to_ru = match hits.len() {
        0 => None,
        k if k % 2 == 1 => Some(hits[k / 2] as f64),
        k => Some(0.5 * (hits[k / 2 - 1] + hits[k / 2]) as f64),
    };
    Ok(ReachRun {
        summary: ReachSummary {
            trials: trajectories.len(),
            horizon,
            adversary,
            reached: hits.len(),
            timed_out: trajectories.len() - hits.len(),
            median_time_to_ru,
            times,
            left_x_first,
        },
        trajectories,
    })
}

/// Concatenated CSV of trajectories with a `traj` id column, LF endings.
pub fn write_trajectories_csv<W: Write>(aug: &AugmentedSystem, trajectories: &[Trajectory], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["traj".to_string(), "t".to_string()];
    header.extend((0..aug.space.len()).map(|k| aug.space.name(k).to_string()));
    header.push("gap".into());
    w.write_record(&header)?;
    let (n, m) = (aug.n(), aug.m());
    for (id, tr) in trajectories.iter().enumerate() {
        for t in 0..=tr.horizon() {
            let mut row = vec![id.to_string(), t.to_string()];
            row.extend(tr.states[t].iter().chain(&tr.partner_states[t]).map(f64::to_string));
            if t < tr.horizon() {
                row.extend(tr.inputs[t].iter().chain(&tr.partner_inputs[t]).map(f64::to_string));
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * m));
            }
            row.push(tr.gaps[t].to_string());
            debug_assert_eq!(row.len(), 3 + 2 * n + 2 * m);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_trajectories(aug: &AugmentedSystem, trajectories: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectories_csv(aug, trajectories, file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{build_product, build_reach_regions, build_safety_regions};
    use crate::sysmodel::parse_spec;

    const VEHICLE: &str = r#"{
        "name": "vehicle",
        "state_vars": ["x1", "x2"],
        "input_vars": ["u1"],
        "dynamics": ["x1 + x2 + 0.5*u1", "x2 + u1"],
        "output": ["x1"],
        "state_set": {"box": [[0, 10], [0, 0.1]]},
        "initial_set": {"box": [[0, 10], [0, 0]]},
        "secret_set": {"box": [[0, 1], [0, 0.1]]},
        "input_set": {"box": [[-0.05, 0.05]]},
        "delta": 1
    }"#;

    const ROOM: &str = r#"{
        "name": "room",
        "state_vars": ["T1", "T2"],
        "input_vars": ["nu1", "nu2"],
        "dynamics": [
            "0.892*T1 + 0.05*T2 - 0.0036*nu1*T1 + 0.18*nu1 - 0.008",
            "0.892*T2 + 0.05*T1 - 0.0036*nu2*T2 + 0.18*nu2 - 0.008"
        ],
        "output": ["T2"],
        "state_set": {"box": [[0, 50], [0, 50]]},
        "initial_set": {"box": [[21, 22], [21, 22]]},
        "secret_set": {"box": [[21.5, 50], [0, 50]]},
        "input_set": {"box": [[0, 1], [0, 1]]},
        "delta": 1,
        "reach_monitored": ["T1"]
    }"#;

    #[test]
    fn single_steps() {
        let veh = parse_spec(VEHICLE).unwrap();
        let x = step(&veh, &[0.5, 0.0], &[0.05]).unwrap();
        assert!((x[0] - 0.525).abs() < 1e-12 && (x[1] - 0.05).abs() < 1e-12);
        let room = parse_spec(ROOM).unwrap();
        let t = step(&room, &[21.5, 21.0], &[0.0, 0.0]).unwrap();
        assert!((t[0] - 20.220).abs() < 1e-9 && (t[1] - 19.799).abs() < 1e-9);
        assert!(step(&room, &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn identical_pair_keeps_zero_gap() {
        let aug = build_product(&parse_spec(ROOM).unwrap()).unwrap();
        let seq = InputSource::Sequence(vec![vec![0.3, 0.7]; 20]);
        let tr = simulate_pair(&aug, &[21.0, 21.5], &[21.0, 21.5], &seq, &seq, 20, 0).unwrap();
        assert!(tr.gaps.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn room_cools_toward_equilibrium() {
        let aug = build_product(&parse_spec(ROOM).unwrap()).unwrap();
        let off = InputSource::Sequence(vec![vec![0.0, 0.0]; 200]);
        let tr = simulate_pair(&aug, &[21.8, 21.5], &[21.2, 21.5], &off, &off, 200, 0).unwrap();
        // (I − A)T = αe·Te with A = [[0.892, 0.05], [0.05, 0.892]]
        let eq = -0.008 / (1.0 - 0.892 - 0.05);
        for x in [&tr.states[200], &tr.partner_states[200]] {
            assert!(x.iter().all(|v| (v - eq).abs() < 0.05), "{x:?}");
        }
        assert!(!tr.exits.is_empty());
    }

    #[test]
    fn transitions_re_evaluate_exactly() {
        let aug = build_product(&parse_spec(VEHICLE).unwrap()).unwrap();
        let tr = simulate_pair(&aug, &[0.5, 0.0], &[1.2, 0.0], &InputSource::Random, &InputSource::Random, 50, 9)
            .unwrap();
        for t in 0..tr.horizon() {
            assert_eq!(step(&aug.base, &tr.states[t], &tr.inputs[t]).unwrap(), tr.states[t + 1]);
            assert_eq!(
                step(&aug.base, &tr.partner_states[t], &tr.partner_inputs[t]).unwrap(),
                tr.partner_states[t + 1]
            );
        }
        assert!(tr.inputs.iter().all(|u| u[0].abs() <= 0.05));
    }

    #[test]
    fn greedy_tracks_gap() {
        let aug = build_product(&parse_spec(VEHICLE).unwrap()).unwrap();
        let regions = build_safety_regions(&aug, 0.01).unwrap();
        let greedy = InputSource::Greedy {
            levels: 5,
            gap: regions.region_gap.clone(),
        };
        let zero = InputSource::Sequence(vec![vec![0.05]; 10]);
        let tr = simulate_pair(&aug, &[0.5, 0.0], &[0.5, 0.0], &zero, &greedy, 10, 0).unwrap();
        assert!(tr.partner_inputs.iter().all(|u| u[0] == 0.05));
        assert!(simulate_pair(&aug, &[0.5, 0.0], &[0.5, 0.0], &greedy, &greedy, 3, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let aug = build_product(&parse_spec(VEHICLE).unwrap()).unwrap();
        let tr = simulate_pair(&aug, &[0.5, 0.0], &[1.2, 0.0], &InputSource::Random, &InputSource::Random, 3, 1)
            .unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&aug, &[tr], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "traj,t,x1,x2,xh1,xh2,u1,uh1,gap");
        assert_eq!(lines.len(), 5);
        assert!(!text.contains('\r'));
        assert!(lines[4].starts_with("0,3,") && lines[4].contains(",,"));
    }

    #[test]
    fn unreachable_ru_never_hit() {
        let sys = parse_spec(ROOM).unwrap().with_delta(60.0).unwrap();
        let aug = build_product(&sys).unwrap();
        let regions = build_reach_regions(&aug, 0.01).unwrap();
        let zero = vec![Polynomial::constant(&aug.space, 0.0); 2];
        let run = monte_carlo_reach(&aug, &regions, &zero, Adversary::Random, 5, 20, 3).unwrap();
        assert_eq!(run.summary.reached, 0);
        assert_eq!(run.summary.timed_out, 5);
        assert_eq!(run.summary.median_time_to_ru, None);
    }
}
