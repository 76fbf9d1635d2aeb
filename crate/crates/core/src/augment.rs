//! The product of a system with itself and the regions used by the safety
//! and reachability certificates.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::poly::{Polynomial, Role, VariableSpace};
use crate::sysmodel::{box_boundary_regions, sample_set, ControlSystem, Interval, SemiAlgebraicSet};

/// Name of the partner copy of a variable: `h` goes before trailing digits,
/// so `x1` becomes `xh1` and `u` becomes `uh`.
pub fn partner_name(name: &str) -> String {
    let split = name.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    format!("{}h{}", &name[..split], &name[split..])
}

/// The system paired with a copy of itself over `(x, x̂, u, û)`.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub base: ControlSystem,
    pub space: Arc<VariableSpace>,
    /// `f(x, u)` in the product space.
    pub dynamics: Vec<Polynomial>,
    /// `f(x̂, û)` in the product space.
    pub partner_dynamics: Vec<Polynomial>,
    pub output: Vec<Polynomial>,
    pub partner_output: Vec<Polynomial>,
    /// `X × X`.
    pub r: SemiAlgebraicSet,
    /// Base-space index to product index, for the first and second copy.
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl AugmentedSystem {
    pub fn n(&self) -> usize {
        self.base.state_dim
    }

    pub fn m(&self) -> usize {
        self.base.input_dim
    }

    pub fn x(&self, i: usize) -> usize {
        i
    }

    pub fn xh(&self, i: usize) -> usize {
        self.n() + i
    }

    pub fn u(&self, j: usize) -> usize {
        2 * self.n() + j
    }

    pub fn uh(&self, j: usize) -> usize {
        2 * self.n() + self.m() + j
    }

    pub fn states(&self) -> Vec<usize> {
        (0..2 * self.n()).collect()
    }

    pub fn inputs(&self) -> Vec<usize> {
        (0..self.m()).map(|j| self.u(j)).collect()
    }

    pub fn partner_inputs(&self) -> Vec<usize> {
        (0..self.m()).map(|j| self.uh(j)).collect()
    }

    /// A base-space set on the first copy.
    pub fn lift(&self, set: &SemiAlgebraicSet) -> SemiAlgebraicSet {
        set.reindex(&self.space, &self.first)
    }

    /// A base-space set on the second copy.
    pub fn lift_partner(&self, set: &SemiAlgebraicSet) -> SemiAlgebraicSet {
        set.reindex(&self.space, &self.second)
    }

    /// `Σ_k (h_k(x) - h_k(x̂))²`.
    pub fn gap_squared(&self) -> Polynomial {
        let mut acc = Polynomial::zero(&self.space);
        for (a, b) in self.output.iter().zip(&self.partner_output) {
            let d = a - b;
            acc = &acc + &(&d * &d);
        }
        acc
    }

    /// `Σ_{i ∈ coords} (x_i - x̂_i)²`.
    pub fn coordinate_gap_squared(&self, coords: &[usize]) -> Polynomial {
        let mut acc = Polynomial::zero(&self.space);
        for &i in coords {
            let d = &Polynomial::var(&self.space, self.x(i)) - &Polynomial::var(&self.space, self.xh(i));
            acc = &acc + &(&d * &d);
        }
        acc
    }

    /// One step of both copies from a full product-space point.
    pub fn step(&self, point: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.dynamics.iter().map(|f| f.eval(point)).collect(),
            self.partner_dynamics.iter().map(|f| f.eval(point)).collect(),
        )
    }
}

pub fn build_product(sys: &ControlSystem) -> Result<AugmentedSystem> {
    let (n, m) = (sys.state_dim, sys.input_dim);
    let base = &sys.space;
    let mut names: Vec<(String, Role)> = Vec::new();
    for i in 0..n {
        names.push((base.name(i).to_string(), Role::State));
    }
    for i in 0..n {
        names.push((partner_name(base.name(i)), Role::PartnerState));
    }
    for j in 0..m {
        names.push((base.name(n + j).to_string(), Role::Input));
    }
    for j in 0..m {
        names.push((partner_name(base.name(n + j)), Role::PartnerInput));
    }
    // Resolve clashes such as a state literally named `xh1`.
    for k in 0..names.len() {
        while names[..k].iter().chain(&names[k + 1..]).any(|(o, _)| *o == names[k].0) {
            names[k].0.push('_');
        }
    }
    let space = Arc::new(VariableSpace::new(names)?);
    let first: Vec<usize> = (0..n).chain(2 * n..2 * n + m).collect();
    let second: Vec<usize> = (n..2 * n).chain(2 * n + m..2 * n + 2 * m).collect();
    let aug = AugmentedSystem {
        base: sys.clone(),
        dynamics: sys.dynamics.iter().map(|f| f.reindex(&space, &first)).collect(),
        partner_dynamics: sys.dynamics.iter().map(|f| f.reindex(&space, &second)).collect(),
        output: sys.output.iter().map(|h| h.reindex(&space, &first)).collect(),
        partner_output: sys.output.iter().map(|h| h.reindex(&space, &second)).collect(),
        r: sys
            .state_set
            .reindex(&space, &first)
            .intersect(&sys.state_set.reindex(&space, &second))?,
        space,
        first,
        second,
    };
    verify_renaming(&aug)?;
    Ok(aug)
}

/// Paired dynamics at `(v, w, v, w)` must reproduce the base dynamics at
/// `(v, w)` in both copies.
fn verify_renaming(aug: &AugmentedSystem) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let nb = aug.base.space.len();
    for _ in 0..100 {
        let v: Vec<f64> = (0..nb).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut full = vec![0.0; aug.space.len()];
        for k in 0..nb {
            full[aug.first[k]] = v[k];
            full[aug.second[k]] = v[k];
        }
        let (a, b) = aug.step(&full);
        for (i, f) in aug.base.dynamics.iter().enumerate() {
            let want = f.eval(&v);
            if a[i] != want || b[i] != want {
                return Err(Error::Invalid("paired dynamics disagree with the base system".into()));
            }
        }
    }
    Ok(())
}

/// Regions of the product space.
#[derive(Debug, Clone)]
pub struct RegionBundle {
    /// Secret initial states paired with δ-close non-secret ones.
    pub r0: SemiAlgebraicSet,
    /// `X × X` with a gap of at least `δ² + margin` on the monitored pairs.
    pub ru: SemiAlgebraicSet,
    pub r: SemiAlgebraicSet,
    /// Faces of `R` through which a δ-close pair can leave; reach only.
    pub boundary: Option<SemiAlgebraicSet>,
    /// `R` with gap at most `δ²`; reach only.
    pub closure: Option<SemiAlgebraicSet>,
    pub margin: f64,
    /// Squared output gap `‖h(x) - h(x̂)‖²`.
    pub gap: Polynomial,
    /// Squared gap that defines `Ru`; equals `gap` unless monitored
    /// coordinates were overridden.
    pub region_gap: Polynomial,
    pub monitored: Vec<usize>,
    pub notes: Vec<String>,
}

/// `a ∖ b`, closed. Supported when `b` is a box or a single inequality.
pub fn set_difference(a: &SemiAlgebraicSet, b: &SemiAlgebraicSet) -> Result<SemiAlgebraicSet> {
    let space = a.space().clone();
    if !b.union.is_empty() {
        return Err(Error::Unsupported("complement of a union".into()));
    }
    let has_bounds = b.bounds.iter().any(Option::is_some);
    match (has_bounds, b.constraints.len()) {
        (true, 0) => {
            let mut pieces = Vec::new();
            for (k, bk) in b.bounds.iter().enumerate() {
                let Some(bk) = bk else { continue };
                let ak = a.bounds[k].unwrap_or(Interval::new(f64::NEG_INFINITY, f64::INFINITY));
                if ak.lo < bk.lo {
                    pieces.push(a.clone().with_bound(k, Interval::new(ak.lo, bk.lo)));
                }
                if ak.hi > bk.hi {
                    pieces.push(a.clone().with_bound(k, Interval::new(bk.hi, ak.hi)));
                }
            }
            if pieces.is_empty() {
                return Ok(empty_set(&space));
            }
            if pieces.len() == 1 {
                return Ok(pieces.pop().unwrap());
            }
            Ok(SemiAlgebraicSet::union_of(&space, pieces))
        }
        (false, 1) => Ok(a.clone().with_constraint(b.constraints[0].neg())),
        (false, 0) => Ok(empty_set(&space)),
        _ => Err(Error::Unsupported(
            "secret set must be a box or a single inequality to form its complement".into(),
        )),
    }
}

pub fn empty_set(space: &Arc<VariableSpace>) -> SemiAlgebraicSet {
    SemiAlgebraicSet::universe(space).with_constraint(Polynomial::constant(space, -1.0))
}

/// True when the set is recognisably empty: an empty interval or a negative
/// constant constraint in every piece.
pub fn is_trivially_empty(set: &SemiAlgebraicSet) -> bool {
    set.pieces().iter().all(|p| {
        p.bounds.iter().flatten().any(Interval::is_empty)
            || p.constraints.iter().any(|g| g.degree() == 0 && g.eval(&vec![0.0; g.space().len()]) < 0.0)
    })
}

fn initial_region(aug: &AugmentedSystem) -> Result<SemiAlgebraicSet> {
    let sys = &aug.base;
    let secret_init = sys.initial_set.intersect(&sys.secret_set)?;
    let other_init = set_difference(&sys.initial_set, &sys.secret_set)?;
    let gap = aug.gap_squared();
    let d2 = sys.delta * sys.delta;
    aug.lift(&secret_init)
        .intersect(&aug.lift_partner(&other_init))
        .map(|s| s.with_constraint(gap.neg().add_constant(d2)))
}

/// Regions of the safety-type certificate. `Ru` uses `gap² ≥ δ² + margin`.
pub fn build_safety_regions(aug: &AugmentedSystem, margin: f64) -> Result<RegionBundle> {
    if !(margin > 0.0) {
        return Err(Error::Invalid(format!("margin must be positive, got {margin}")));
    }
    let d2 = aug.base.delta * aug.base.delta;
    let gap = aug.gap_squared();
    let ru = aug.r.clone().with_constraint(gap.add_constant(-d2 - margin));
    Ok(RegionBundle {
        r0: initial_region(aug)?,
        ru,
        r: aug.r.clone(),
        boundary: None,
        closure: None,
        margin,
        region_gap: gap.clone(),
        gap,
        monitored: Vec::new(),
        notes: Vec::new(),
    })
}

/// State coordinates observed by an output map made of single coordinates.
fn projected_coordinates(sys: &ControlSystem) -> Option<Vec<usize>> {
    sys.output
        .iter()
        .map(|h| {
            let mut terms = h.terms();
            match (terms.next(), terms.next()) {
                (Some((m, c)), None) if c == 1.0 && m.degree() == 1 => {
                    m.exponents().iter().position(|&e| e == 1)
                }
                _ => None,
            }
        })
        .collect()
}

/// Regions of the reachability-type certificate. `X` must be a box.
pub fn build_reach_regions(aug: &AugmentedSystem, margin: f64) -> Result<RegionBundle> {
    let sys = &aug.base;
    let states = sys.state_vars();
    if !sys.state_set.is_box_over(&states)
        || states
            .iter()
            .any(|&i| sys.state_set.bounds[i].is_some_and(|b| !b.lo.is_finite() || !b.hi.is_finite()))
    {
        return Err(Error::Unsupported("reach regions need a bounded box state set".into()));
    }
    let mut notes = Vec::new();
    let observed = projected_coordinates(sys);
    let monitored = match (&sys.reach_monitored, &observed) {
        (Some(m), obs) => {
            if obs.as_ref() != Some(m) {
                let names = |v: &[usize]| {
                    v.iter().map(|&i| sys.space.name(i)).collect::<Vec<_>>().join(", ")
                };
                notes.push(format!(
                    "reach regions monitor [{}] while the output map observes {}",
                    names(m),
                    match obs {
                        Some(o) => format!("[{}]", names(o)),
                        None => "a non-coordinate output".to_string(),
                    }
                ));
            }
            m.clone()
        }
        (None, Some(o)) => o.clone(),
        (None, None) => {
            return Err(Error::Unsupported(
                "boundary faces need an output map made of state coordinates".into(),
            ))
        }
    };
    let mut safety = build_safety_regions(aug, margin)?;
    let d2 = sys.delta * sys.delta;
    let region_gap = aug.coordinate_gap_squared(&monitored);
    if states.iter().any(|&i| sys.state_set.bounds[i].unwrap().width() == 0.0) {
        notes.push("state set is degenerate in some coordinate; boundary faces collapse".into());
    }
    let pairs: Vec<(usize, usize)> = monitored.iter().map(|&i| (aug.x(i), aug.xh(i))).collect();
    safety.boundary = Some(box_boundary_regions(&aug.r, &pairs, sys.delta)?);
    safety.closure = Some(aug.r.clone().with_constraint(region_gap.neg().add_constant(d2)));
    safety.ru = aug.r.clone().with_constraint(region_gap.add_constant(-d2 - margin));
    safety.region_gap = region_gap;
    safety.monitored = monitored;
    safety.notes = notes;
    Ok(safety)
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub holds: bool,
    pub checked: usize,
    /// Secret initial state with no δ-close non-secret partner found.
    pub witness: Option<Vec<f64>>,
    /// Smallest output distance found for the witness.
    pub witness_gap: Option<f64>,
    pub delta: f64,
}

/// Checks that every secret initial state has a non-secret initial state
/// with output within δ, by sampling secret states (box corners first) and
/// searching the non-secret ones.
pub fn check_initial_assumption(sys: &ControlSystem, samples: usize, seed: u64) -> Result<AssumptionReport> {
    let n = sys.state_dim;
    let secret_init = sys.initial_set.intersect(&sys.secret_set)?;
    let mut report = AssumptionReport {
        holds: true,
        checked: 0,
        witness: None,
        witness_gap: None,
        delta: sys.delta,
    };
    if is_trivially_empty(&secret_init) {
        return Ok(report);
    }
    let mut x0s = secret_init.corners();
    x0s.extend(sample_set(&secret_init, None, samples, seed)?);
    report.checked = x0s.len();

    let others = set_difference(&sys.initial_set, &sys.secret_set)?;
    let pieces: Vec<SemiAlgebraicSet> = if is_trivially_empty(&others) {
        Vec::new()
    } else {
        others.pieces()
    };
    let pool = if pieces.is_empty() {
        Vec::new()
    } else {
        let mut p = others.corners();
        p.extend(sample_set(&others, None, 2000, seed.wrapping_add(1))?);
        p
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        sys.observe(&a[..n])
            .iter()
            .zip(sys.observe(&b[..n]))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let best: Vec<f64> = x0s
        .par_iter()
        .map(|x0| {
            let mut best = f64::INFINITY;
            let mut best_pt: Option<&[f64]> = None;
            let projections: Vec<Vec<f64>> = pieces
                .iter()
                .map(|piece| {
                    x0.iter()
                        .enumerate()
                        .map(|(i, &v)| match piece.bounds[i] {
                            Some(b) => v.clamp(b.lo, b.hi),
                            None => v,
                        })
                        .collect::<Vec<f64>>()
                })
                .zip(&pieces)
                .filter(|(p, piece)| piece.contains_unchecked(p, 0.0))
                .map(|(p, _)| p)
                .collect();
            let search = projections.iter().chain(&pool);
            for (k, p) in search.enumerate() {
                if k >= projections.len() && best <= sys.delta {
                    break;
                }
                let d = dist(x0, p);
                if d < best {
                    best = d;
                    best_pt = Some(p);
                }
            }
            if best > sys.delta {
                if let Some(start) = best_pt {
                    best = best.min(pattern_search(&others, start.to_vec(), |p| dist(x0, p)));
                }
            }
            best
        })
        .collect();
    let tol = 1e-12 * (1.0 + sys.delta);
    let mut worst: Option<usize> = None;
    for (k, &b) in best.iter().enumerate() {
        if b > sys.delta + tol && worst.is_none_or(|w| b > best[w]) {
            worst = Some(k);
        }
    }
    if let Some(w) = worst {
        report.holds = false;
        report.witness = Some(x0s[w][..n].to_vec());
        report.witness_gap = Some(best[w]);
    }
    Ok(report)
}

/// Coordinate search inside `set` that shrinks `cost`.
fn pattern_search(set: &SemiAlgebraicSet, mut at: Vec<f64>, cost: impl Fn(&[f64]) -> f64) -> f64 {
    let mut val = cost(&at);
    let mut steps: Vec<f64> = set
        .pieces()
        .first()
        .map(|p| {
            p.bounds
                .iter()
                .map(|b| b.map_or(1.0, |b| 0.25 * b.width()))
                .collect()
        })
        .unwrap_or_default();
    for _ in 0..40 {
        let mut improved = false;
        for i in 0..steps.len() {
            for dir in [-1.0, 1.0] {
                let mut cand = at.clone();
                cand[i] += dir * steps[i];
                if set.contains_unchecked(&cand, 0.0) {
                    let c = cost(&cand);
                    if c < val {
                        val = c;
                        at = cand;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            steps.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    val
}
