//! Control systems with semialgebraic state, initial, secret and input sets.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{Polynomial, VariableSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }
}

/// Conjunction of `g(z) >= 0` constraints and per-variable bounds, further
/// intersected with the union of `union` members when that list is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiAlgebraicSet {
    space: Arc<VariableSpace>,
    pub constraints: Vec<Polynomial>,
    /// One entry per variable of the space; `None` means unbounded.
    pub bounds: Vec<Option<Interval>>,
    pub union: Vec<SemiAlgebraicSet>,
}

impl SemiAlgebraicSet {
    pub fn universe(space: &Arc<VariableSpace>) -> Self {
        Self {
            space: space.clone(),
            constraints: Vec::new(),
            bounds: vec![None; space.len()],
            union: Vec::new(),
        }
    }

    pub fn from_bounds(space: &Arc<VariableSpace>, bounds: Vec<Option<Interval>>) -> Self {
        assert_eq!(bounds.len(), space.len());
        Self {
            bounds,
            ..Self::universe(space)
        }
    }

    pub fn with_constraint(mut self, g: Polynomial) -> Self {
        self.constraints.push(g);
        self
    }

    pub fn with_bound(mut self, var: usize, iv: Interval) -> Self {
        self.bounds[var] = Some(match self.bounds[var] {
            Some(b) => b.intersect(&iv),
            None => iv,
        });
        self
    }

    pub fn union_of(space: &Arc<VariableSpace>, members: Vec<SemiAlgebraicSet>) -> Self {
        Self {
            union: members,
            ..Self::universe(space)
        }
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    /// True if the set is a plain box with every variable in `vars` bounded.
    pub fn is_box_over(&self, vars: &[usize]) -> bool {
        self.constraints.is_empty()
            && self.union.is_empty()
            && vars.iter().all(|&v| self.bounds[v].is_some())
    }

    /// Bound expansion `(z - lo) >= 0`, `(hi - z) >= 0` followed by the explicit
    /// constraints. Union members are not included.
    pub fn basic_constraints(&self) -> Vec<Polynomial> {
        let mut out = Vec::new();
        for (i, b) in self.bounds.iter().enumerate() {
            if let Some(b) = b {
                let z = Polynomial::var(&self.space, i);
                out.push(z.add_constant(-b.lo));
                out.push(z.neg().add_constant(b.hi));
            }
        }
        out.extend(self.constraints.iter().cloned());
        out
    }

    pub fn intersect(&self, other: &SemiAlgebraicSet) -> Result<SemiAlgebraicSet> {
        if self.space != other.space {
            return Err(Error::Dimension("sets live in different variable spaces".into()));
        }
        let bounds = self
            .bounds
            .iter()
            .zip(&other.bounds)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.intersect(b)),
                (Some(a), None) => Some(*a),
                (None, b) => *b,
            })
            .collect();
        let mut constraints = self.constraints.clone();
        constraints.extend(other.constraints.iter().cloned());
        let union = match (self.union.is_empty(), other.union.is_empty()) {
            (true, _) => other.union.clone(),
            (_, true) => self.union.clone(),
            _ => {
                let mut out = Vec::new();
                for a in &self.union {
                    for b in &other.union {
                        out.push(a.intersect(b)?);
                    }
                }
                out
            }
        };
        Ok(SemiAlgebraicSet {
            space: self.space.clone(),
            constraints,
            bounds,
            union,
        })
    }

    /// Disjunctive normal form: union-free pieces whose union is this set.
    pub fn pieces(&self) -> Vec<SemiAlgebraicSet> {
        let own = SemiAlgebraicSet {
            union: Vec::new(),
            ..self.clone()
        };
        if self.union.is_empty() {
            return vec![own];
        }
        self.union
            .iter()
            .flat_map(|m| m.pieces())
            .map(|p| own.intersect(&p).expect("members share the parent space"))
            .collect()
    }

    pub fn contains(&self, point: &[f64]) -> Result<bool> {
        if point.len() != self.space.len() {
            return Err(Error::Dimension(format!(
                "point has {} coordinates, set has {} variables",
                point.len(),
                self.space.len()
            )));
        }
        Ok(self.contains_unchecked(point, 0.0))
    }

    /// Membership with every constraint relaxed by `tol`.
    pub fn contains_unchecked(&self, point: &[f64], tol: f64) -> bool {
        let basic = self
            .bounds
            .iter()
            .zip(point)
            .all(|(b, &v)| b.is_none_or(|b| b.lo - tol <= v && v <= b.hi + tol))
            && self.constraints.iter().all(|g| g.eval(point) >= -tol);
        basic && (self.union.is_empty() || self.union.iter().any(|m| m.contains_unchecked(point, tol)))
    }

    /// Re-expresses the set in `target`, moving variable `i` to `map[i]`.
    pub fn reindex(&self, target: &Arc<VariableSpace>, map: &[usize]) -> SemiAlgebraicSet {
        let mut bounds = vec![None; target.len()];
        for (i, b) in self.bounds.iter().enumerate() {
            if b.is_some() {
                bounds[map[i]] = *b;
            }
        }
        SemiAlgebraicSet {
            space: target.clone(),
            constraints: self.constraints.iter().map(|g| g.reindex(target, map)).collect(),
            bounds,
            union: self.union.iter().map(|m| m.reindex(target, map)).collect(),
        }
    }

    /// All corners of each piece's bounding box that belong to the set.
    /// Pieces with more than 16 non-degenerate bounded variables are skipped.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for piece in self.pieces() {
            let Ok(bbox) = sampling_box(&piece, None) else {
                continue;
            };
            let free: Vec<usize> = (0..bbox.len()).filter(|&i| bbox[i].width() > 0.0).collect();
            if free.len() > 16 || bbox.iter().any(Interval::is_empty) {
                continue;
            }
            for mask in 0u32..(1 << free.len()) {
                let mut p: Vec<f64> = bbox.iter().map(|b| b.lo).collect();
                for (k, &i) in free.iter().enumerate() {
                    if mask & (1 << k) != 0 {
                        p[i] = bbox[i].hi;
                    }
                }
                if piece.contains_unchecked(&p, 0.0) && !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

/// Effective sampling box of a union-free set. Variables that are unbounded
/// and unused by every constraint are pinned at zero.
fn sampling_box(piece: &SemiAlgebraicSet, outer: Option<&[Option<Interval>]>) -> Result<Vec<Interval>> {
    let space = piece.space();
    (0..space.len())
        .map(|i| {
            let own = piece.bounds[i];
            let given = outer.and_then(|o| o[i]);
            match (own, given) {
                (Some(a), Some(b)) => Ok(a.intersect(&b)),
                (Some(a), None) => Ok(a),
                (None, Some(b)) => Ok(b),
                (None, None) => {
                    if piece.constraints.iter().any(|g| g.degree_in(i) > 0) {
                        Err(Error::MissingBounds(space.name(i).to_string()))
                    } else {
                        Ok(Interval::point(0.0))
                    }
                }
            }
        })
        .collect()
}

const MIN_ACCEPTANCE: f64 = 1e-4;
const MIN_ATTEMPTS: usize = 20_000;

/// Draws exactly `count` members of `set` by stratified (Latin hypercube)
/// rejection sampling. Union members receive equal shares of the budget.
pub fn sample_set(
    set: &SemiAlgebraicSet,
    bounding_box: Option<&[Option<Interval>]>,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let pieces = set.pieces();
    let k = pieces.len();
    let mut out = Vec::with_capacity(count);
    for (idx, piece) in pieces.iter().enumerate() {
        let share = count / k + usize::from(idx < count % k);
        if share == 0 {
            continue;
        }
        let bbox = sampling_box(piece, bounding_box)?;
        if bbox.iter().any(Interval::is_empty) {
            return Err(Error::Unsampleable {
                accepted: 0,
                attempts: 0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let mut accepted = 0usize;
        let mut attempts = 0usize;
        let cap = (share as f64 / MIN_ACCEPTANCE) as usize + MIN_ATTEMPTS;
        while accepted < share {
            let batch = ((share - accepted) * 2).clamp(64, 1 << 20);
            for p in latin_hypercube(&bbox, batch, &mut rng) {
                attempts += 1;
                if piece.contains_unchecked(&p, 0.0) {
                    out.push(p);
                    accepted += 1;
                    if accepted == share {
                        break;
                    }
                }
            }
            let rate = accepted as f64 / attempts as f64;
            if accepted < share
                && ((attempts >= MIN_ATTEMPTS && rate < MIN_ACCEPTANCE) || attempts >= cap)
            {
                return Err(Error::Unsampleable { accepted, attempts });
            }
        }
    }
    Ok(out)
}

fn latin_hypercube(bbox: &[Interval], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; bbox.len()]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for (d, iv) in bbox.iter().enumerate() {
        if iv.width() == 0.0 {
            for p in &mut pts {
                p[d] = iv.lo;
            }
            continue;
        }
        strata.shuffle(rng);
        for (p, &s) in pts.iter_mut().zip(&strata) {
            let t = (s as f64 + rng.random::<f64>()) / n as f64;
            p[d] = (iv.lo + t * iv.width()).min(iv.hi);
        }
    }
    pts
}

/// Faces of the box `R` on which a monitored pair `(z, ẑ)` with range
/// `[lo, hi]` leaves through the boundary while staying within `delta`:
/// `[lo, lo+δ]×{lo}`, `{lo}×[lo, lo+δ]`, `{hi}×[hi-δ, hi]`, `[hi-δ, hi]×{hi}`.
/// Returns `R` intersected with the union of faces, four per pair.
pub fn box_boundary_regions(
    r: &SemiAlgebraicSet,
    pairs: &[(usize, usize)],
    delta: f64,
) -> Result<SemiAlgebraicSet> {
    let space = r.space().clone();
    let mut faces = Vec::new();
    for &(z, zh) in pairs {
        let (Some(bz), Some(bzh)) = (r.bounds[z], r.bounds[zh]) else {
            return Err(Error::Unsupported(format!(
                "boundary faces need bounded variables `{}` and `{}`",
                space.name(z),
                space.name(zh)
            )));
        };
        if bz != bzh || !r.constraints.is_empty() || !r.union.is_empty() {
            return Err(Error::Unsupported(
                "boundary faces need a box over identical coordinate ranges".into(),
            ));
        }
        let (lo, hi) = (bz.lo, bz.hi);
        let low = Interval::new(lo, (lo + delta).min(hi));
        let high = Interval::new((hi - delta).max(lo), hi);
        for (iz, izh) in [
            (low, Interval::point(lo)),
            (Interval::point(lo), low),
            (Interval::point(hi), high),
            (high, Interval::point(hi)),
        ] {
            faces.push(
                SemiAlgebraicSet::universe(&space)
                    .with_bound(z, iz)
                    .with_bound(zh, izh),
            );
        }
    }
    let mut out = r.clone();
    out.union = faces;
    Ok(out)
}

/// A discrete-time control system `x⁺ = f(x, u)` with output `y = h(x)`.
///
/// All polynomials and sets live in one space: the states followed by the
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSystem {
    pub name: String,
    pub space: Arc<VariableSpace>,
    pub state_dim: usize,
    pub input_dim: usize,
    pub dynamics: Vec<Polynomial>,
    pub output: Vec<Polynomial>,
    pub state_set: SemiAlgebraicSet,
    pub initial_set: SemiAlgebraicSet,
    pub secret_set: SemiAlgebraicSet,
    pub input_set: SemiAlgebraicSet,
    pub delta: f64,
    /// State indices whose partner gap defines the lack-of-opacity regions,
    /// overriding the coordinates read off the output map.
    pub reach_monitored: Option<Vec<usize>>,
}

impl ControlSystem {
    pub fn state_vars(&self) -> Vec<usize> {
        (0..self.state_dim).collect()
    }

    pub fn input_vars(&self) -> Vec<usize> {
        (self.state_dim..self.state_dim + self.input_dim).collect()
    }

    pub fn with_delta(&self, delta: f64) -> Result<ControlSystem> {
        if !(delta >= 0.0) {
            return Err(Error::NegativeDelta(delta));
        }
        Ok(ControlSystem {
            delta,
            ..self.clone()
        })
    }

    /// Output values at a state.
    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        let mut full = x.to_vec();
        full.resize(self.space.len(), 0.0);
        self.output.iter().map(|h| h.eval(&full)).collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    name: String,
    state_vars: Vec<String>,
    input_vars: Vec<String>,
    dynamics: Vec<String>,
    output: Vec<String>,
    state_set: SetSpec,
    initial_set: SetSpec,
    secret_set: SetSpec,
    input_set: SetSpec,
    delta: f64,
    #[serde(default)]
    reach_monitored: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetSpec {
    #[serde(default, rename = "box")]
    bounds: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    inequalities: Option<Vec<String>>,
    #[serde(default)]
    union: Option<Vec<SetSpec>>,
}

fn build_set(
    spec: &SetSpec,
    field: &str,
    space: &Arc<VariableSpace>,
    vars: &[usize],
) -> Result<SemiAlgebraicSet> {
    let mut set = SemiAlgebraicSet::universe(space);
    if let Some(b) = &spec.bounds {
        if b.len() != vars.len() {
            return Err(Error::Dimension(format!(
                "{field}: box has {} intervals for {} variables",
                b.len(),
                vars.len()
            )));
        }
        for (&v, &[lo, hi]) in vars.iter().zip(b) {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Malformed(format!("{field}: invalid interval [{lo}, {hi}]")));
            }
            set.bounds[v] = Some(Interval::new(lo, hi));
        }
    }
    for text in spec.inequalities.iter().flatten() {
        let g = Polynomial::parse(text, space).map_err(|source| Error::Field {
            field: field.to_string(),
            source,
        })?;
        if let Some(bad) = g.variables_used().into_iter().find(|i| !vars.contains(i)) {
            return Err(Error::Malformed(format!(
                "{field}: variable `{}` is not allowed here",
                space.name(bad)
            )));
        }
        set.constraints.push(g);
    }
    for (k, member) in spec.union.iter().flatten().enumerate() {
        set.union
            .push(build_set(member, &format!("{field}.union[{k}]"), space, vars)?);
    }
    Ok(set)
}

/// Parses and validates a system description in the JSON spec format.
pub fn parse_spec(text: &str) -> Result<ControlSystem> {
    let spec: SpecFile = serde_json::from_str(text)?;
    let space = Arc::new(VariableSpace::system(&spec.state_vars, &spec.input_vars)?);
    let n = spec.state_vars.len();
    let m = spec.input_vars.len();
    if n == 0 {
        return Err(Error::Malformed("at least one state variable is required".into()));
    }
    if spec.dynamics.len() != n {
        return Err(Error::Dimension(format!(
            "{} dynamics components for {n} states",
            spec.dynamics.len()
        )));
    }
    if !(spec.delta >= 0.0) {
        return Err(Error::NegativeDelta(spec.delta));
    }
    let states: Vec<usize> = (0..n).collect();
    let inputs: Vec<usize> = (n..n + m).collect();
    let parse_list = |field: &str, list: &[String], allowed: &[usize]| -> Result<Vec<Polynomial>> {
        list.iter()
            .enumerate()
            .map(|(i, t)| {
                let name = format!("{field}[{i}]");
                let p = Polynomial::parse(t, &space).map_err(|source| Error::Field {
                    field: name.clone(),
                    source,
                })?;
                if let Some(bad) = p.variables_used().into_iter().find(|v| !allowed.contains(v)) {
                    return Err(Error::Malformed(format!(
                        "{name}: variable `{}` is not allowed here",
                        space.name(bad)
                    )));
                }
                Ok(p)
            })
            .collect()
    };
    let all: Vec<usize> = (0..n + m).collect();
    let dynamics = parse_list("dynamics", &spec.dynamics, &all)?;
    let output = parse_list("output", &spec.output, &states)?;
    if output.is_empty() {
        return Err(Error::Malformed("output map is empty".into()));
    }
    let reach_monitored = match &spec.reach_monitored {
        None => None,
        Some(names) => Some(
            names
                .iter()
                .map(|nm| {
                    states
                        .iter()
                        .copied()
                        .find(|&i| space.name(i) == nm)
                        .ok_or_else(|| Error::Malformed(format!("reach_monitored: `{nm}` is not a state")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let sys = ControlSystem {
        name: spec.name,
        state_set: build_set(&spec.state_set, "state_set", &space, &states)?,
        initial_set: build_set(&spec.initial_set, "initial_set", &space, &states)?,
        secret_set: build_set(&spec.secret_set, "secret_set", &space, &states)?,
        input_set: build_set(&spec.input_set, "input_set", &space, &inputs)?,
        space,
        state_dim: n,
        input_dim: m,
        dynamics,
        output,
        delta: spec.delta,
        reach_monitored,
    };
    check_inclusion(&sys, &sys.initial_set, "initial_set")?;
    check_inclusion(&sys, &sys.secret_set, "secret_set")?;
    Ok(sys)
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<ControlSystem> {
    parse_spec(&std::fs::read_to_string(path)?)
}

/// Spot-checks that 1000 samples of `set` lie in the state set.
fn check_inclusion(sys: &ControlSystem, set: &SemiAlgebraicSet, field: &str) -> Result<()> {
    let pts = match sample_set(set, None, 1000, 0) {
        Ok(p) => p,
        Err(Error::Unsampleable { .. }) | Err(Error::MissingBounds(_)) => return Ok(()),
        Err(e) => return Err(e),
    };
    if let Some(p) = pts.iter().find(|p| !sys.state_set.contains_unchecked(p, 0.0)) {
        return Err(Error::Malformed(format!(
            "{field} is not contained in state_set (sample {:?})",
            &p[..sys.state_dim]
        )));
    }
    Ok(())
}
