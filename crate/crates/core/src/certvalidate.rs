//! Certificates, their exchange format, and validation by dense sampling and
//! by re-solving the multiplier-only program.

use std::sync::Arc;

use opacert_sdp::{solve_feasibility, SolveStatus, SolverConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedSystem, RegionBundle};
use crate::error::{Error, Result};
use crate::poly::{Monomial, Polynomial, VariableSpace};
use crate::soscompile::{
    build_lemma1_program, build_lemma2_program, compile_to_sdp, extract_certificate, BlockReport, Degrees,
    MultiplierDegree, PolicyMode, ProgramOptions,
};
use crate::sysmodel::{sample_set, SemiAlgebraicSet};

/// Slack allowed on non-strict conditions for floating-point noise.
pub const NONSTRICT_TOLERANCE: f64 = 1e-9;
pub const MAX_WITNESSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateKind {
    /// Proves opacity: the pair never leaves the safe region.
    Safety,
    /// Proves lack of opacity: the pair is driven out of the close region.
    Reach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthesized,
    #[default]
    UserSupplied,
}

/// Whether the policy was substituted for the input before the decrease
/// condition was built, or kept as the term `Σ (v_i - p_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyUse {
    #[default]
    Literal,
    Substituted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constants {
    Safety { eps_lo: f64, eps_hi: f64 },
    Reach { slack: f64 },
}

/// A certificate over the product space. For safety the policy gives the
/// partner input from `(x, x̂, u)`; for reach it gives the input from `(x, x̂, û)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub space: Arc<VariableSpace>,
    pub polynomial: Polynomial,
    pub policy: Vec<Polynomial>,
    pub policy_use: PolicyUse,
    pub constants: Constants,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermEntry {
    pub exponents: Vec<u32>,
    pub coefficient: f64,
}

/// A polynomial in a certificate file: a term list or an expression.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolyEntry {
    Terms(Vec<TermEntry>),
    Expr(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsEntry {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slack: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub kind: CertificateKind,
    pub variables: Vec<String>,
    pub polynomial: PolyEntry,
    #[serde(default)]
    pub policy: Vec<PolyEntry>,
    #[serde(default)]
    pub policy_use: PolicyUse,
    pub constants: ConstantsEntry,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Certificate {
    pub fn to_file(&self) -> CertificateFile {
        let terms = |p: &Polynomial| {
            PolyEntry::Terms(
                p.terms()
                    .map(|(m, c)| TermEntry {
                        exponents: m.exponents().to_vec(),
                        coefficient: c,
                    })
                    .collect(),
            )
        };
        CertificateFile {
            kind: self.kind,
            variables: self.space.names().to_vec(),
            polynomial: terms(&self.polynomial),
            policy: self.policy.iter().map(terms).collect(),
            policy_use: self.policy_use,
            constants: match self.constants {
                Constants::Safety { eps_lo, eps_hi } => ConstantsEntry {
                    eps_lo: Some(eps_lo),
                    eps_hi: Some(eps_hi),
                    slack: None,
                },
                Constants::Reach { slack } => ConstantsEntry {
                    slack: Some(slack),
                    ..Default::default()
                },
            },
            provenance: self.provenance,
        }
    }

    /// Reads a certificate file against the product space of `aug`, matching
    /// variables by name.
    pub fn from_file(file: &CertificateFile, aug: &AugmentedSystem) -> Result<Certificate> {
        let space = aug.space.clone();
        let map = file
            .variables
            .iter()
            .map(|n| {
                space
                    .index_of(n)
                    .ok_or_else(|| Error::Malformed(format!("certificate variable `{n}` is not in the product space")))
            })
            .collect::<Result<Vec<_>>>()?;
        let read = |entry: &PolyEntry, field: &str| -> Result<Polynomial> {
            match entry {
                PolyEntry::Expr(s) => Polynomial::parse(s, &space).map_err(|e| Error::Field {
                    field: field.to_string(),
                    source: e,
                }),
                PolyEntry::Terms(ts) => {
                    let mut out = Vec::with_capacity(ts.len());
                    for t in ts {
                        if t.exponents.len() != map.len() {
                            return Err(Error::Malformed(format!(
                                "{field}: term has {} exponents for {} variables",
                                t.exponents.len(),
                                map.len()
                            )));
                        }
                        let mut e = vec![0; space.len()];
                        for (k, &x) in t.exponents.iter().enumerate() {
                            e[map[k]] += x;
                        }
                        out.push((Monomial::new(e), t.coefficient));
                    }
                    Ok(Polynomial::from_terms(&space, out))
                }
            }
        };
        let polynomial = read(&file.polynomial, "polynomial")?;
        if polynomial.variables_used().iter().any(|&v| v >= 2 * aug.n()) {
            return Err(Error::Malformed("certificate polynomial may only depend on states".into()));
        }
        let policy = file
            .policy
            .iter()
            .enumerate()
            .map(|(i, p)| read(p, &format!("policy[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        if policy.len() != aug.m() {
            return Err(Error::Dimension(format!(
                "policy has {} components, system has {} inputs",
                policy.len(),
                aug.m()
            )));
        }
        let chosen = match file.kind {
            CertificateKind::Safety => aug.partner_inputs(),
            CertificateKind::Reach => aug.inputs(),
        };
        if policy.iter().any(|p| p.variables_used().iter().any(|v| chosen.contains(v))) {
            return Err(Error::Malformed("policy depends on the input it chooses".into()));
        }
        let c = &file.constants;
        let constants = match (file.kind, c.eps_lo, c.eps_hi, c.slack) {
            (CertificateKind::Safety, Some(eps_lo), Some(eps_hi), None) => {
                if !(eps_hi > eps_lo) {
                    return Err(Error::Invalid(format!("need eps_hi > eps_lo, got {eps_lo} and {eps_hi}")));
                }
                Constants::Safety { eps_lo, eps_hi }
            }
            (CertificateKind::Reach, None, None, Some(slack)) => {
                if !(slack > 0.0) {
                    return Err(Error::Invalid(format!("slack must be positive, got {slack}")));
                }
                Constants::Reach { slack }
            }
            _ => {
                return Err(Error::Malformed(
                    "safety certificates take eps_lo and eps_hi, reach certificates take slack".into(),
                ))
            }
        };
        Ok(Certificate {
            kind: file.kind,
            space,
            polynomial,
            policy,
            policy_use: file.policy_use,
            constants,
            provenance: file.provenance,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(&self.to_file())
    }

    pub fn from_json(text: &str, aug: &AugmentedSystem) -> Result<Certificate> {
        let file: CertificateFile = serde_json::from_str(text)?;
        Self::from_file(&file, aug)
    }

    /// Policy values at a product-space point.
    pub fn policy_at(&self, point: &[f64]) -> Vec<f64> {
        self.policy.iter().map(|p| p.eval(point)).collect()
    }
}

/// Pretty JSON with object keys sorted and numbers in shortest round-trip form.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub point: Vec<f64>,
    /// Amount by which the condition fails at `point`.
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub name: String,
    pub requirement: String,
    pub samples: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// Largest failure amount over all samples; negative when every sample
    /// holds with room to spare.
    pub max_violation: f64,
    pub witnesses: Vec<Witness>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    NoViolationFound,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub kind: CertificateKind,
    pub conditions: Vec<ConditionReport>,
    pub verdict: Verdict,
}

impl ValidationReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Corners of the set followed by `samples` stratified draws.
pub fn probe_points(set: &SemiAlgebraicSet, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut pts = set.corners();
    pts.extend(sample_set(set, None, samples, seed)?);
    Ok(pts)
}

/// Evaluates `failure` at every point; positive values beyond `tolerance`
/// count as violations.
fn check_condition(
    name: &str,
    requirement: &str,
    points: &[Vec<f64>],
    tolerance: f64,
    failure: impl Fn(&[f64]) -> (Vec<f64>, f64) + Sync,
) -> ConditionReport {
    let values: Vec<(Vec<f64>, f64)> = points.par_iter().map(|p| failure(p)).collect();
    let mut max_violation = f64::NEG_INFINITY;
    let mut bad: Vec<(usize, f64)> = Vec::new();
    for (k, (_, v)) in values.iter().enumerate() {
        let v = if v.is_nan() { f64::INFINITY } else { *v };
        max_violation = max_violation.max(v);
        if v > tolerance {
            bad.push((k, v));
        }
    }
    let violations = bad.len();
    bad.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    bad.truncate(MAX_WITNESSES);
    ConditionReport {
        name: name.to_string(),
        requirement: requirement.to_string(),
        samples: points.len(),
        violations,
        violation_rate: if points.is_empty() { 0.0 } else { violations as f64 / points.len() as f64 },
        max_violation: if points.is_empty() { 0.0 } else { max_violation },
        witnesses: bad
            .into_iter()
            .map(|(k, v)| Witness {
                point: values[k].0.clone(),
                violation: v,
            })
            .collect(),
    }
}

/// Product-space point after one paired step; states advance, inputs are kept.
fn advance(aug: &AugmentedSystem, z: &[f64]) -> Vec<f64> {
    let (a, b) = aug.step(z);
    let mut next = z.to_vec();
    for i in 0..aug.n() {
        next[aug.x(i)] = a[i];
        next[aug.xh(i)] = b[i];
    }
    next
}

fn verdict(conditions: &[ConditionReport]) -> Verdict {
    if conditions.iter().all(|c| c.violations == 0) {
        Verdict::NoViolationFound
    } else {
        Verdict::Violated
    }
}

/// Failure amount of the decrease condition at `z`, after the chosen input
/// is set by the policy. Returns the completed point as the witness.
fn decrease_failure(
    cert: &Certificate,
    aug: &AugmentedSystem,
    chosen: &[usize],
    z: &[f64],
    offset: f64,
) -> (Vec<f64>, f64) {
    let mut z = z.to_vec();
    for (&v, p) in chosen.iter().zip(&cert.policy) {
        z[v] = p.eval(&z);
    }
    let next = advance(aug, &z);
    let delta = cert.polynomial.eval(&next) - cert.polynomial.eval(&z);
    (z, delta + offset)
}

/// Samples the three safety conditions: `B ≤ eps_lo` on `R0`, `B ≥ eps_hi`
/// on `Ru`, and `B(next) - B ≤ 0` on `R × U` with the partner input from the policy.
pub fn validate_safety_certificate(
    cert: &Certificate,
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let Constants::Safety { eps_lo, eps_hi } = cert.constants else {
        return Err(Error::Invalid("expected a safety certificate".into()));
    };
    let b = &cert.polynomial;
    let tol = NONSTRICT_TOLERANCE;
    let mut conditions = Vec::new();
    let r0 = probe_points(&regions.r0, samples, seed)?;
    conditions.push(check_condition("initial", "B <= eps_lo on R0", &r0, tol, |z| {
        (z.to_vec(), b.eval(z) - eps_lo)
    }));
    let ru = probe_points(&regions.ru, samples, seed.wrapping_add(1))?;
    conditions.push(check_condition("unsafe", "B >= eps_hi on Ru", &ru, tol, |z| {
        (z.to_vec(), eps_hi - b.eval(z))
    }));
    let domain = regions.r.intersect(&aug.lift(&aug.base.input_set))?;
    let pts = probe_points(&domain, samples, seed.wrapping_add(2))?;
    let chosen = aug.partner_inputs();
    conditions.push(check_condition(
        "decrease",
        "B(f(x,u), f(xh,p(x,xh,u))) - B(x,xh) <= 0 on R x U",
        &pts,
        tol,
        |z| decrease_failure(cert, aug, &chosen, z, 0.0),
    ));
    Ok(ValidationReport {
        kind: CertificateKind::Safety,
        verdict: verdict(&conditions),
        conditions,
    })
}

/// Samples the three reach conditions: `V ≤ 0` on `R0`, `V ≥ slack` on the
/// boundary faces, and `V(next) - V ≤ -slack` on the closure of `R ∖ Ru`
/// with the partner input drawn from `U` and the input from the policy.
pub fn validate_reach_certificate(
    cert: &Certificate,
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let Constants::Reach { slack } = cert.constants else {
        return Err(Error::Invalid("expected a reach certificate".into()));
    };
    let boundary = regions
        .boundary
        .as_ref()
        .ok_or_else(|| Error::Invalid("regions carry no boundary decomposition".into()))?;
    let closure = regions
        .closure
        .as_ref()
        .ok_or_else(|| Error::Invalid("regions carry no closure of R minus Ru".into()))?;
    let v = &cert.polynomial;
    let tol = NONSTRICT_TOLERANCE;
    let mut conditions = Vec::new();
    let r0 = probe_points(&regions.r0, samples, seed)?;
    conditions.push(check_condition("initial", "V <= 0 on R0", &r0, tol, |z| (z.to_vec(), v.eval(z))));
    let faces = probe_points(boundary, samples, seed.wrapping_add(1))?;
    conditions.push(check_condition("boundary", "V >= slack on boundary faces", &faces, tol, |z| {
        (z.to_vec(), slack - v.eval(z))
    }));
    let domain = closure.intersect(&aug.lift_partner(&aug.base.input_set))?;
    let pts = probe_points(&domain, samples, seed.wrapping_add(2))?;
    let chosen = aug.inputs();
    conditions.push(check_condition(
        "decrease",
        "V(f(x,p(x,xh,uh)), f(xh,uh)) - V(x,xh) <= -slack on closure(R minus Ru) x U",
        &pts,
        tol,
        |z| decrease_failure(cert, aug, &chosen, z, slack),
    ));
    Ok(ValidationReport {
        kind: CertificateKind::Reach,
        verdict: verdict(&conditions),
        conditions,
    })
}

pub fn validate_certificate(
    cert: &Certificate,
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    match cert.kind {
        CertificateKind::Safety => validate_safety_certificate(cert, aug, regions, samples, seed),
        CertificateKind::Reach => validate_reach_certificate(cert, aug, regions, samples, seed),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecheckOutcome {
    pub certified: bool,
    pub status: String,
    pub max_residual: Option<f64>,
    pub min_eigenvalue: Option<f64>,
    pub blocks: Vec<BlockReport>,
    pub total_block_rows: usize,
}

/// Holds the certificate and policy fixed and searches for fresh multipliers.
/// Certified only when the SDP is feasible and the repaired Gram blocks pass
/// the eigenvalue margin.
pub fn recheck_fixed_certificate(
    cert: &Certificate,
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    multiplier: MultiplierDegree,
    config: &SolverConfig,
) -> Result<RecheckOutcome> {
    let policy = match cert.policy_use {
        PolicyUse::Literal => PolicyMode::Literal(cert.policy.clone()),
        PolicyUse::Substituted => PolicyMode::Substitute(cert.policy.clone()),
    };
    let degrees = Degrees {
        certificate: cert.polynomial.degree(),
        policy: 0,
        multiplier,
    };
    let mut options = ProgramOptions::new(degrees, policy);
    options.fixed_certificate = Some(cert.polynomial.clone());
    let prog = match cert.constants {
        Constants::Safety { eps_lo, eps_hi } => build_lemma1_program(aug, regions, &options, eps_lo, eps_hi)?,
        Constants::Reach { slack } => build_lemma2_program(aug, regions, &options, slack)?,
    };
    let compiled = compile_to_sdp(&prog)?;
    compiled.check_budget(config.max_block_rows)?;
    let solution = solve_feasibility(&compiled.sdp, config)?;
    let total_block_rows = compiled.total_block_rows();
    if solution.status != SolveStatus::Feasible {
        return Ok(RecheckOutcome {
            certified: false,
            status: status_name(solution.status).into(),
            max_residual: None,
            min_eigenvalue: None,
            blocks: Vec::new(),
            total_block_rows,
        });
    }
    let ex = extract_certificate(&prog, &compiled, &solution)?;
    Ok(RecheckOutcome {
        certified: ex.gram_certified && ex.max_residual < 1e-9,
        status: status_name(solution.status).into(),
        max_residual: Some(ex.max_residual),
        min_eigenvalue: Some(ex.min_eigenvalue),
        blocks: ex.blocks,
        total_block_rows,
    })
}

pub fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Feasible => "feasible",
        SolveStatus::Infeasible => "infeasible",
        SolveStatus::Unknown => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyBoundsReport {
    pub samples: usize,
    pub outside: usize,
    pub fraction_outside: f64,
    /// Points with the policy value that left `U`.
    pub witnesses: Vec<PolicyWitness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyWitness {
    pub point: Vec<f64>,
    pub value: Vec<f64>,
}

/// Fraction of sampled policy arguments whose policy value lies outside `U`.
pub fn check_policy_bounds(
    cert: &Certificate,
    aug: &AugmentedSystem,
    samples: usize,
    seed: u64,
) -> Result<PolicyBoundsReport> {
    let sys = &aug.base;
    let args = match cert.kind {
        CertificateKind::Safety => aug.lift(&sys.input_set),
        CertificateKind::Reach => aug.lift_partner(&sys.input_set),
    };
    let domain = aug.r.intersect(&args)?;
    let pts = probe_points(&domain, samples, seed)?;
    let inputs = sys.input_vars();
    let outcome: Vec<Option<PolicyWitness>> = pts
        .par_iter()
        .map(|z| {
            let value = cert.policy_at(z);
            let mut base = vec![0.0; sys.space.len()];
            for (&j, &v) in inputs.iter().zip(&value) {
                base[j] = v;
            }
            let inside = input_membership(&sys.input_set, &base, &inputs);
            (!inside).then(|| PolicyWitness {
                point: z.clone(),
                value,
            })
        })
        .collect();
    let outside = outcome.iter().filter(|w| w.is_some()).count();
    Ok(PolicyBoundsReport {
        samples: pts.len(),
        outside,
        fraction_outside: if pts.is_empty() { 0.0 } else { outside as f64 / pts.len() as f64 },
        witnesses: outcome.into_iter().flatten().take(MAX_WITNESSES).collect(),
    })
}

/// Membership in `U`, ignoring any state bounds the set might carry.
fn input_membership(set: &SemiAlgebraicSet, point: &[f64], inputs: &[usize]) -> bool {
    let mut relaxed = set.clone();
    for (i, b) in relaxed.bounds.iter_mut().enumerate() {
        if !inputs.contains(&i) {
            *b = None;
        }
    }
    relaxed.contains_unchecked(point, 0.0)
}
