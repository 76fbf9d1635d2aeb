//! Sum-of-squares programs for the safety and reachability certificates and
//! their compilation into block semidefinite feasibility problems.
//!
//! Programs are assembled in normalized coordinates, where the state and
//! input boxes map to `[-1, 1]`. Certificates and policies are mapped back on
//! extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use opacert_sdp::{min_eigenvalue_check, Constraint, SdpProblem, SdpSolution, SolveStatus};
use serde::Serialize;

use crate::augment::{AugmentedSystem, RegionBundle};
use crate::certvalidate::{Certificate, CertificateKind, Constants, PolicyUse, Provenance};
use crate::error::{Error, Result};
use crate::poly::{monomial_basis_in, Monomial, Polynomial, VariableSpace};
use crate::sysmodel::{Interval, SemiAlgebraicSet};

/// Gram blocks must certify nonnegativity down to this eigenvalue.
pub const EIGENVALUE_MARGIN: f64 = 1e-8;

/// A polynomial whose coefficients are affine in the free unknowns:
/// `constant + Σ_k w_k linear[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePoly {
    pub constant: Polynomial,
    pub linear: BTreeMap<usize, Polynomial>,
}

impl AffinePoly {
    pub fn known(p: Polynomial) -> Self {
        Self {
            constant: p,
            linear: BTreeMap::new(),
        }
    }

    pub fn zero(space: &Arc<VariableSpace>) -> Self {
        Self::known(Polynomial::zero(space))
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        self.constant.space()
    }

    pub fn is_known(&self) -> bool {
        self.linear.is_empty()
    }

    pub fn add(&self, other: &AffinePoly) -> AffinePoly {
        let mut linear = self.linear.clone();
        for (k, p) in &other.linear {
            let sum = match linear.get(k) {
                Some(q) => q + p,
                None => p.clone(),
            };
            if sum.is_zero() {
                linear.remove(k);
            } else {
                linear.insert(*k, sum);
            }
        }
        AffinePoly {
            constant: &self.constant + &other.constant,
            linear,
        }
    }

    pub fn sub(&self, other: &AffinePoly) -> AffinePoly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> AffinePoly {
        AffinePoly {
            constant: self.constant.scale(c),
            linear: self.linear.iter().map(|(k, p)| (*k, p.scale(c))).collect(),
        }
    }

    pub fn add_constant(&self, c: f64) -> AffinePoly {
        AffinePoly {
            constant: self.constant.add_constant(c),
            linear: self.linear.clone(),
        }
    }

    /// Product that refuses to multiply two unknown-dependent factors.
    pub fn mul(&self, other: &AffinePoly) -> Result<AffinePoly> {
        let (known, affine) = match (self.is_known(), other.is_known()) {
            (true, _) => (&self.constant, other),
            (_, true) => (&other.constant, self),
            _ => {
                return Err(Error::Invalid(
                    "product of two unknown polynomials breaks the affine structure".into(),
                ))
            }
        };
        Ok(AffinePoly {
            constant: &affine.constant * known,
            linear: affine
                .linear
                .iter()
                .map(|(k, p)| (*k, p * known))
                .filter(|(_, p)| !p.is_zero())
                .collect(),
        })
    }

    /// Composition with known images, as in [`Polynomial::substitute`].
    pub fn compose(&self, images: &[Polynomial]) -> Result<AffinePoly> {
        Ok(AffinePoly {
            constant: self.constant.substitute(images)?,
            linear: self
                .linear
                .iter()
                .map(|(k, p)| Ok((*k, p.substitute(images)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn degree(&self) -> u32 {
        self.linear
            .values()
            .map(Polynomial::degree)
            .chain([self.constant.degree()])
            .max()
            .unwrap_or(0)
    }

    pub fn degree_in(&self, var: usize) -> u32 {
        self.linear
            .values()
            .map(|p| p.degree_in(var))
            .chain([self.constant.degree_in(var)])
            .max()
            .unwrap_or(0)
    }

    pub fn variables_used(&self) -> Vec<usize> {
        let mut vars: BTreeSet<usize> = self.constant.variables_used().into_iter().collect();
        for p in self.linear.values() {
            vars.extend(p.variables_used());
        }
        vars.into_iter().collect()
    }

    /// Every monomial with a nonzero coefficient in any part.
    pub fn support(&self) -> BTreeSet<Monomial> {
        let mut out: BTreeSet<Monomial> = self.constant.terms().map(|(m, _)| m.clone()).collect();
        for p in self.linear.values() {
            out.extend(p.terms().map(|(m, _)| m.clone()));
        }
        out
    }

    /// The polynomial at a given assignment of the unknowns.
    pub fn realize(&self, unknowns: &[f64]) -> Polynomial {
        let mut acc = self.constant.clone();
        for (k, p) in &self.linear {
            acc = &acc + &p.scale(unknowns[*k]);
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateRole {
    Certificate,
    PolicyComponent,
    SosMultiplier,
}

/// A polynomial with unknown coefficients over a fixed monomial basis.
/// Free templates own the unknowns `offset..offset + basis.len()`; SOS
/// multipliers own a Gram block instead.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTemplate {
    pub name: String,
    pub role: TemplateRole,
    pub basis: Vec<Monomial>,
    pub offset: usize,
}

impl PolyTemplate {
    pub fn affine(&self, space: &Arc<VariableSpace>) -> AffinePoly {
        let mut out = AffinePoly::zero(space);
        for (k, m) in self.basis.iter().enumerate() {
            out.linear
                .insert(self.offset + k, Polynomial::from_terms(space, [(m.clone(), 1.0)]));
        }
        out
    }

    pub fn realize(&self, space: &Arc<VariableSpace>, unknowns: &[f64]) -> Polynomial {
        Polynomial::from_terms(
            space,
            self.basis
                .iter()
                .enumerate()
                .map(|(k, m)| (m.clone(), unknowns[self.offset + k])),
        )
    }
}

/// `σ(vars) · g` with `σ` an SOS polynomial of the given even degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Multiplier {
    pub g: Polynomial,
    pub vars: Vec<usize>,
    pub degree: u32,
}

impl Multiplier {
    pub fn basis(&self) -> Vec<Monomial> {
        monomial_basis_in(self.g.space().len(), &self.vars, self.degree / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintGroup {
    /// Certificate bounded above on the initial region.
    Initial,
    /// Certificate bounded below on the unsafe region.
    Unsafe,
    /// Certificate bounded below on a boundary face.
    Boundary,
    /// One-step decrease along paired transitions.
    Decrease,
    /// Policy output inside the input box.
    PolicyBound,
}

/// `expr - Σ σ_j g_j` must be SOS over the monomials of `gram_vars` up to
/// half of `gram_degree`.
#[derive(Debug, Clone, PartialEq)]
pub struct SosConstraint {
    pub label: String,
    pub group: ConstraintGroup,
    pub expr: AffinePoly,
    pub multipliers: Vec<Multiplier>,
    pub gram_vars: Vec<usize>,
    /// Highest total degree present in the expression and multiplier terms.
    pub degree: u32,
    /// Even degree of the Gram form.
    pub gram_degree: u32,
}

impl SosConstraint {
    /// Full basis of `gram_vars` up to half the Gram degree. Pruning drops
    /// monomials whose square exceeds the degree actually present, in total
    /// or in any single variable; such rows of the Gram matrix are forced
    /// to zero anyway.
    pub fn gram_basis(&self, prune: bool) -> Vec<Monomial> {
        let nvars = self.expr.space().len();
        let full = monomial_basis_in(nvars, &self.gram_vars, self.gram_degree / 2);
        if !prune {
            return full;
        }
        let caps: Vec<u32> = (0..nvars)
            .map(|i| {
                let mut cap = self.expr.degree_in(i);
                for m in &self.multipliers {
                    let own = if m.vars.contains(&i) { m.degree } else { 0 };
                    cap = cap.max(m.g.degree_in(i) + own);
                }
                cap
            })
            .collect();
        full.into_iter()
            .filter(|m| 2 * m.degree() <= self.degree)
            .filter(|m| m.exponents().iter().zip(&caps).all(|(&e, &c)| 2 * e <= c))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MultiplierDegree {
    /// Largest even degree that keeps each product within the expression's
    /// (even) degree.
    #[default]
    Auto,
    /// Degree `d`, lowered (by even steps) for any constraint whose product
    /// would pass both the expression's degree and `d + 1`.
    AtMost(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Degrees {
    pub certificate: u32,
    pub policy: u32,
    pub multiplier: MultiplierDegree,
}

/// How the policy enters the decrease condition.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyMode {
    /// Policy coefficients are unknowns; the term `Σ (v_i - p_i)` is kept.
    Synthesize,
    /// Known policy kept in the term `Σ (v_i - p_i)`.
    Literal(Vec<Polynomial>),
    /// Known policy substituted for the controlled input; the term vanishes.
    Substitute(Vec<Polynomial>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramOptions {
    pub degrees: Degrees,
    pub policy: PolicyMode,
    /// Adds `hi - p_i` and `p_i - lo` SOS constraints when the input set is a box.
    pub policy_in_box: bool,
    /// Certificate held fixed (product-space coordinates); only multipliers
    /// and, if synthesized, the policy remain unknown.
    pub fixed_certificate: Option<Polynomial>,
    pub normalize: bool,
    pub prune: bool,
}

impl ProgramOptions {
    pub fn new(degrees: Degrees, policy: PolicyMode) -> Self {
        Self {
            degrees,
            policy,
            policy_in_box: false,
            fixed_certificate: None,
            normalize: true,
            prune: true,
        }
    }
}

/// Affine change `z = center + scale · z̃` on the product space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaling {
    pub fn identity(n: usize) -> Self {
        Self {
            center: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Maps the bounding boxes of `X` (both copies) and `U` (both copies) to `[-1, 1]`.
    pub fn for_system(aug: &AugmentedSystem) -> Self {
        let sys = &aug.base;
        let n = aug.space.len();
        let mut out = Self::identity(n);
        let state_box = hull(&sys.state_set);
        let input_box = hull(&sys.input_set);
        let mut set = |product: usize, iv: Option<Interval>| {
            if let Some(iv) = iv {
                if iv.lo.is_finite() && iv.hi.is_finite() && iv.width() > 0.0 {
                    out.center[product] = 0.5 * (iv.lo + iv.hi);
                    out.scale[product] = 0.5 * iv.width();
                }
            }
        };
        for i in 0..aug.n() {
            set(aug.x(i), state_box[i]);
            set(aug.xh(i), state_box[i]);
        }
        for j in 0..aug.m() {
            set(aug.u(j), input_box[sys.state_dim + j]);
            set(aug.uh(j), input_box[sys.state_dim + j]);
        }
        out
    }

    fn images(&self, space: &Arc<VariableSpace>, forward: bool) -> Vec<Polynomial> {
        (0..space.len())
            .map(|i| {
                let z = Polynomial::var(space, i);
                if forward {
                    z.scale(self.scale[i]).add_constant(self.center[i])
                } else {
                    z.add_constant(-self.center[i]).scale(1.0 / self.scale[i])
                }
            })
            .collect()
    }

    /// `p(center + scale · z̃)`.
    pub fn to_normalized(&self, p: &Polynomial) -> Result<Polynomial> {
        Ok(p.substitute(&self.images(p.space(), true))?)
    }

    /// `p̃((z - center) / scale)`.
    pub fn to_original(&self, p: &Polynomial) -> Result<Polynomial> {
        Ok(p.substitute(&self.images(p.space(), false))?)
    }

    /// Constraint `g ≥ 0` in normalized coordinates, divided by its largest coefficient.
    pub fn constraint(&self, g: &Polynomial) -> Result<Polynomial> {
        let t = self.to_normalized(g)?;
        let s = t.max_abs_coefficient();
        Ok(if s > 0.0 { t.scale(1.0 / s) } else { t })
    }

    pub fn point_to_normalized(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| (v - self.center[i]) / self.scale[i])
            .collect()
    }
}

/// Per-variable hull of the bounds over all pieces of a set.
fn hull(set: &SemiAlgebraicSet) -> Vec<Option<Interval>> {
    let pieces = set.pieces();
    (0..set.space().len())
        .map(|i| {
            pieces.iter().try_fold(None::<Interval>, |acc, p| {
                let b = p.bounds[i]?;
                Some(Some(match acc {
                    Some(a) => Interval::new(a.lo.min(b.lo), a.hi.max(b.hi)),
                    None => b,
                }))
            })?
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ProgramConstants {
    Safety { eps_lo: f64, eps_hi: f64 },
    Reach { slack: f64 },
}

#[derive(Debug, Clone)]
pub struct SosProgram {
    pub kind: CertificateKind,
    pub space: Arc<VariableSpace>,
    pub templates: Vec<PolyTemplate>,
    pub constraints: Vec<SosConstraint>,
    pub constants: ProgramConstants,
    pub scaling: Scaling,
    /// Number of free scalar unknowns.
    pub num_unknowns: usize,
    /// Certificate in normalized coordinates when held fixed.
    pub fixed_certificate: Option<Polynomial>,
    pub policy: PolicyMode,
    pub prune: bool,
    pub notes: Vec<String>,
}

impl SosProgram {
    pub fn template(&self, role: TemplateRole) -> impl Iterator<Item = &PolyTemplate> {
        self.templates.iter().filter(move |t| t.role == role)
    }

    pub fn groups(&self) -> BTreeMap<ConstraintGroup, usize> {
        let mut out = BTreeMap::new();
        for c in &self.constraints {
            *out.entry(c.group).or_insert(0) += 1;
        }
        out
    }
}

struct Assembler<'a> {
    aug: &'a AugmentedSystem,
    scaling: Scaling,
    options: &'a ProgramOptions,
    templates: Vec<PolyTemplate>,
    constraints: Vec<SosConstraint>,
    unknowns: usize,
    notes: Vec<String>,
}

impl<'a> Assembler<'a> {
    fn new(aug: &'a AugmentedSystem, options: &'a ProgramOptions) -> Self {
        let scaling = if options.normalize {
            Scaling::for_system(aug)
        } else {
            Scaling::identity(aug.space.len())
        };
        Self {
            aug,
            scaling,
            options,
            templates: Vec::new(),
            constraints: Vec::new(),
            unknowns: 0,
            notes: Vec::new(),
        }
    }

    fn space(&self) -> &Arc<VariableSpace> {
        &self.aug.space
    }

    fn free_template(&mut self, name: String, role: TemplateRole, vars: &[usize], degree: u32) -> AffinePoly {
        let t = PolyTemplate {
            name,
            role,
            basis: monomial_basis_in(self.space().len(), vars, degree),
            offset: self.unknowns,
        };
        self.unknowns += t.basis.len();
        let a = t.affine(&self.aug.space);
        self.templates.push(t);
        a
    }

    /// The certificate as a function of `(x, x̂)` in normalized coordinates.
    fn certificate(&mut self, name: &str) -> Result<AffinePoly> {
        match &self.options.fixed_certificate {
            Some(c) => {
                let c = c.embed(self.space())?;
                if c.variables_used().iter().any(|&v| v >= 2 * self.aug.n()) {
                    return Err(Error::Invalid("certificate may only depend on states".into()));
                }
                Ok(AffinePoly::known(self.scaling.to_normalized(&c)?))
            }
            None => {
                let states = self.aug.states();
                Ok(self.free_template(
                    name.to_string(),
                    TemplateRole::Certificate,
                    &states,
                    self.options.degrees.certificate,
                ))
            }
        }
    }

    /// Normalized next states of both copies, with the controlled input
    /// optionally replaced by a known policy.
    fn next_state_images(&self, replace: Option<(&[usize], &[Polynomial])>) -> Result<Vec<Polynomial>> {
        let aug = self.aug;
        let space = self.space();
        let mut inputs: Vec<Polynomial> = (0..space.len()).map(|i| Polynomial::var(space, i)).collect();
        if let Some((vars, policy)) = replace {
            for (&v, p) in vars.iter().zip(policy) {
                let p = self.scaling.to_normalized(&p.embed(space)?)?;
                inputs[v] = p.add_constant(-self.scaling.center[v]).scale(1.0 / self.scaling.scale[v]);
            }
        }
        let forward = self.scaling.images(space, true);
        let mut images: Vec<Polynomial> = (0..space.len()).map(|i| Polynomial::var(space, i)).collect();
        for i in 0..aug.n() {
            for (slot, f) in [(aug.x(i), &aug.dynamics[i]), (aug.xh(i), &aug.partner_dynamics[i])] {
                let g = f.substitute(&forward)?;
                let g = g.add_constant(-self.scaling.center[slot]).scale(1.0 / self.scaling.scale[slot]);
                images[slot] = g.substitute(&inputs)?;
            }
        }
        Ok(images)
    }

    /// `Σ_i (v_i - p_i)` in original units, with `v` the variables being chosen.
    fn policy_term(&mut self, chosen: &[usize], args: &[usize]) -> Result<Option<AffinePoly>> {
        let space = self.aug.space.clone();
        let policies: Vec<AffinePoly> = match &self.options.policy {
            PolicyMode::Substitute(_) => return Ok(None),
            PolicyMode::Literal(p) => {
                if p.len() != chosen.len() {
                    return Err(Error::Dimension(format!(
                        "policy has {} components, system has {} inputs",
                        p.len(),
                        chosen.len()
                    )));
                }
                p.iter()
                    .map(|pi| Ok(AffinePoly::known(self.scaling.to_normalized(&pi.embed(&space)?)?)))
                    .collect::<Result<_>>()?
            }
            PolicyMode::Synthesize => (0..chosen.len())
                .map(|i| {
                    let name = format!("p_{}", space.name(chosen[i]));
                    self.free_template(name, TemplateRole::PolicyComponent, args, self.options.degrees.policy)
                })
                .collect(),
        };
        let mut term = AffinePoly::zero(&space);
        for (&v, p) in chosen.iter().zip(&policies) {
            let value = Polynomial::var(&space, v)
                .scale(self.scaling.scale[v])
                .add_constant(self.scaling.center[v]);
            term = term.add(&AffinePoly::known(value)).sub(p);
        }
        Ok(Some(term))
    }

    /// Normalized constraints of a union-free piece.
    fn piece_constraints(&self, piece: &SemiAlgebraicSet) -> Result<Vec<Polynomial>> {
        piece
            .basic_constraints()
            .iter()
            .map(|g| self.scaling.constraint(g))
            .filter(|g| !matches!(g, Ok(p) if p.degree() == 0 && p.eval(&vec![0.0; p.space().len()]) >= 0.0))
            .collect()
    }

    fn push(
        &mut self,
        label: String,
        group: ConstraintGroup,
        expr: AffinePoly,
        groups: Vec<(Vec<Polynomial>, Vec<usize>)>,
    ) {
        let raw = expr.degree();
        let target = raw + raw % 2;
        let mut multipliers = Vec::new();
        for (gs, vars) in groups {
            for g in gs {
                let dg = g.degree();
                let degree = match self.options.degrees.multiplier {
                    MultiplierDegree::AtMost(d) => d.min(target.max(d + 1).saturating_sub(dg) & !1),
                    MultiplierDegree::Auto => target.saturating_sub(dg) & !1,
                };
                multipliers.push(Multiplier { g, vars: vars.clone(), degree });
            }
        }
        let degree = multipliers
            .iter()
            .map(|m| m.g.degree() + m.degree)
            .chain([raw])
            .max()
            .unwrap_or(0);
        let gram_degree = degree + degree % 2;
        if degree % 2 == 1 {
            self.notes.push(format!("{label}: degree {degree} is odd, Gram form raised to {gram_degree}"));
        }
        let mut vars: BTreeSet<usize> = expr.variables_used().into_iter().collect();
        for m in &multipliers {
            vars.extend(m.g.variables_used());
            if m.degree > 0 {
                vars.extend(m.vars.iter().copied());
            }
        }
        self.constraints.push(SosConstraint {
            label,
            group,
            expr,
            multipliers,
            gram_vars: vars.into_iter().collect(),
            degree,
            gram_degree,
        });
    }

    /// Input set constraints lifted onto the given copy's input variables.
    fn input_pieces(&self, partner: bool) -> Vec<SemiAlgebraicSet> {
        let sys = &self.aug.base;
        let set = if partner {
            self.aug.lift_partner(&sys.input_set)
        } else {
            self.aug.lift(&sys.input_set)
        };
        set.pieces()
    }

    fn policy_bounds(&mut self, args: &[usize], region: &SemiAlgebraicSet, input_partner: bool) -> Result<()> {
        if !self.options.policy_in_box {
            return Ok(());
        }
        let sys = &self.aug.base;
        let inputs = sys.input_vars();
        if !sys.input_set.is_box_over(&inputs) {
            return Err(Error::Unsupported("policy bounds need a box input set".into()));
        }
        let policies: Vec<PolyTemplate> = self.template_list(TemplateRole::PolicyComponent);
        if policies.is_empty() {
            return Ok(());
        }
        let space = self.aug.space.clone();
        let states = self.aug.states();
        let in_vars: Vec<usize> = args.iter().copied().filter(|v| !states.contains(v)).collect();
        for (i, t) in policies.iter().enumerate() {
            let b = sys.input_set.bounds[inputs[i]].expect("box input set");
            let p = t.affine(&space);
            for (sign, bound, tag) in [(-1.0, b.hi, "hi"), (1.0, -b.lo, "lo")] {
                for rp in region.pieces() {
                    for up in self.input_pieces(input_partner) {
                        let g_r = self.piece_constraints(&rp)?;
                        let g_u = self.piece_constraints(&up)?;
                        let expr = p.scale(sign).add_constant(bound);
                        self.push(
                            format!("{} within {tag} bound", t.name),
                            ConstraintGroup::PolicyBound,
                            expr,
                            vec![(g_r, states.clone()), (g_u, in_vars.clone())],
                        );
                    }
                }
            }
        }
        Ok(())
    }

    fn template_list(&self, role: TemplateRole) -> Vec<PolyTemplate> {
        self.templates.iter().filter(|t| t.role == role).cloned().collect()
    }

    fn finish(self, kind: CertificateKind, constants: ProgramConstants) -> Result<SosProgram> {
        let fixed_certificate = match &self.options.fixed_certificate {
            Some(c) => Some(self.scaling.to_normalized(&c.embed(&self.aug.space)?)?),
            None => None,
        };
        Ok(SosProgram {
            kind,
            space: self.aug.space.clone(),
            templates: self.templates,
            constraints: self.constraints,
            constants,
            scaling: self.scaling,
            num_unknowns: self.unknowns,
            fixed_certificate,
            policy: self.options.policy.clone(),
            prune: self.options.prune,
            notes: self.notes,
        })
    }
}

fn check_policy_arity(policy: &PolicyMode, m: usize) -> Result<()> {
    match policy {
        PolicyMode::Literal(p) | PolicyMode::Substitute(p) if p.len() != m => Err(Error::Dimension(format!(
            "policy has {} components, system has {m} inputs",
            p.len()
        ))),
        _ => Ok(()),
    }
}

/// Safety-type program: certificate below `eps_lo` on `R0`, above `eps_hi`
/// on `Ru`, and non-increasing along paired steps with the partner input
/// chosen by the policy.
pub fn build_lemma1_program(
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    options: &ProgramOptions,
    eps_lo: f64,
    eps_hi: f64,
) -> Result<SosProgram> {
    if !(eps_hi > eps_lo) {
        return Err(Error::Invalid(format!("need eps_hi > eps_lo, got {eps_lo} and {eps_hi}")));
    }
    check_policy_arity(&options.policy, aug.m())?;
    let mut asm = Assembler::new(aug, options);
    let states = aug.states();
    let b = asm.certificate("B")?;

    for (k, piece) in regions.r0.pieces().iter().enumerate() {
        let g = asm.piece_constraints(piece)?;
        asm.push(
            format!("initial[{k}]"),
            ConstraintGroup::Initial,
            b.scale(-1.0).add_constant(eps_lo),
            vec![(g, states.clone())],
        );
    }
    for (k, piece) in regions.ru.pieces().iter().enumerate() {
        let g = asm.piece_constraints(piece)?;
        asm.push(
            format!("unsafe[{k}]"),
            ConstraintGroup::Unsafe,
            b.add_constant(-eps_hi),
            vec![(g, states.clone())],
        );
    }

    let inputs = aug.inputs();
    let partner_inputs = aug.partner_inputs();
    let substitute = match &options.policy {
        PolicyMode::Substitute(p) => Some((partner_inputs.as_slice(), p.as_slice())),
        _ => None,
    };
    let images = asm.next_state_images(substitute)?;
    let args: Vec<usize> = states.iter().chain(&inputs).copied().collect();
    let mut decrease = b.sub(&b.compose(&images)?);
    if let Some(term) = asm.policy_term(&partner_inputs, &args)? {
        decrease = decrease.sub(&term);
    }
    let r = regions.r.clone();
    for (k, rp) in r.pieces().iter().enumerate() {
        for (l, up) in asm.input_pieces(false).iter().enumerate() {
            let g_r = asm.piece_constraints(rp)?;
            let g_u = asm.piece_constraints(up)?;
            asm.push(
                format!("decrease[{k},{l}]"),
                ConstraintGroup::Decrease,
                decrease.clone(),
                vec![(g_r, states.clone()), (g_u, inputs.clone())],
            );
        }
    }
    asm.policy_bounds(&args, &r, false)?;
    asm.finish(CertificateKind::Safety, ProgramConstants::Safety { eps_lo, eps_hi })
}

/// Reachability-type program: certificate non-positive on `R0`, at least
/// `slack` on each boundary face, and decreasing by `slack` on the closure
/// of `R ∖ Ru`, with the controlled input chosen by the policy.
pub fn build_lemma2_program(
    aug: &AugmentedSystem,
    regions: &RegionBundle,
    options: &ProgramOptions,
    slack: f64,
) -> Result<SosProgram> {
    if !(slack > 0.0) {
        return Err(Error::Invalid(format!("slack must be positive, got {slack}")));
    }
    let boundary = regions
        .boundary
        .as_ref()
        .ok_or_else(|| Error::Invalid("regions carry no boundary decomposition".into()))?;
    let closure = regions
        .closure
        .as_ref()
        .ok_or_else(|| Error::Invalid("regions carry no closure of R minus Ru".into()))?;
    check_policy_arity(&options.policy, aug.m())?;
    let mut asm = Assembler::new(aug, options);
    let states = aug.states();
    let v = asm.certificate("V")?;

    for (k, piece) in regions.r0.pieces().iter().enumerate() {
        let g = asm.piece_constraints(piece)?;
        asm.push(
            format!("initial[{k}]"),
            ConstraintGroup::Initial,
            v.scale(-1.0),
            vec![(g, states.clone())],
        );
    }
    for (k, piece) in boundary.pieces().iter().enumerate() {
        let g = asm.piece_constraints(piece)?;
        asm.push(
            format!("boundary[{k}]"),
            ConstraintGroup::Boundary,
            v.add_constant(-slack),
            vec![(g, states.clone())],
        );
    }

    let inputs = aug.inputs();
    let partner_inputs = aug.partner_inputs();
    let substitute = match &options.policy {
        PolicyMode::Substitute(p) => Some((inputs.as_slice(), p.as_slice())),
        _ => None,
    };
    let images = asm.next_state_images(substitute)?;
    let args: Vec<usize> = states.iter().chain(&partner_inputs).copied().collect();
    let mut decrease = v.sub(&v.compose(&images)?).add_constant(-slack);
    if let Some(term) = asm.policy_term(&inputs, &args)? {
        decrease = decrease.sub(&term);
    }
    for (k, cp) in closure.pieces().iter().enumerate() {
        for (l, up) in asm.input_pieces(true).iter().enumerate() {
            let g_r = asm.piece_constraints(cp)?;
            let g_u = asm.piece_constraints(up)?;
            asm.push(
                format!("decrease[{k},{l}]"),
                ConstraintGroup::Decrease,
                decrease.clone(),
                vec![(g_r, states.clone()), (g_u, partner_inputs.clone())],
            );
        }
    }
    asm.policy_bounds(&args, closure, true)?;
    asm.finish(CertificateKind::Reach, ProgramConstants::Reach { slack })
}

/// What a PSD block of the compiled problem stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInfo {
    pub constraint: usize,
    /// `None` for the constraint's own Gram block.
    pub multiplier: Option<usize>,
    pub basis: Vec<Monomial>,
}

#[derive(Debug, Clone)]
pub struct CompiledProgram {
    pub sdp: SdpProblem,
    pub blocks: Vec<BlockInfo>,
    /// Constraint and monomial matched by each equality row.
    pub rows: Vec<(usize, Monomial)>,
    /// Gram block of each constraint.
    pub gram_block: Vec<usize>,
}

impl CompiledProgram {
    pub fn total_block_rows(&self) -> usize {
        self.sdp.total_psd_dim()
    }

    pub fn rows_of(&self, constraint: usize) -> usize {
        self.rows.iter().filter(|(c, _)| *c == constraint).count()
    }

    /// Fails if the summed block dimension exceeds `budget`.
    pub fn check_budget(&self, budget: usize) -> Result<()> {
        let total = self.total_block_rows();
        if total > budget {
            return Err(Error::Sdp(opacert_sdp::SdpError::TooLarge { total, budget }));
        }
        Ok(())
    }
}

/// Unordered basis pairs `(i ≤ j)` grouped by their product monomial.
fn gram_pairs(basis: &[Monomial]) -> Vec<(usize, usize, Monomial)> {
    let mut out = Vec::with_capacity(basis.len() * (basis.len() + 1) / 2);
    for i in 0..basis.len() {
        for j in i..basis.len() {
            out.push((i, j, basis[i].mul(&basis[j])));
        }
    }
    out
}

/// Gram matching: for every constraint and every monomial `α` on either side,
/// `Gram(Q)[α] + Σ_j (σ_j g_j)[α] - Σ_k w_k E_k[α] = E_0[α]`.
pub fn compile_to_sdp(prog: &SosProgram) -> Result<CompiledProgram> {
    let mut block_dims = Vec::new();
    let mut blocks = Vec::new();
    let mut rows = Vec::new();
    let mut gram_block = Vec::new();
    let mut equations: Vec<Constraint> = Vec::new();

    for (ci, c) in prog.constraints.iter().enumerate() {
        let mut table: BTreeMap<Monomial, Constraint> = BTreeMap::new();
        let gram = c.gram_basis(prog.prune);
        let gb = block_dims.len();
        gram_block.push(gb);
        block_dims.push(gram.len());
        for (i, j, m) in gram_pairs(&gram) {
            table.entry(m).or_insert_with(|| Constraint::new(0.0)).push_psd(gb, i, j, 1.0);
        }
        blocks.push(BlockInfo {
            constraint: ci,
            multiplier: None,
            basis: gram,
        });
        for (mi, mult) in c.multipliers.iter().enumerate() {
            let basis = mult.basis();
            let b = block_dims.len();
            block_dims.push(basis.len());
            let g_terms: Vec<(Monomial, f64)> = mult.g.terms().map(|(m, v)| (m.clone(), v)).collect();
            for (i, j, m) in gram_pairs(&basis) {
                for (gm, gv) in &g_terms {
                    table
                        .entry(m.mul(gm))
                        .or_insert_with(|| Constraint::new(0.0))
                        .push_psd(b, i, j, *gv);
                }
            }
            blocks.push(BlockInfo {
                constraint: ci,
                multiplier: Some(mi),
                basis,
            });
        }
        for (m, v) in c.expr.constant.terms() {
            table.entry(m.clone()).or_insert_with(|| Constraint::new(0.0)).rhs = v;
        }
        for (k, p) in &c.expr.linear {
            for (m, v) in p.terms() {
                table
                    .entry(m.clone())
                    .or_insert_with(|| Constraint::new(0.0))
                    .push_free(*k, -v);
            }
        }
        for (m, row) in table {
            rows.push((ci, m));
            equations.push(row);
        }
    }
    let mut sdp = SdpProblem::new(block_dims, prog.num_unknowns);
    for e in equations {
        sdp.push(e);
    }
    sdp.check()?;
    Ok(CompiledProgram {
        sdp,
        blocks,
        rows,
        gram_block,
    })
}

/// `Σ_{i,j} Q_ij b_i b_j`.
pub fn gram_form(space: &Arc<VariableSpace>, basis: &[Monomial], q: &DMatrix<f64>) -> Polynomial {
    Polynomial::from_terms(
        space,
        gram_pairs(basis).into_iter().map(|(i, j, m)| {
            let v = if i == j { q[(i, i)] } else { q[(i, j)] + q[(j, i)] };
            (m, v)
        }),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub label: String,
    pub dim: usize,
    pub min_eigenvalue: f64,
}

/// A solved program mapped back to polynomials.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub certificate: Certificate,
    /// Certificate and policy in normalized coordinates.
    pub normalized_certificate: Polynomial,
    pub normalized_policy: Vec<Polynomial>,
    /// `(constraint label, σ_j)` in normalized coordinates.
    pub multipliers: Vec<(String, Polynomial)>,
    pub blocks: Vec<BlockReport>,
    /// Largest coefficient of `E - Σ σ_j g_j - Gram(Q)` over all constraints.
    pub max_residual: f64,
    pub min_eigenvalue: f64,
    /// True when every block passes the eigenvalue margin.
    pub gram_certified: bool,
}

/// Moves the coefficient mismatch of each constraint into one Gram entry per
/// monomial, so that the Gram form matches the expression exactly.
fn correct_gram(basis: &[Monomial], q: &mut DMatrix<f64>, residual: &Polynomial) {
    let mut canonical: HashMap<Monomial, (usize, usize)> = HashMap::new();
    for (i, j, m) in gram_pairs(basis) {
        let slot = canonical.entry(m).or_insert((i, j));
        if i == j && slot.0 != slot.1 {
            *slot = (i, j);
        }
    }
    for (m, v) in residual.terms() {
        if let Some(&(i, j)) = canonical.get(m) {
            if i == j {
                q[(i, i)] += v;
            } else {
                q[(i, j)] += 0.5 * v;
                q[(j, i)] += 0.5 * v;
            }
        }
    }
}

/// Reads a feasible solution back into a certificate, repairs floating-point
/// slack in the Gram blocks and re-checks every block's eigenvalues.
pub fn extract_certificate(
    prog: &SosProgram,
    compiled: &CompiledProgram,
    solution: &SdpSolution,
) -> Result<Extraction> {
    if solution.status != SolveStatus::Feasible {
        return Err(Error::NoSolution(format!("{:?}", solution.status).to_lowercase()));
    }
    let space = &prog.space;
    let w = &solution.free;
    let mut mats = solution.blocks.clone();
    let mut multipliers = Vec::new();
    let mut max_residual = 0.0f64;
    for (ci, c) in prog.constraints.iter().enumerate() {
        let mut rhs = c.expr.realize(w);
        for (bi, info) in compiled.blocks.iter().enumerate() {
            if info.constraint != ci {
                continue;
            }
            if let Some(mi) = info.multiplier {
                let sigma = gram_form(space, &info.basis, &mats[bi]);
                rhs = &rhs - &(&sigma * &c.multipliers[mi].g);
                multipliers.push((c.label.clone(), sigma));
            }
        }
        let gb = compiled.gram_block[ci];
        let basis = &compiled.blocks[gb].basis;
        let residual = &rhs - &gram_form(space, basis, &mats[gb]);
        correct_gram(basis, &mut mats[gb], &residual);
        let after = &rhs - &gram_form(space, basis, &mats[gb]);
        max_residual = max_residual.max(after.max_abs_coefficient());
    }

    let mut blocks = Vec::new();
    let mut min_eigenvalue = f64::INFINITY;
    let mut gram_certified = true;
    for (bi, info) in compiled.blocks.iter().enumerate() {
        let c = &prog.constraints[info.constraint];
        let label = match info.multiplier {
            None => c.label.clone(),
            Some(mi) => format!("{} multiplier {mi}", c.label),
        };
        let check = min_eigenvalue_check(&symmetric(&mats[bi]), EIGENVALUE_MARGIN)?;
        gram_certified &= check.pass;
        min_eigenvalue = min_eigenvalue.min(check.min_eigenvalue);
        blocks.push(BlockReport {
            label,
            dim: info.basis.len(),
            min_eigenvalue: check.min_eigenvalue,
        });
    }

    let normalized_certificate = match &prog.fixed_certificate {
        Some(c) => c.clone(),
        None => prog
            .template(TemplateRole::Certificate)
            .next()
            .map(|t| t.realize(space, w))
            .unwrap_or_else(|| Polynomial::zero(space)),
    };
    let normalized_policy: Vec<Polynomial> = match &prog.policy {
        PolicyMode::Synthesize => prog
            .template(TemplateRole::PolicyComponent)
            .map(|t| t.realize(space, w))
            .collect(),
        PolicyMode::Literal(p) | PolicyMode::Substitute(p) => p
            .iter()
            .map(|pi| prog.scaling.to_normalized(&pi.embed(space)?))
            .collect::<Result<_>>()?,
    };
    let certificate = Certificate {
        kind: prog.kind,
        space: space.clone(),
        polynomial: prog.scaling.to_original(&normalized_certificate)?,
        policy: match &prog.policy {
            PolicyMode::Literal(p) | PolicyMode::Substitute(p) => {
                p.iter().map(|pi| pi.embed(space)).collect::<std::result::Result<_, _>>()?
            }
            PolicyMode::Synthesize => normalized_policy
                .iter()
                .map(|p| prog.scaling.to_original(p))
                .collect::<Result<_>>()?,
        },
        policy_use: match prog.policy {
            PolicyMode::Substitute(_) => PolicyUse::Substituted,
            _ => PolicyUse::Literal,
        },
        constants: match prog.constants {
            ProgramConstants::Safety { eps_lo, eps_hi } => Constants::Safety { eps_lo, eps_hi },
            ProgramConstants::Reach { slack } => Constants::Reach { slack },
        },
        provenance: Provenance::Synthesized,
    };
    Ok(Extraction {
        certificate,
        normalized_certificate,
        normalized_policy,
        multipliers,
        blocks,
        max_residual,
        min_eigenvalue,
        gram_certified,
    })
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
