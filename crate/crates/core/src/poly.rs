//! Sparse multivariate polynomials over a fixed, named variable space.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("variable roles must appear in the order state, partner state, input, partner input")]
    RoleOrder,
    #[error("polynomials live in different variable spaces")]
    SpaceMismatch,
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no image given for variable `{0}`")]
    MissingImage(String),
}

/// Which copy of the system a variable belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    State,
    PartnerState,
    Input,
    PartnerInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VariableSpace {
    names: Vec<String>,
    roles: Vec<Role>,
}

impl VariableSpace {
    /// Roles must be grouped as state, partner state, input, partner input.
    pub fn new<S: Into<String>>(vars: impl IntoIterator<Item = (S, Role)>) -> Result<Self, PolyError> {
        let mut names: Vec<String> = Vec::new();
        let mut roles = Vec::new();
        for (name, role) in vars {
            let name = name.into();
            if names.contains(&name) {
                return Err(PolyError::DuplicateVariable(name));
            }
            if roles.last().is_some_and(|&last| last > role) {
                return Err(PolyError::RoleOrder);
            }
            names.push(name);
            roles.push(role);
        }
        Ok(Self { names, roles })
    }

    /// Space of states followed by inputs.
    pub fn system<S: AsRef<str>>(states: &[S], inputs: &[S]) -> Result<Self, PolyError> {
        Self::new(
            states
                .iter()
                .map(|s| (s.as_ref().to_string(), Role::State))
                .chain(inputs.iter().map(|s| (s.as_ref().to_string(), Role::Input))),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn role(&self, i: usize) -> Role {
        self.roles[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices of all variables with the given role, in order.
    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }
}

/// Exponent vector. Ordered graded-lexicographically: lower total degree
/// first, then larger exponents on earlier variables first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self(exponents)
    }

    pub fn one(nvars: usize) -> Self {
        Self(vec![0; nvars])
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Self(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// True if every variable with a nonzero exponent is in `vars`.
    pub fn supported_on(&self, vars: &[usize]) -> bool {
        self.0
            .iter()
            .enumerate()
            .all(|(i, &e)| e == 0 || vars.contains(&i))
    }

    pub fn evaluate(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &v)| v.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `nvars` variables of total degree at most `degree`,
/// graded-lex ordered. There are C(nvars + degree, degree) of them.
pub fn monomial_basis(nvars: usize, degree: u32) -> Vec<Monomial> {
    let all: Vec<usize> = (0..nvars).collect();
    monomial_basis_in(nvars, &all, degree)
}

/// Like [`monomial_basis`] but only involving the variables in `vars`.
pub fn monomial_basis_in(nvars: usize, vars: &[usize], degree: u32) -> Vec<Monomial> {
    fn rec(vars: &[usize], left: u32, cur: &mut Vec<u32>, out: &mut Vec<Monomial>) {
        match vars.split_first() {
            None => out.push(Monomial(cur.clone())),
            Some((&v, rest)) => {
                for e in 0..=left {
                    cur[v] = e;
                    rec(rest, left - e, cur, out);
                }
                cur[v] = 0;
            }
        }
    }
    let mut out = Vec::new();
    rec(vars, degree, &mut vec![0; nvars], &mut out);
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    space: Arc<VariableSpace>,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(space: &Arc<VariableSpace>) -> Self {
        Self {
            space: space.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(space: &Arc<VariableSpace>, c: f64) -> Self {
        Self::from_terms(space, [(Monomial::one(space.len()), c)])
    }

    pub fn var(space: &Arc<VariableSpace>, i: usize) -> Self {
        Self::from_terms(space, [(Monomial::var(space.len(), i), 1.0)])
    }

    /// Collects like terms and drops zero coefficients.
    ///
    /// Panics if a monomial does not match the space's variable count.
    pub fn from_terms(
        space: &Arc<VariableSpace>,
        terms: impl IntoIterator<Item = (Monomial, f64)>,
    ) -> Self {
        let mut map: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, c) in terms {
            assert_eq!(m.0.len(), space.len(), "monomial length mismatch");
            *map.entry(m).or_insert(0.0) += c;
        }
        map.retain(|_, c| *c != 0.0);
        Self {
            space: space.clone(),
            terms: map,
        }
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; zero for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Largest exponent of variable `i`.
    pub fn degree_in(&self, i: usize) -> u32 {
        self.terms.keys().map(|m| m.0[i]).max().unwrap_or(0)
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Indices of variables that occur in some term.
    pub fn variables_used(&self) -> Vec<usize> {
        (0..self.space.len())
            .filter(|&i| self.terms.keys().any(|m| m.0[i] > 0))
            .collect()
    }

    fn check_space(&self, other: &Polynomial) -> Result<(), PolyError> {
        if Arc::ptr_eq(&self.space, &other.space) || self.space == other.space {
            Ok(())
        } else {
            Err(PolyError::SpaceMismatch)
        }
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_space(other)?;
        let mut terms = self.terms.clone();
        for (m, c) in &other.terms {
            *terms.entry(m.clone()).or_insert(0.0) += c;
        }
        terms.retain(|_, c| *c != 0.0);
        Ok(Self {
            space: self.space.clone(),
            terms,
        })
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_space(other)?;
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (a, ca) in &self.terms {
            for (b, cb) in &other.terms {
                *terms.entry(a.mul(b)).or_insert(0.0) += ca * cb;
            }
        }
        terms.retain(|_, c| *c != 0.0);
        Ok(Self {
            space: self.space.clone(),
            terms,
        })
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        Self::from_terms(&self.space, self.terms.iter().map(|(m, v)| (m.clone(), v * c)))
    }

    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    pub fn add_constant(&self, c: f64) -> Polynomial {
        self.add(&Self::constant(&self.space, c)).unwrap()
    }

    pub fn pow(&self, e: u32) -> Polynomial {
        let mut acc = Self::constant(&self.space, 1.0);
        for _ in 0..e {
            acc = acc.mul(self).unwrap();
        }
        acc
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.space.len() {
            return Err(PolyError::Dimension {
                expected: self.space.len(),
                got: point.len(),
            });
        }
        Ok(self.eval(point))
    }

    /// Evaluation without the dimension check, for inner loops.
    pub fn eval(&self, point: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.evaluate(point)).sum()
    }

    /// Composition: replaces variable `i` by `images[i]`. All images must share
    /// one space, which becomes the space of the result.
    pub fn substitute(&self, images: &[Polynomial]) -> Result<Polynomial, PolyError> {
        if images.len() != self.space.len() {
            let missing = self.space.names.get(images.len()).cloned().unwrap_or_default();
            return Err(PolyError::MissingImage(missing));
        }
        let target = match images.first() {
            Some(p) => p.space.clone(),
            None => return Ok(self.clone()),
        };
        for img in images {
            img.check_space(&images[0])?;
        }
        let mut powers: Vec<Vec<Polynomial>> = images
            .iter()
            .map(|p| vec![Polynomial::constant(&target, 1.0), p.clone()])
            .collect();
        let mut result = Polynomial::zero(&target);
        for (m, c) in &self.terms {
            let mut t = Polynomial::constant(&target, *c);
            for (i, &e) in m.0.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                while powers[i].len() <= e as usize {
                    let next = powers[i].last().unwrap().mul(&images[i])?;
                    powers[i].push(next);
                }
                t = t.mul(&powers[i][e as usize])?;
            }
            result = result.add(&t)?;
        }
        Ok(result)
    }

    /// Re-expresses the polynomial in `target`, matching variables by name.
    pub fn embed(&self, target: &Arc<VariableSpace>) -> Result<Polynomial, PolyError> {
        let map = self
            .space
            .names
            .iter()
            .map(|n| target.index_of(n).ok_or_else(|| PolyError::UnknownVariable(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.reindex(target, &map))
    }

    /// Moves variable `i` to position `map[i]` of `target`.
    pub fn reindex(&self, target: &Arc<VariableSpace>, map: &[usize]) -> Polynomial {
        Polynomial::from_terms(
            target,
            self.terms.iter().map(|(m, c)| {
                let mut e = vec![0; target.len()];
                for (i, &k) in m.0.iter().enumerate() {
                    e[map[i]] += k;
                }
                (Monomial(e), *c)
            }),
        )
    }

    pub fn parse(text: &str, space: &Arc<VariableSpace>) -> Result<Polynomial, PolyError> {
        let mut p = Parser {
            text: text.as_bytes(),
            pos: 0,
            space,
        };
        let out = p.expr()?;
        p.skip_ws();
        if p.pos < p.text.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(out)
    }
}

impl std::ops::Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        Polynomial::add(self, rhs).expect("variable space mismatch")
    }
}

impl std::ops::Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        Polynomial::sub(self, rhs).expect("variable space mismatch")
    }
}

impl std::ops::Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        Polynomial::mul(self, rhs).expect("variable space mismatch")
    }
}

impl std::ops::Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        Polynomial::neg(self)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, &c)) in self.terms.iter().enumerate() {
            let mag = c.abs();
            if k == 0 {
                if c < 0.0 {
                    write!(f, "-")?;
                }
            } else if c < 0.0 {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let mut factors = Vec::new();
            if mag != 1.0 || m.is_one() {
                factors.push(format!("{mag:?}"));
            }
            for (i, &e) in m.0.iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(self.space.names[i].clone()),
                    _ => factors.push(format!("{}^{e}", self.space.names[i])),
                }
            }
            write!(f, "{}", factors.join("*"))?;
        }
        Ok(())
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    space: &'a Arc<VariableSpace>,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> PolyError {
        PolyError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let negate = if self.peek() == Some(b'-') {
            self.pos += 1;
            true
        } else {
            false
        };
        let first = self.term()?;
        let mut acc = if negate { first.neg() } else { first };
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = &acc + &self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.factor()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            acc = &acc * &self.factor()?;
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let v = self.number()?;
                Ok(Polynomial::constant(self.space, v))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.text.len()
                    && (self.text[self.pos].is_ascii_alphanumeric() || self.text[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
                let idx = self
                    .space
                    .index_of(name)
                    .ok_or_else(|| PolyError::UnknownVariable(name.to_string()))?;
                let mut e = 1;
                if self.peek() == Some(b'^') {
                    self.pos += 1;
                    self.skip_ws();
                    let s = self.pos;
                    while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    if s == self.pos {
                        return Err(self.error("expected an unsigned integer exponent"));
                    }
                    e = std::str::from_utf8(&self.text[s..self.pos])
                        .unwrap()
                        .parse::<u32>()
                        .map_err(|_| PolyError::Syntax {
                            offset: s,
                            message: "exponent out of range".into(),
                        })?;
                }
                let mut m = vec![0; self.space.len()];
                m[idx] = e;
                Ok(Polynomial::from_terms(self.space, [(Monomial(m), 1.0)]))
            }
            Some(_) => Err(self.error("expected a number, variable or `(`")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<f64, PolyError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.text.len() && p.text[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut n = digits(self);
        if self.text.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            return Err(PolyError::Syntax {
                offset: start,
                message: "malformed number".into(),
            });
        }
        if matches!(self.text.get(self.pos), Some(b'e') | Some(b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.text.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = save;
                return Err(self.error("malformed exponent"));
            }
        }
        let s = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        s.parse::<f64>().map_err(|_| PolyError::Syntax {
            offset: start,
            message: "malformed number".into(),
        })
    }
}
