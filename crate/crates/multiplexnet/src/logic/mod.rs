//! Quantifier-free linear arithmetic over the rationals.
//!
//! Formulas are trees of linear atoms (`c1*x1 + ... + cn*xn + d  CMP  0`)
//! under negation, conjunction and disjunction. Coefficients are exact
//! rationals, and evaluation is exact: there is no floating-point comparison
//! anywhere in this module. Values are only lowered to `f64` later, by the
//! transform compiler.
//!
//! Formula values are immutable after construction and safe to share across
//! threads; every operation here is a pure function.

mod parse;

pub use parse::{parse, parse_with_inferred_order, ParseError};

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Exact rational scalar used throughout the logic layer.
pub type Rational = BigRational;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogicError {
    #[error("duplicate variable name `{0}` in variable order")]
    DuplicateVariable(String),
    #[error("assignment is missing a value for variable `{name}` (index {index})")]
    MissingVariable { name: String, index: usize },
    #[error("non-finite sample component at index {0}")]
    NonFiniteSample(usize),
}

/// A declared, ordered set of variable names.
///
/// The order doubles as the output-slot order of compiled transforms and the
/// column order of sample files, so everything downstream indexes into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarOrder {
    names: Vec<String>,
}

impl VarOrder {
    pub fn new<I, S>(names: I) -> Result<Self, LogicError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(LogicError::DuplicateVariable(n.clone()));
            }
        }
        Ok(VarOrder { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn var(&self, index: usize) -> VarId {
        VarId {
            index,
            name: self.names[index].clone(),
        }
    }

    pub fn lookup(&self, name: &str) -> Option<VarId> {
        self.names.iter().position(|n| n == name).map(|index| VarId {
            index,
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A variable: its name plus its 0-based position in the declared order.
///
/// Ordering is by index, which is what pivot selection relies on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId {
    pub index: usize,
    pub name: String,
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)
    }
}

/// A linear expression `sum(coeff_v * v) + constant` with exact rational
/// coefficients. Zero coefficients are never stored.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LinExpr {
    coeffs: BTreeMap<VarId, Rational>,
    constant: Rational,
}

impl LinExpr {
    pub fn constant(c: Rational) -> Self {
        LinExpr {
            coeffs: BTreeMap::new(),
            constant: c,
        }
    }

    pub fn var(v: VarId) -> Self {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(v, Rational::from_integer(1.into()));
        LinExpr {
            coeffs,
            constant: Rational::zero(),
        }
    }

    pub fn scaled_var(v: VarId, c: Rational) -> Self {
        let mut e = LinExpr::constant(Rational::zero());
        e.add_term(v, c);
        e
    }

    pub fn add_term(&mut self, v: VarId, c: Rational) {
        use std::collections::btree_map::Entry;
        if c.is_zero() {
            return;
        }
        match self.coeffs.entry(v) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if e.get().is_zero() {
                    e.remove();
                }
            }
            Entry::Vacant(e) => {
                e.insert(c);
            }
        }
    }

    pub fn add(&self, other: &LinExpr) -> LinExpr {
        let mut out = self.clone();
        for (v, c) in &other.coeffs {
            out.add_term(v.clone(), c.clone());
        }
        out.constant += &other.constant;
        out
    }

    pub fn sub(&self, other: &LinExpr) -> LinExpr {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> LinExpr {
        self.scale(&-Rational::from_integer(1.into()))
    }

    pub fn scale(&self, s: &Rational) -> LinExpr {
        if s.is_zero() {
            return LinExpr::constant(Rational::zero());
        }
        LinExpr {
            coeffs: self
                .coeffs
                .iter()
                .map(|(v, c)| (v.clone(), c * s))
                .collect(),
            constant: &self.constant * s,
        }
    }

    pub fn coeff(&self, v: &VarId) -> Rational {
        self.coeffs.get(v).cloned().unwrap_or_else(Rational::zero)
    }

    pub fn constant_part(&self) -> &Rational {
        &self.constant
    }

    pub fn terms(&self) -> impl Iterator<Item = (&VarId, &Rational)> {
        self.coeffs.iter()
    }

    pub fn vars(&self) -> impl Iterator<Item = &VarId> {
        self.coeffs.keys()
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// The variable with the highest order index, if any.
    pub fn highest_var(&self) -> Option<&VarId> {
        self.coeffs.keys().next_back()
    }

    pub fn eval(&self, values: &[Rational]) -> Result<Rational, LogicError> {
        let mut acc = self.constant.clone();
        for (v, c) in &self.coeffs {
            let x = values.get(v.index).ok_or_else(|| LogicError::MissingVariable {
                name: v.name.clone(),
                index: v.index,
            })?;
            acc += c * x;
        }
        Ok(acc)
    }
}

/// Comparison operators. Atoms are canonicalized to `lhs CMP 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cmp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
}

impl Cmp {
    /// Logical negation of the comparison; `Eq` has none in this language.
    pub fn negate(self) -> Option<Cmp> {
        match self {
            Cmp::Gt => Some(Cmp::Le),
            Cmp::Ge => Some(Cmp::Lt),
            Cmp::Lt => Some(Cmp::Ge),
            Cmp::Le => Some(Cmp::Gt),
            Cmp::Eq => None,
        }
    }

    /// The comparison after multiplying both sides by a negative scalar.
    pub fn reverse(self) -> Cmp {
        match self {
            Cmp::Gt => Cmp::Lt,
            Cmp::Ge => Cmp::Le,
            Cmp::Lt => Cmp::Gt,
            Cmp::Le => Cmp::Ge,
            Cmp::Eq => Cmp::Eq,
        }
    }

    pub fn is_strict(self) -> bool {
        matches!(self, Cmp::Gt | Cmp::Lt)
    }

    /// Does `value CMP 0` hold?
    pub fn holds(self, value: &Rational) -> bool {
        match self {
            Cmp::Gt => value.is_positive(),
            Cmp::Ge => !value.is_negative(),
            Cmp::Lt => value.is_negative(),
            Cmp::Le => !value.is_positive(),
            Cmp::Eq => value.is_zero(),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Eq => "=",
        }
    }
}

/// A linear atom `lhs CMP 0`. The left-hand side always references at least
/// one variable; variable-free comparisons fold to `true`/`false` at
/// construction time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    lhs: LinExpr,
    cmp: Cmp,
}

impl Atom {
    pub fn lhs(&self) -> &LinExpr {
        &self.lhs
    }

    pub fn cmp(&self) -> Cmp {
        self.cmp
    }

    pub fn eval(&self, values: &[Rational]) -> Result<bool, LogicError> {
        Ok(self.cmp.holds(&self.lhs.eval(values)?))
    }

    /// The pivot variable: the highest-order variable on the left-hand side.
    pub fn pivot(&self) -> &VarId {
        self.lhs
            .highest_var()
            .expect("atoms always reference at least one variable")
    }

    /// Solve the atom for its pivot: `pivot CMP' rhs`, where `rhs` only
    /// references variables earlier in the order. The comparator is reversed
    /// when the pivot coefficient is negative.
    pub fn solve_for_pivot(&self) -> SolvedAtom {
        let pivot = self.pivot().clone();
        let c = self.lhs.coeff(&pivot);
        let mut rest = self.lhs.clone();
        rest.add_term(pivot.clone(), -c.clone());
        // lhs = c*pivot + rest CMP 0  <=>  pivot CMP' -rest/c
        let rhs = rest.neg().scale(&(Rational::from_integer(1.into()) / c.clone()));
        let cmp = if c.is_negative() { self.cmp.reverse() } else { self.cmp };
        SolvedAtom { pivot, cmp, rhs }
    }
}

/// An atom rewritten as `pivot CMP rhs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolvedAtom {
    pub pivot: VarId,
    pub cmp: Cmp,
    pub rhs: LinExpr,
}

impl SolvedAtom {
    /// Back to canonical `lhs CMP 0` form (used for derived constraints).
    pub fn into_atom_formula(self) -> Formula {
        let lhs = LinExpr::var(self.pivot).sub(&self.rhs);
        Formula::atom(lhs, self.cmp)
    }
}

/// A quantifier-free formula over linear atoms.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    True,
    False,
    Atom(Atom),
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
}

impl Formula {
    /// Build an atom, folding variable-free comparisons to `True`/`False`.
    pub fn atom(lhs: LinExpr, cmp: Cmp) -> Formula {
        if lhs.is_constant() {
            if cmp.holds(lhs.constant_part()) {
                Formula::True
            } else {
                Formula::False
            }
        } else {
            Formula::Atom(Atom { lhs, cmp })
        }
    }

    /// Conjunction that folds constants: any `False` child collapses the
    /// whole node, `True` children disappear.
    pub fn and(children: Vec<Formula>) -> Formula {
        let mut kept = Vec::new();
        for c in children {
            match c {
                Formula::True => {}
                Formula::False => return Formula::False,
                other => kept.push(other),
            }
        }
        match kept.len() {
            0 => Formula::True,
            1 => kept.pop().unwrap(),
            _ => Formula::And(kept),
        }
    }

    /// Disjunction dual to [`Formula::and`].
    pub fn or(children: Vec<Formula>) -> Formula {
        let mut kept = Vec::new();
        for c in children {
            match c {
                Formula::False => {}
                Formula::True => return Formula::True,
                other => kept.push(other),
            }
        }
        match kept.len() {
            0 => Formula::False,
            1 => kept.pop().unwrap(),
            _ => Formula::Or(kept),
        }
    }

    pub fn not(f: Formula) -> Formula {
        match f {
            Formula::True => Formula::False,
            Formula::False => Formula::True,
            other => Formula::Not(Box::new(other)),
        }
    }

    /// Exact Boolean evaluation. `>=`, `<=`, `=` are closed comparisons,
    /// `>`, `<` strict.
    pub fn eval(&self, values: &[Rational]) -> Result<bool, LogicError> {
        match self {
            Formula::True => Ok(true),
            Formula::False => Ok(false),
            Formula::Atom(a) => a.eval(values),
            Formula::Not(f) => Ok(!f.eval(values)?),
            Formula::And(fs) => {
                for f in fs {
                    if !f.eval(values)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Formula::Or(fs) => {
                for f in fs {
                    if f.eval(values)? {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
        }
    }

    /// Evaluate at a floating-point sample by converting each coordinate to
    /// the exact rational it represents, so the comparison itself is exact.
    pub fn eval_f64(&self, point: &[f64]) -> Result<bool, LogicError> {
        let values = rationalize(point)?;
        self.eval(&values)
    }

    pub fn free_vars(&self) -> BTreeSet<VarId> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<VarId>) {
        match self {
            Formula::True | Formula::False => {}
            Formula::Atom(a) => out.extend(a.lhs.vars().cloned()),
            Formula::Not(f) => f.collect_vars(out),
            Formula::And(fs) | Formula::Or(fs) => {
                for f in fs {
                    f.collect_vars(out);
                }
            }
        }
    }

    /// Render to the concrete syntax accepted by [`parse`]. Parsing the
    /// result reproduces the tree exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s, 0);
        s
    }

    // prec levels: 0 = or context, 1 = and context
    fn write_text(&self, out: &mut String, prec: u8) {
        match self {
            // No constant literals in the grammar; these variable-free atoms
            // fold back to the same constants on re-parse.
            Formula::True => out.push_str("0 = 0"),
            Formula::False => out.push_str("0 < 0"),
            Formula::Atom(a) => out.push_str(&format_atom(a)),
            Formula::Not(f) => {
                out.push_str("!(");
                f.write_text(out, 0);
                out.push(')');
            }
            Formula::And(fs) => {
                let needs_parens = prec > 1;
                if needs_parens {
                    out.push('(');
                }
                for (i, f) in fs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" & ");
                    }
                    match f {
                        Formula::And(_) | Formula::Or(_) => {
                            out.push('(');
                            f.write_text(out, 0);
                            out.push(')');
                        }
                        _ => f.write_text(out, 2),
                    }
                }
                if needs_parens {
                    out.push(')');
                }
            }
            Formula::Or(fs) => {
                let needs_parens = prec > 0;
                if needs_parens {
                    out.push('(');
                }
                for (i, f) in fs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" | ");
                    }
                    match f {
                        Formula::Or(_) => {
                            out.push('(');
                            f.write_text(out, 0);
                            out.push(')');
                        }
                        _ => f.write_text(out, 1),
                    }
                }
                if needs_parens {
                    out.push(')');
                }
            }
        }
    }
}

/// Convert a float slice to the exact rationals the floats represent.
pub fn rationalize(point: &[f64]) -> Result<Vec<Rational>, LogicError> {
    point
        .iter()
        .enumerate()
        .map(|(i, &x)| Rational::from_float(x).ok_or(LogicError::NonFiniteSample(i)))
        .collect()
}

/// Render a rational as a plain decimal when its denominator divides a power
/// of ten (always the case for parsed literals); `p/q` otherwise.
pub fn rational_to_string(r: &Rational) -> String {
    use num_bigint::BigInt;
    use num_traits::One;

    let mut den = r.denom().clone();
    if den.is_one() {
        return r.numer().to_string();
    }
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let mut twos = 0u32;
    let mut fives = 0u32;
    while (&den % &two).is_zero() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if !den.is_one() {
        return format!("{}/{}", r.numer(), r.denom());
    }
    let shift = twos.max(fives);
    let pow10 = BigInt::from(10).pow(shift);
    let scaled = r.numer() * &pow10 / r.denom();
    let negative = scaled.is_negative();
    let digits = scaled.magnitude().to_string();
    let digits = if digits.len() as u32 <= shift {
        format!("{}{}", "0".repeat(shift as usize + 1 - digits.len()), digits)
    } else {
        digits
    };
    let split = digits.len() - shift as usize;
    let (int_part, frac_part) = digits.split_at(split);
    let frac_part = frac_part.trim_end_matches('0');
    let mut s = String::new();
    if negative {
        s.push('-');
    }
    s.push_str(int_part);
    if !frac_part.is_empty() {
        s.push('.');
        s.push_str(frac_part);
    }
    s
}

fn format_atom(a: &Atom) -> String {
    use num_traits::One;

    // Print as `terms CMP rhs-constant` so the constant reads naturally.
    let mut s = String::new();
    let mut first = true;
    for (v, c) in a.lhs.terms() {
        let neg = c.is_negative();
        let mag = c.abs();
        if first {
            if neg {
                s.push('-');
            }
        } else {
            s.push_str(if neg { " - " } else { " + " });
        }
        if mag.is_one() {
            s.push_str(&v.name);
        } else {
            s.push_str(&rational_to_string(&mag));
            s.push('*');
            s.push_str(&v.name);
        }
        first = false;
    }
    let rhs = -a.lhs.constant_part().clone();
    s.push(' ');
    s.push_str(a.cmp.symbol());
    s.push(' ');
    s.push_str(&rational_to_string(&rhs));
    s
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_text())
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_atom(self))
    }
}
