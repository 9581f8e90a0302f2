//! Compilation of DNF terms into differentiable output transforms.
//!
//! Every conjunctive term is turned into a [`TransformProgram`]: one step per
//! output variable, in declared order, where each step rewrites the raw
//! network output for that slot so the term's constraints on it hold. The
//! building blocks are softplus compositions:
//!
//! - lower bound `x > a`:  `x = a + g(x~)`
//! - upper bound `x < b`:  `x = b - g(-x~)`
//! - two-sided  `a < x < b`:  `x = b - g(k(a,b) - g(x~))`, with the offset
//!   `k(a,b) = log(exp(b-a) - 1)` calibrating the output range to `(a, b)`
//! - equality `x = c`: the output is pinned to `c`
//!
//! Bounds may be affine in *earlier* outputs, which realizes dependent
//! constraints such as `x2 > h(x1)`. When a variable has a dependent bound on
//! one side and any bound on the other, the compiler also projects the
//! crossing condition (`lower < upper`) onto the earlier variables, so the
//! emitted program satisfies its term for every finite raw input rather than
//! only for inputs that happen to keep the runtime interval non-empty.
//!
//! All runtime math is `f64`; exact rational coefficients are lowered here,
//! once. Because softplus tails underflow long before `f64` addition stops
//! absorbing them, every strict bound keeps a small scale-aware guard between
//! the output and the bound; see [`crate::math::bound_guard`].

use crate::dnf::{self, DnfTerm, Simplified};
use crate::grad::{GradError, Tape, Value};
use crate::logic::{Atom, Cmp, Formula, LinExpr, VarOrder};
use crate::math;
use num_traits::ToPrimitive;
use thiserror::Error;

pub use crate::math::{softplus, softplus_offset};

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("term is infeasible")]
    InfeasibleTerm,
    #[error("no feasible term: every branch of the formula is unsatisfiable")]
    NoFeasibleTerm,
    #[error("variable `{0}` does not appear in the declared order")]
    UnknownVariable(String),
    #[error("bound for `{var}` references a variable at or after it in the order")]
    CyclicDependency { var: String },
    #[error("variable `{var}` has variable-dependent lower and upper bounds")]
    RuntimeCrossingBounds { var: String },
    #[error("coefficient or bound for `{0}` is not representable as f64")]
    NonRepresentable(String),
    #[error(transparent)]
    Dnf(#[from] dnf::DnfError),
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("alpha must lie strictly in (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("invalid group partition: {0}")]
    InvalidPartition(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("raw input {0} is not finite")]
    NonFiniteInput(usize),
    #[error("program expects {expected} raw inputs, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("runtime interval for `{var}` is empty")]
    DegenerateInterval { var: String },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Affine function of earlier output slots: `sum(coeff * out[slot]) + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Affine {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    fn from_linexpr(e: &LinExpr, what: &str) -> Result<Self, CompileError> {
        let mut terms = Vec::new();
        for (v, c) in e.terms() {
            let c = c
                .to_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CompileError::NonRepresentable(what.to_string()))?;
            terms.push((v.index, c));
        }
        let constant = e
            .constant_part()
            .to_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| CompileError::NonRepresentable(what.to_string()))?;
        Ok(Affine { terms, constant })
    }

    pub fn eval(&self, outputs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &(slot, c) in &self.terms {
            acc += c * outputs[slot];
        }
        acc + self.constant
    }

    fn eval_traced(&self, tape: &mut Tape, outputs: &[Value]) -> Result<Value, GradError> {
        let mut acc: Option<Value> = None;
        for &(slot, c) in &self.terms {
            let t = tape.mul_const(outputs[slot], c);
            acc = Some(match acc {
                None => t,
                Some(prev) => tape.add(prev, t)?,
            });
        }
        Ok(match acc {
            None => tape.scalar(self.constant),
            Some(v) => tape.add_const(v, self.constant),
        })
    }

    fn max_slot(&self) -> Option<usize> {
        self.terms.iter().map(|(s, _)| *s).max()
    }

    fn describe(&self, order: &VarOrder) -> String {
        if self.is_constant() {
            return format!("{}", self.constant);
        }
        let mut s = String::new();
        for (i, (slot, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                s.push_str(" + ");
            }
            if (*c - 1.0).abs() < f64::EPSILON {
                s.push_str(&order.names()[*slot]);
            } else {
                s.push_str(&format!("{}*{}", c, order.names()[*slot]));
            }
        }
        if self.constant != 0.0 {
            s.push_str(&format!(" + {}", self.constant));
        }
        s
    }
}

/// One side of a bound: the pointwise max (for lowers) or min (for uppers)
/// of its affine parts.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundExpr {
    pub parts: Vec<Affine>,
}

impl BoundExpr {
    pub fn is_constant(&self) -> bool {
        self.parts.iter().all(Affine::is_constant)
    }

    pub fn constant_value(&self) -> Option<f64> {
        if self.parts.len() == 1 && self.parts[0].is_constant() {
            Some(self.parts[0].constant)
        } else {
            None
        }
    }

    fn eval_max(&self, outputs: &[f64]) -> f64 {
        let mut acc = self.parts[0].eval(outputs);
        for p in &self.parts[1..] {
            let v = p.eval(outputs);
            if v > acc {
                acc = v;
            }
        }
        acc
    }

    fn eval_min(&self, outputs: &[f64]) -> f64 {
        let mut acc = self.parts[0].eval(outputs);
        for p in &self.parts[1..] {
            let v = p.eval(outputs);
            if v < acc {
                acc = v;
            }
        }
        acc
    }

    fn eval_max_traced(&self, tape: &mut Tape, outputs: &[Value]) -> Result<Value, GradError> {
        let mut acc = self.parts[0].eval_traced(tape, outputs)?;
        for p in &self.parts[1..] {
            let v = p.eval_traced(tape, outputs)?;
            // Same tie rule as the f64 path: strict improvement switches.
            acc = tape.max(acc, v)?;
        }
        Ok(acc)
    }

    fn eval_min_traced(&self, tape: &mut Tape, outputs: &[Value]) -> Result<Value, GradError> {
        let mut acc = self.parts[0].eval_traced(tape, outputs)?;
        for p in &self.parts[1..] {
            let v = p.eval_traced(tape, outputs)?;
            acc = tape.min(acc, v)?;
        }
        Ok(acc)
    }

    fn max_slot(&self) -> Option<usize> {
        self.parts.iter().filter_map(Affine::max_slot).max()
    }

    fn describe(&self, order: &VarOrder, combine: &str) -> String {
        if self.parts.len() == 1 {
            self.parts[0].describe(order)
        } else {
            let inner: Vec<String> = self.parts.iter().map(|p| p.describe(order)).collect();
            format!("{combine}({})", inner.join(", "))
        }
    }
}

/// Per-variable transformation step.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformStep {
    /// Raw output is used unchanged.
    Passthrough,
    /// Output pinned to a constant or an affine of earlier outputs.
    SetConst(Affine),
    /// `out = bound + g(raw)`, strictly above the (max of the) bound parts.
    LowerBound { bound: BoundExpr },
    /// `out = bound - g(-raw)`, strictly below the (min of the) bound parts.
    UpperBound { bound: BoundExpr },
    /// Two-sided squash into `(lower, upper)`; at most one side depends on
    /// earlier outputs.
    Interval { lower: BoundExpr, upper: BoundExpr },
    /// Margin step for grouped classification: the output exceeds
    /// `threshold + logsumexp(raw[out_group])`, which forces the group's
    /// post-softmax mass above the configured level.
    GroupMargin {
        in_group: Vec<usize>,
        threshold: f64,
        out_group: Vec<usize>,
    },
}

impl TransformStep {
    fn describe(&self, order: &VarOrder) -> String {
        match self {
            TransformStep::Passthrough => "passthrough".to_string(),
            TransformStep::SetConst(a) => format!("set {}", a.describe(order)),
            TransformStep::LowerBound { bound } => {
                format!("lower-bound {}", bound.describe(order, "max"))
            }
            TransformStep::UpperBound { bound } => {
                format!("upper-bound {}", bound.describe(order, "min"))
            }
            TransformStep::Interval { lower, upper } => format!(
                "interval ({}, {})",
                lower.describe(order, "max"),
                upper.describe(order, "min")
            ),
            TransformStep::GroupMargin {
                in_group,
                threshold,
                out_group,
            } => format!(
                "group-margin over slots {in_group:?} (threshold {threshold:.6}, out-group size {})",
                out_group.len()
            ),
        }
    }

    fn dependency_slots(&self) -> Vec<usize> {
        match self {
            TransformStep::Passthrough => vec![],
            TransformStep::SetConst(a) => a.terms.iter().map(|(s, _)| *s).collect(),
            TransformStep::LowerBound { bound } | TransformStep::UpperBound { bound } => bound
                .parts
                .iter()
                .flat_map(|p| p.terms.iter().map(|(s, _)| *s))
                .collect(),
            TransformStep::Interval { lower, upper } => lower
                .parts
                .iter()
                .chain(upper.parts.iter())
                .flat_map(|p| p.terms.iter().map(|(s, _)| *s))
                .collect(),
            TransformStep::GroupMargin { .. } => vec![],
        }
    }

    fn max_dependency(&self) -> Option<usize> {
        match self {
            TransformStep::SetConst(a) => a.max_slot(),
            TransformStep::LowerBound { bound } | TransformStep::UpperBound { bound } => {
                bound.max_slot()
            }
            TransformStep::Interval { lower, upper } => {
                lower.max_slot().max(upper.max_slot())
            }
            _ => None,
        }
    }
}

/// A compiled branch: one step per output variable, in declared order.
/// Applying the program to any finite raw vector yields a point satisfying
/// the source term.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformProgram {
    steps: Vec<TransformStep>,
    term: DnfTerm,
    var_order: VarOrder,
}

impl TransformProgram {
    fn validate(self) -> Result<Self, CompileError> {
        for (i, step) in self.steps.iter().enumerate() {
            if let Some(dep) = step.max_dependency() {
                if dep >= i {
                    return Err(CompileError::CyclicDependency {
                        var: self.var_order.names()[i].clone(),
                    });
                }
            }
        }
        Ok(self)
    }

    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }

    pub fn term(&self) -> &DnfTerm {
        &self.term
    }

    pub fn var_order(&self) -> &VarOrder {
        &self.var_order
    }

    pub fn var_count(&self) -> usize {
        self.steps.len()
    }

    /// Apply the program to a raw output vector.
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>, ApplyError> {
        if raw.len() != self.steps.len() {
            return Err(ApplyError::WrongArity {
                expected: self.steps.len(),
                got: raw.len(),
            });
        }
        for (i, x) in raw.iter().enumerate() {
            if !x.is_finite() {
                return Err(ApplyError::NonFiniteInput(i));
            }
        }
        let mut out = vec![0.0; raw.len()];
        for (i, step) in self.steps.iter().enumerate() {
            out[i] = match step {
                TransformStep::Passthrough => raw[i],
                TransformStep::SetConst(a) => a.eval(&out),
                TransformStep::LowerBound { bound } => {
                    let lo = bound.eval_max(&out);
                    let y = lo + math::softplus(raw[i]);
                    y.clamp(lo + math::bound_guard(lo), f64::INFINITY)
                }
                TransformStep::UpperBound { bound } => {
                    let hi = bound.eval_min(&out);
                    let y = hi - math::softplus(-raw[i]);
                    y.clamp(f64::NEG_INFINITY, hi - math::bound_guard(hi))
                }
                TransformStep::Interval { lower, upper } => {
                    let a = lower.eval_max(&out);
                    let b = upper.eval_min(&out);
                    let k = math::softplus_offset(a, b).ok_or_else(|| {
                        ApplyError::DegenerateInterval {
                            var: self.var_order.names()[i].clone(),
                        }
                    })?;
                    let y = math::interval_transform(raw[i], k, b);
                    let eta = math::interval_guard(a, b);
                    y.clamp(a + eta, b - eta)
                }
                TransformStep::GroupMargin {
                    threshold,
                    out_group,
                    ..
                } => {
                    let outs: Vec<f64> = out_group.iter().map(|&j| raw[j]).collect();
                    let m = math::logsumexp(&outs) + *threshold;
                    let g = math::softplus(raw[i]).clamp(math::bound_guard(m), f64::INFINITY);
                    m + g
                }
            };
        }
        Ok(out)
    }

    /// Tape-recorded version of [`TransformProgram::apply`]. Forward values
    /// are bit-identical to the plain path; gradients flow through every
    /// softplus composition and through dependent bounds into earlier slots.
    pub fn apply_traced(&self, tape: &mut Tape, raw: &[Value]) -> Result<Vec<Value>, ApplyError> {
        if raw.len() != self.steps.len() {
            return Err(ApplyError::WrongArity {
                expected: self.steps.len(),
                got: raw.len(),
            });
        }
        let mut out: Vec<Value> = Vec::with_capacity(raw.len());
        for (i, step) in self.steps.iter().enumerate() {
            let v = match step {
                TransformStep::Passthrough => raw[i],
                TransformStep::SetConst(a) => a.eval_traced(tape, &out)?,
                TransformStep::LowerBound { bound } => {
                    let lo = bound.eval_max_traced(tape, &out)?;
                    let lo_val = tape.value_scalar(lo);
                    let g = tape.softplus(raw[i]);
                    let y = tape.add(lo, g)?;
                    tape.clamp_const(y, lo_val + math::bound_guard(lo_val), f64::INFINITY)
                }
                TransformStep::UpperBound { bound } => {
                    let hi = bound.eval_min_traced(tape, &out)?;
                    let hi_val = tape.value_scalar(hi);
                    let nr = tape.neg(raw[i]);
                    let g = tape.softplus(nr);
                    let y = tape.sub(hi, g)?;
                    tape.clamp_const(y, f64::NEG_INFINITY, hi_val - math::bound_guard(hi_val))
                }
                TransformStep::Interval { lower, upper } => {
                    let a = lower.eval_max_traced(tape, &out)?;
                    let b = upper.eval_min_traced(tape, &out)?;
                    let a_val = tape.value_scalar(a);
                    let b_val = tape.value_scalar(b);
                    if math::softplus_offset(a_val, b_val).is_none() {
                        return Err(ApplyError::DegenerateInterval {
                            var: self.var_order.names()[i].clone(),
                        });
                    }
                    let k = traced_offset(tape, a, b)?;
                    let sp1 = tape.softplus(raw[i]);
                    let u = tape.sub(k, sp1)?;
                    let sp2 = tape.softplus(u);
                    let y = tape.sub(b, sp2)?;
                    let eta = math::interval_guard(a_val, b_val);
                    tape.clamp_const(y, a_val + eta, b_val - eta)
                }
                TransformStep::GroupMargin {
                    threshold,
                    out_group,
                    ..
                } => {
                    let gathered: Vec<Value> = out_group.iter().map(|&j| raw[j]).collect();
                    let stacked = tape.stack(&gathered)?;
                    let lse = tape.logsumexp(stacked)?;
                    let m = tape.add_const(lse, *threshold);
                    let m_val = tape.value_scalar(m);
                    let g = tape.softplus(raw[i]);
                    let g = tape.clamp_const(g, math::bound_guard(m_val), f64::INFINITY);
                    tape.add(m, g)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Human-readable step list used by the `compile` CLI subcommand.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            let deps = step.dependency_slots();
            let dep_str = if deps.is_empty() {
                String::new()
            } else {
                let names: Vec<&str> = deps
                    .iter()
                    .map(|&d| self.var_order.names()[d].as_str())
                    .collect();
                format!("   [depends on {}]", names.join(", "))
            };
            s.push_str(&format!(
                "  {}: {}{}\n",
                self.var_order.names()[i],
                step.describe(&self.var_order),
                dep_str
            ));
        }
        s
    }
}

/// Offset `log(exp(b - a) - 1)` recorded on the tape, branch chosen from the
/// forward values exactly as [`math::ln_expm1`] does.
fn traced_offset(tape: &mut Tape, a: Value, b: Value) -> Result<Value, GradError> {
    let u = tape.sub(b, a)?;
    let u_val = tape.value_scalar(u);
    if u_val > core::f64::consts::LN_2 {
        // u + ln_1p(-exp(-u))
        let nu = tape.neg(u);
        let e = tape.exp(nu);
        let ne = tape.neg(e);
        let l = tape.log1p(ne);
        tape.add(u, l)
    } else {
        // ln(expm1(u))
        let em = tape.expm1(u);
        Ok(tape.log(em))
    }
}

/// K compiled branches with their gating arity.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplexHead {
    programs: Vec<TransformProgram>,
}

impl MultiplexHead {
    pub fn programs(&self) -> &[TransformProgram] {
        &self.programs
    }

    /// Gating arity K.
    pub fn k(&self) -> usize {
        self.programs.len()
    }

    pub fn var_count(&self) -> usize {
        self.programs[0].var_count()
    }
}

// Solved inequality bound on a pivot, in exact rationals.
struct PendingBound {
    rhs: LinExpr,
    strict: bool,
}

/// Compile one feasible term into a transform program over `order`.
///
/// Every atom is pivoted on its highest-order variable; lower/upper/equality
/// bounds per pivot become the step for that slot. Crossing conditions
/// between dependent bounds are projected onto earlier variables so the
/// program is total. Terms discovered to be unsatisfiable during projection
/// yield [`CompileError::InfeasibleTerm`].
pub fn compile_term(term: &DnfTerm, order: &VarOrder) -> Result<TransformProgram, CompileError> {
    let simplified = match dnf::simplify_term(term) {
        Simplified::Infeasible => return Err(CompileError::InfeasibleTerm),
        Simplified::Term(t) => t,
    };
    for atom in simplified.atoms() {
        for v in atom.lhs().vars() {
            if order.lookup(&v.name).map(|o| o.index) != Some(v.index) {
                return Err(CompileError::UnknownVariable(v.name.clone()));
            }
        }
    }

    let mut pool: Vec<Atom> = simplified.atoms().to_vec();
    let mut steps: Vec<Option<TransformStep>> = vec![None; order.len()];

    for var_idx in (0..order.len()).rev() {
        let var_name = &order.names()[var_idx];
        let (mine, rest): (Vec<Atom>, Vec<Atom>) = pool
            .into_iter()
            .partition(|a| a.pivot().index == var_idx);
        pool = rest;
        if mine.is_empty() {
            continue;
        }

        let mut equalities: Vec<LinExpr> = Vec::new();
        let mut lowers: Vec<PendingBound> = Vec::new();
        let mut uppers: Vec<PendingBound> = Vec::new();
        for atom in &mine {
            let solved = atom.solve_for_pivot();
            match solved.cmp {
                Cmp::Eq => equalities.push(solved.rhs),
                Cmp::Gt | Cmp::Ge => lowers.push(PendingBound {
                    rhs: solved.rhs,
                    strict: solved.cmp.is_strict(),
                }),
                Cmp::Lt | Cmp::Le => uppers.push(PendingBound {
                    rhs: solved.rhs,
                    strict: solved.cmp.is_strict(),
                }),
            }
        }

        if !equalities.is_empty() {
            equalities.sort();
            let pin = equalities[0].clone();
            // Substitute the pinned value into every other constraint on
            // this variable; the residuals constrain earlier variables.
            for other in &equalities[1..] {
                push_derived(&mut pool, Formula::atom(pin.sub(other), Cmp::Eq))?;
            }
            for b in &lowers {
                let cmp = if b.strict { Cmp::Gt } else { Cmp::Ge };
                push_derived(&mut pool, Formula::atom(pin.sub(&b.rhs), cmp))?;
            }
            for b in &uppers {
                let cmp = if b.strict { Cmp::Lt } else { Cmp::Le };
                push_derived(&mut pool, Formula::atom(pin.sub(&b.rhs), cmp))?;
            }
            steps[var_idx] = Some(TransformStep::SetConst(Affine::from_linexpr(
                &pin, var_name,
            )?));
            continue;
        }

        // Project crossing conditions for every lower/upper pair. Constant
        // pairs fold immediately (infeasible terms die here); dependent
        // pairs become constraints on earlier variables.
        for lo in &lowers {
            for hi in &uppers {
                let derived =
                    dnf::crossing_constraint(&lo.rhs, lo.strict, &hi.rhs, hi.strict);
                push_derived(&mut pool, derived)?;
            }
        }

        let dep_lower = lowers.iter().any(|b| !b.rhs.is_constant());
        let dep_upper = uppers.iter().any(|b| !b.rhs.is_constant());
        if dep_lower && dep_upper {
            return Err(CompileError::RuntimeCrossingBounds {
                var: var_name.clone(),
            });
        }

        let lower_expr = merge_bounds(&lowers, true, var_name)?;
        let upper_expr = merge_bounds(&uppers, false, var_name)?;
        let step = match (lower_expr, upper_expr) {
            (None, None) => TransformStep::Passthrough,
            (Some(bound), None) => TransformStep::LowerBound { bound },
            (None, Some(bound)) => TransformStep::UpperBound { bound },
            (Some(lower), Some(upper)) => {
                match (lower.constant_value(), upper.constant_value()) {
                    // A closed grazing interval pins the output; an empty
                    // one was already rejected by the crossing projection.
                    (Some(a), Some(b)) if a == b => {
                        TransformStep::SetConst(Affine::constant(a))
                    }
                    _ => TransformStep::Interval { lower, upper },
                }
            }
        };
        steps[var_idx] = Some(step);
    }

    debug_assert!(pool.is_empty(), "all atoms consumed by pivot sweep");

    let steps: Vec<TransformStep> = steps
        .into_iter()
        .map(|s| s.unwrap_or(TransformStep::Passthrough))
        .collect();
    TransformProgram {
        steps,
        term: term.clone(),
        var_order: order.clone(),
    }
    .validate()
}

fn push_derived(pool: &mut Vec<Atom>, derived: Formula) -> Result<(), CompileError> {
    match derived {
        Formula::True => Ok(()),
        Formula::False => Err(CompileError::InfeasibleTerm),
        Formula::Atom(a) => {
            if !pool.contains(&a) {
                pool.push(a);
            }
            Ok(())
        }
        _ => unreachable!("derived constraints are single atoms"),
    }
}

fn merge_bounds(
    bounds: &[PendingBound],
    is_lower: bool,
    var_name: &str,
) -> Result<Option<BoundExpr>, CompileError> {
    if bounds.is_empty() {
        return Ok(None);
    }
    // Constant bounds collapse to their max (lower) / min (upper); dependent
    // bounds stay as separate parts combined pointwise at run time.
    let mut best_const: Option<f64> = None;
    let mut parts: Vec<Affine> = Vec::new();
    for b in bounds {
        if b.rhs.is_constant() {
            let v = b
                .rhs
                .constant_part()
                .to_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CompileError::NonRepresentable(var_name.to_string()))?;
            best_const = Some(match best_const {
                None => v,
                Some(cur) => {
                    if is_lower {
                        cur.max(v)
                    } else {
                        cur.min(v)
                    }
                }
            });
        } else {
            let affine = Affine::from_linexpr(&b.rhs, var_name)?;
            if !parts.contains(&affine) {
                parts.push(affine);
            }
        }
    }
    if let Some(c) = best_const {
        parts.push(Affine::constant(c));
    }
    Ok(Some(BoundExpr { parts }))
}

/// Compile a whole formula: DNF conversion, per-term feasibility filtering,
/// and per-term compilation. K is the number of surviving terms.
pub fn compile_formula(f: &Formula, order: &VarOrder) -> Result<MultiplexHead, CompileError> {
    for v in f.free_vars() {
        if order.lookup(&v.name).map(|o| o.index) != Some(v.index) {
            return Err(CompileError::UnknownVariable(v.name));
        }
    }
    let dnf_formula = dnf::to_dnf(f)?;
    let mut programs = Vec::new();
    for term in dnf_formula.terms() {
        match compile_term(term, order) {
            Ok(p) => programs.push(p),
            Err(CompileError::InfeasibleTerm) => continue,
            Err(e) => return Err(e),
        }
    }
    if programs.is_empty() {
        return Err(CompileError::NoFeasibleTerm);
    }
    Ok(MultiplexHead { programs })
}

/// Build one margin program per group for grouped classification over
/// `class_count` logits.
///
/// The program for group `i` leaves out-of-group logits untouched and lifts
/// every in-group logit above `log(alpha / (1 - alpha)) + logsumexp` of the
/// raw out-of-group logits, which forces the group's post-softmax mass
/// strictly above `alpha`.
pub fn compile_group_margin(
    groups: &[Vec<usize>],
    alpha: f64,
    class_count: usize,
) -> Result<Vec<TransformProgram>, CompileError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CompileError::AlphaOutOfRange(alpha));
    }
    let mut seen = vec![false; class_count];
    for (gi, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(CompileError::EmptyGroup(gi));
        }
        for &c in group {
            if c >= class_count {
                return Err(CompileError::InvalidPartition(format!(
                    "class index {c} out of range for {class_count} classes"
                )));
            }
            if seen[c] {
                return Err(CompileError::InvalidPartition(format!(
                    "class index {c} appears in more than one group"
                )));
            }
            seen[c] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(CompileError::InvalidPartition(
            "groups do not cover every class".into(),
        ));
    }

    let threshold = (alpha / (1.0 - alpha)).ln();
    let order = VarOrder::new((0..class_count).map(|i| format!("y{i}")))
        .expect("generated names are unique");
    let mut programs = Vec::with_capacity(groups.len());
    for group in groups {
        let out_group: Vec<usize> = (0..class_count).filter(|c| !group.contains(c)).collect();
        let steps: Vec<TransformStep> = (0..class_count)
            .map(|c| {
                if group.contains(&c) {
                    TransformStep::GroupMargin {
                        in_group: group.clone(),
                        threshold,
                        out_group: out_group.clone(),
                    }
                } else {
                    TransformStep::Passthrough
                }
            })
            .collect();
        programs.push(TransformProgram {
            steps,
            term: DnfTerm::new(vec![]),
            var_order: order.clone(),
        });
    }
    Ok(programs)
}

/// Does `logits` satisfy the margin condition for `group` at level `alpha`?
/// Used by metrics; mirrors the transform arithmetic exactly.
pub fn group_margin_satisfied(logits: &[f64], group: &[usize], alpha: f64) -> bool {
    let threshold = (alpha / (1.0 - alpha)).ln();
    let outs: Vec<f64> = (0..logits.len())
        .filter(|c| !group.contains(c))
        .map(|c| logits[c])
        .collect();
    if outs.is_empty() {
        return true;
    }
    let m = math::logsumexp(&outs) + threshold;
    group.iter().all(|&j| logits[j] > m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::parse;

    fn order(names: &[&str]) -> VarOrder {
        VarOrder::new(names.iter().copied()).unwrap()
    }

    fn compile_one(text: &str, o: &VarOrder) -> TransformProgram {
        let f = parse(text, o).unwrap();
        let d = dnf::to_dnf(&f).unwrap();
        assert_eq!(d.terms().len(), 1);
        compile_term(&d.terms()[0], o).unwrap()
    }

    #[test]
    fn disjunction_of_halflines_compiles_to_two_branches() {
        let o = order(&["x"]);
        let f = parse("x >= 2 | x <= -2", &o).unwrap();
        let head = compile_formula(&f, &o).unwrap();
        assert_eq!(head.k(), 2);

        // Branch transforms are g(x~) + 2 and -g(-x~) - 2 (away from the
        // deep-saturation regime where the strictness guard takes over).
        for raw in [-8.0, -3.0, 0.0, 1.7, 8.0] {
            let out_hi = head.programs()[0].apply(&[raw]).unwrap();
            assert!(
                (out_hi[0] - (math::softplus(raw) + 2.0)).abs() < 1e-12,
                "lower-bound branch"
            );
            let out_lo = head.programs()[1].apply(&[raw]).unwrap();
            assert!(
                (out_lo[0] - (-math::softplus(-raw) - 2.0)).abs() < 1e-12,
                "upper-bound branch"
            );
        }
        for raw in [-50.0, -3.0, 0.0, 1.7, 50.0] {
            for p in head.programs() {
                let y = p.apply(&[raw]).unwrap();
                assert!(f.eval_f64(&y).unwrap(), "raw {raw} -> {y:?}");
            }
        }
    }

    #[test]
    fn equality_pins_output() {
        let o = order(&["x"]);
        let p = compile_one("x = 3", &o);
        for raw in [-50.0, 0.0, 17.5] {
            assert_eq!(p.apply(&[raw]).unwrap(), vec![3.0]);
        }
    }

    #[test]
    fn dependent_interval_matches_offset_formula() {
        // x > y + 2 & x < 5 with order (y, x): the crossing projection also
        // bounds y above by 3, which keeps the runtime interval non-empty.
        let o = order(&["y", "x"]);
        let p = compile_one("x > y + 2 & x < 5", &o);
        match &p.steps()[0] {
            TransformStep::UpperBound { bound } => {
                assert_eq!(bound.constant_value(), Some(3.0));
            }
            other => panic!("expected derived upper bound on y, got {other:?}"),
        }
        assert!(matches!(p.steps()[1], TransformStep::Interval { .. }));

        let f = parse("x > y + 2 & x < 5", &o).unwrap();
        for raw_y in [-40.0, -1.0, 0.0, 2.9, 35.0] {
            for raw_x in [-50.0, -0.3, 0.0, 4.0, 50.0] {
                let out = p.apply(&[raw_y, raw_x]).unwrap();
                assert!(
                    f.eval_f64(&out).unwrap(),
                    "raw ({raw_y}, {raw_x}) -> {out:?}"
                );
                // The x step realizes b - g(k(a, b) - g(x~)) with runtime
                // a = y + 2 and b = 5.
                let a = out[0] + 2.0;
                let k = math::softplus_offset(a, 5.0).unwrap();
                let expect = math::interval_transform(raw_x, k, 5.0)
                    .clamp(a + math::interval_guard(a, 5.0), 5.0 - math::interval_guard(a, 5.0));
                assert_eq!(out[1].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn interval_known_value() {
        let o = order(&["x"]);
        let p = compile_one("x > 0 & x < 1", &o);
        let out = p.apply(&[0.0]).unwrap();
        // Frozen from a 40-digit evaluation of the squash at 0 on (0, 1).
        assert!((out[0] - 0.3798854930417225).abs() < 1e-15);
    }

    #[test]
    fn infeasible_term_is_dropped_by_formula_compile() {
        let o = order(&["x"]);
        let f = parse("(x > 5 & x < 3) | x > 0", &o).unwrap();
        let head = compile_formula(&f, &o).unwrap();
        assert_eq!(head.k(), 1);

        let g = parse("x > 5 & x < 3", &o).unwrap();
        assert!(matches!(
            compile_formula(&g, &o),
            Err(CompileError::NoFeasibleTerm)
        ));
    }

    #[test]
    fn single_conjunction_gives_degenerate_gating() {
        let o = order(&["x", "y"]);
        let f = parse("x > 0 & y < 1", &o).unwrap();
        let head = compile_formula(&f, &o).unwrap();
        assert_eq!(head.k(), 1);
    }

    #[test]
    fn both_dependent_bounds_are_rejected() {
        let o = order(&["a", "b", "x"]);
        let f = parse("x > a & x < b", &o).unwrap();
        let d = dnf::to_dnf(&f).unwrap();
        assert!(matches!(
            compile_term(&d.terms()[0], &o),
            Err(CompileError::RuntimeCrossingBounds { .. })
        ));
    }

    #[test]
    fn closed_grazing_interval_pins() {
        let o = order(&["x"]);
        let p = compile_one("x >= 2 & x <= 2", &o);
        assert_eq!(p.apply(&[12.3]).unwrap(), vec![2.0]);
    }

    #[test]
    fn equality_with_dependent_residual_projects() {
        // x = 2 & x > y: pins x and pushes 2 > y onto y.
        let o = order(&["y", "x"]);
        let p = compile_one("x = 2 & x > y", &o);
        match &p.steps()[0] {
            TransformStep::UpperBound { bound } => {
                assert_eq!(bound.constant_value(), Some(2.0));
            }
            other => panic!("expected upper bound on y, got {other:?}"),
        }
        let f = parse("x = 2 & x > y", &o).unwrap();
        for raw in [[-20.0, 3.0], [5.0, -1.0], [50.0, 50.0]] {
            let out = p.apply(&raw).unwrap();
            assert!(f.eval_f64(&out).unwrap());
        }
    }

    #[test]
    fn strict_bounds_hold_at_extreme_raw_inputs() {
        // softplus(-50) underflows against bounds of ordinary magnitude;
        // the guard keeps the strict inequality true under exact evaluation.
        let o = order(&["x"]);
        let p = compile_one("x > 2", &o);
        let out = p.apply(&[-50.0]).unwrap();
        assert!(out[0] > 2.0, "guarded output {} must exceed 2", out[0]);
        let f = parse("x > 2", &o).unwrap();
        assert!(f.eval_f64(&out).unwrap());

        let q = compile_one("x > 0 & x < 1", &o);
        for raw in [-50.0, 50.0] {
            let y = q.apply(&[raw]).unwrap()[0];
            assert!(y > 0.0 && y < 1.0, "raw {raw} -> {y}");
        }
    }

    #[test]
    fn traced_apply_is_bit_identical_to_plain_apply() {
        let o = order(&["y", "x"]);
        let p = compile_one("x > y + 2 & x < 5 & y > -4", &o);
        for raw in [[-3.0, 0.25], [0.0, 0.0], [2.5, -7.0], [-50.0, 50.0]] {
            let plain = p.apply(&raw).unwrap();
            let mut tape = Tape::new();
            let leaves: Vec<Value> = raw.iter().map(|&x| tape.scalar(x)).collect();
            let traced = p.apply_traced(&mut tape, &leaves).unwrap();
            for (a, b) in plain.iter().zip(&traced) {
                assert_eq!(a.to_bits(), tape.value_scalar(*b).to_bits());
            }
        }
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let o = order(&["x"]);
        let p = compile_one("x > 0", &o);
        assert!(matches!(
            p.apply(&[f64::NAN]),
            Err(ApplyError::NonFiniteInput(0))
        ));
        assert!(matches!(
            p.apply(&[1.0, 2.0]),
            Err(ApplyError::WrongArity { .. })
        ));
    }

    #[test]
    fn group_margin_masses_exceed_alpha() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;

        let groups = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]];
        let alpha = 0.95;
        let programs = compile_group_margin(&groups, alpha, 9).unwrap();
        assert_eq!(programs.len(), 3);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2_000 {
            let raw: Vec<f64> = (0..9).map(|_| rng.random_range(-8.0..8.0)).collect();
            for (gi, p) in programs.iter().enumerate() {
                let y = p.apply(&raw).unwrap();
                assert!(group_margin_satisfied(&y, &groups[gi], alpha));
                // Post-softmax in-group mass strictly above alpha.
                let lse_all = math::logsumexp(&y);
                let mass: f64 = groups[gi].iter().map(|&j| (y[j] - lse_all).exp()).sum();
                assert!(mass > alpha, "group {gi} mass {mass}");
                // Out-of-group logits pass through raw.
                for c in 0..9 {
                    if !groups[gi].contains(&c) {
                        assert_eq!(y[c], raw[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn group_margin_two_classes() {
        let programs = compile_group_margin(&[vec![0], vec![1]], 0.5, 2).unwrap();
        let y = programs[0].apply(&[0.3, 0.8]).unwrap();
        // threshold log(0.5/0.5) = 0: constrained logit exceeds the other.
        assert!(y[0] > y[1]);
    }

    #[test]
    fn group_margin_validation() {
        assert!(matches!(
            compile_group_margin(&[vec![0], vec![]], 0.9, 1),
            Err(CompileError::EmptyGroup(1))
        ));
        assert!(matches!(
            compile_group_margin(&[vec![0]], 1.0, 1),
            Err(CompileError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            compile_group_margin(&[vec![0], vec![0]], 0.9, 1),
            Err(CompileError::InvalidPartition(_))
        ));
    }

    #[test]
    fn softplus_offset_reexport_behaves() {
        assert!(softplus_offset(1.0, 1.0).is_none());
        assert_eq!(softplus(0.0), 2.0_f64.ln());
    }
}
