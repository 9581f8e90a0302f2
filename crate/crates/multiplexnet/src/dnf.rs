//! Normalization to disjunctive normal form.
//!
//! Conversion runs in two stages: negation normal form (negations are
//! absorbed into atoms by flipping comparators, so no `Not` nodes survive),
//! followed by distribution of conjunction over disjunction. Distribution can
//! blow up exponentially, so the converter enforces a configurable term
//! budget instead of silently producing huge outputs.
//!
//! Terms are kept canonical: atoms sorted and deduplicated within a term,
//! exact duplicate terms removed, and the term list sorted, so conversion is
//! reproducible and idempotent.

use crate::logic::{Atom, Cmp, Formula, LinExpr, Rational, VarId};
use std::collections::BTreeMap;
use thiserror::Error;

/// Default cap on the number of DNF terms produced by [`to_dnf`].
pub const DEFAULT_TERM_BUDGET: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DnfError {
    /// Negated equalities have no atom-level rewrite in this language.
    #[error("disequality unsupported: negation of an equality atom")]
    Disequality,
    #[error("DNF term budget exceeded (limit {limit})")]
    TermBudgetExceeded { limit: usize },
}

/// One conjunctive term of a DNF formula. An empty atom list denotes `true`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DnfTerm {
    atoms: Vec<Atom>,
}

impl DnfTerm {
    /// Build a term from atoms, sorting and removing duplicates.
    pub fn new(mut atoms: Vec<Atom>) -> Self {
        atoms.sort();
        atoms.dedup();
        DnfTerm { atoms }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_true(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn as_formula(&self) -> Formula {
        if self.atoms.is_empty() {
            Formula::True
        } else {
            Formula::and(self.atoms.iter().cloned().map(Formula::Atom).collect())
        }
    }
}

/// A disjunction of conjunctive terms. An empty term list denotes `false`
/// (the empty disjunction), which arises when every branch folds away.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnfFormula {
    terms: Vec<DnfTerm>,
}

impl DnfFormula {
    pub fn terms(&self) -> &[DnfTerm] {
        &self.terms
    }

    pub fn as_formula(&self) -> Formula {
        if self.terms.is_empty() {
            Formula::False
        } else {
            Formula::or(self.terms.iter().map(|t| t.as_formula()).collect())
        }
    }
}

/// Rewrite to negation normal form: no `Not` nodes remain, negations are
/// absorbed by comparator flipping (`!(e >= 0)` becomes `e < 0`, etc.).
///
/// Fails with [`DnfError::Disequality`] on a negated equality.
pub fn to_nnf(f: &Formula) -> Result<Formula, DnfError> {
    nnf(f, false)
}

fn nnf(f: &Formula, negate: bool) -> Result<Formula, DnfError> {
    Ok(match f {
        Formula::True => {
            if negate {
                Formula::False
            } else {
                Formula::True
            }
        }
        Formula::False => {
            if negate {
                Formula::True
            } else {
                Formula::False
            }
        }
        Formula::Atom(a) => {
            if negate {
                let flipped = a.cmp().negate().ok_or(DnfError::Disequality)?;
                Formula::atom(a.lhs().clone(), flipped)
            } else {
                Formula::Atom(a.clone())
            }
        }
        Formula::Not(inner) => nnf(inner, !negate)?,
        Formula::And(children) => {
            let converted: Result<Vec<_>, _> = children.iter().map(|c| nnf(c, negate)).collect();
            if negate {
                Formula::or(converted?)
            } else {
                Formula::and(converted?)
            }
        }
        Formula::Or(children) => {
            let converted: Result<Vec<_>, _> = children.iter().map(|c| nnf(c, negate)).collect();
            if negate {
                Formula::and(converted?)
            } else {
                Formula::or(converted?)
            }
        }
    })
}

/// Convert to DNF with the default term budget.
pub fn to_dnf(f: &Formula) -> Result<DnfFormula, DnfError> {
    to_dnf_with_budget(f, DEFAULT_TERM_BUDGET)
}

/// Convert to DNF, failing if more than `budget` terms would be produced.
pub fn to_dnf_with_budget(f: &Formula, budget: usize) -> Result<DnfFormula, DnfError> {
    let nnf = to_nnf(f)?;
    let raw = distribute(&nnf, budget)?;
    let mut terms: Vec<DnfTerm> = raw.into_iter().map(DnfTerm::new).collect();
    terms.sort();
    terms.dedup();
    Ok(DnfFormula { terms })
}

fn distribute(f: &Formula, budget: usize) -> Result<Vec<Vec<Atom>>, DnfError> {
    match f {
        Formula::True => Ok(vec![vec![]]),
        Formula::False => Ok(vec![]),
        Formula::Atom(a) => Ok(vec![vec![a.clone()]]),
        Formula::Not(_) => unreachable!("input is in NNF"),
        Formula::Or(children) => {
            let mut out = Vec::new();
            for c in children {
                out.extend(distribute(c, budget)?);
                if out.len() > budget {
                    return Err(DnfError::TermBudgetExceeded { limit: budget });
                }
            }
            Ok(out)
        }
        Formula::And(children) => {
            let mut acc: Vec<Vec<Atom>> = vec![vec![]];
            for c in children {
                let rhs = distribute(c, budget)?;
                if rhs.is_empty() {
                    return Ok(vec![]);
                }
                if acc.len().saturating_mul(rhs.len()) > budget {
                    return Err(DnfError::TermBudgetExceeded { limit: budget });
                }
                let mut next = Vec::with_capacity(acc.len() * rhs.len());
                for left in &acc {
                    for right in &rhs {
                        let mut t = left.clone();
                        t.extend(right.iter().cloned());
                        next.push(t);
                    }
                }
                acc = next;
            }
            Ok(acc)
        }
    }
}

/// Result of [`simplify_term`]: either a reduced term or the discovery that
/// the term is unsatisfiable. Infeasibility is a value, not an error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Simplified {
    Term(DnfTerm),
    Infeasible,
}

#[derive(Default)]
struct ConstBounds {
    // (bound value, strict, index of the atom that set it)
    lower: Option<(Rational, bool, usize)>,
    upper: Option<(Rational, bool, usize)>,
    equal: Option<(Rational, usize)>,
}

/// Merge constant bounds per pivot variable: lower bounds to their max,
/// upper bounds to their min, equalities checked for consistency. Returns
/// [`Simplified::Infeasible`] when the merged interval is empty (equal
/// endpoints with a strict side, or crossed endpoints) or equalities
/// contradict. Atoms whose solved bound involves other variables pass
/// through untouched.
pub fn simplify_term(term: &DnfTerm) -> Simplified {
    let mut per_var: BTreeMap<VarId, ConstBounds> = BTreeMap::new();
    let mut passthrough: Vec<Atom> = Vec::new();

    for (idx, atom) in term.atoms().iter().enumerate() {
        let solved = atom.solve_for_pivot();
        if !solved.rhs.is_constant() {
            passthrough.push(atom.clone());
            continue;
        }
        let value = solved.rhs.constant_part().clone();
        let slot = per_var.entry(solved.pivot.clone()).or_default();
        match solved.cmp {
            Cmp::Eq => match &slot.equal {
                Some((existing, _)) if *existing != value => return Simplified::Infeasible,
                Some(_) => {}
                None => slot.equal = Some((value, idx)),
            },
            Cmp::Gt | Cmp::Ge => {
                let strict = solved.cmp.is_strict();
                let replace = match &slot.lower {
                    None => true,
                    Some((cur, cur_strict, _)) => {
                        value > *cur || (value == *cur && strict && !cur_strict)
                    }
                };
                if replace {
                    slot.lower = Some((value, strict, idx));
                }
            }
            Cmp::Lt | Cmp::Le => {
                let strict = solved.cmp.is_strict();
                let replace = match &slot.upper {
                    None => true,
                    Some((cur, cur_strict, _)) => {
                        value < *cur || (value == *cur && strict && !cur_strict)
                    }
                };
                if replace {
                    slot.upper = Some((value, strict, idx));
                }
            }
        }
    }

    let mut kept_indices: Vec<usize> = Vec::new();
    for (_, bounds) in per_var {
        if let Some((eq_value, eq_idx)) = bounds.equal {
            // The equality subsumes the bounds, but must satisfy them.
            if let Some((lo, strict, _)) = &bounds.lower {
                let ok = if *strict { eq_value > *lo } else { eq_value >= *lo };
                if !ok {
                    return Simplified::Infeasible;
                }
            }
            if let Some((hi, strict, _)) = &bounds.upper {
                let ok = if *strict { eq_value < *hi } else { eq_value <= *hi };
                if !ok {
                    return Simplified::Infeasible;
                }
            }
            kept_indices.push(eq_idx);
            continue;
        }
        if let (Some((lo, lo_strict, _)), Some((hi, hi_strict, _))) =
            (&bounds.lower, &bounds.upper)
        {
            let empty = lo > hi || (lo == hi && (*lo_strict || *hi_strict));
            if empty {
                return Simplified::Infeasible;
            }
        }
        if let Some((_, _, idx)) = bounds.lower {
            kept_indices.push(idx);
        }
        if let Some((_, _, idx)) = bounds.upper {
            kept_indices.push(idx);
        }
    }

    let mut atoms = passthrough;
    for idx in kept_indices {
        atoms.push(term.atoms()[idx].clone());
    }
    Simplified::Term(DnfTerm::new(atoms))
}

/// Solve a two-sided feasibility question used by the compiler: given a
/// lower and an upper solved bound on the same pivot, the derived constraint
/// `upper - lower CMP 0` (strict unless both bounds are closed) must hold.
pub(crate) fn crossing_constraint(lower: &LinExpr, lower_strict: bool, upper: &LinExpr, upper_strict: bool) -> Formula {
    let lhs = upper.sub(lower);
    let cmp = if lower_strict || upper_strict {
        Cmp::Gt
    } else {
        Cmp::Ge
    };
    // Folds to True/False when both sides are constant.
    Formula::atom(lhs, cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{parse, VarOrder};

    fn order(names: &[&str]) -> VarOrder {
        VarOrder::new(names.iter().copied()).unwrap()
    }

    fn parse_term(text: &str, o: &VarOrder) -> DnfTerm {
        let f = parse(text, o).unwrap();
        let d = to_dnf(&f).unwrap();
        assert_eq!(d.terms().len(), 1, "expected a single conjunctive term");
        d.terms()[0].clone()
    }

    #[test]
    fn nnf_flips_comparators() {
        let o = order(&["x"]);
        let f = parse("!(x >= 2)", &o).unwrap();
        let n = to_nnf(&f).unwrap();
        assert_eq!(n, parse("x < 2", &o).unwrap());

        let g = parse("!(x > 0)", &o).unwrap();
        assert_eq!(to_nnf(&g).unwrap(), parse("x <= 0", &o).unwrap());
    }

    #[test]
    fn nnf_de_morgan() {
        let o = order(&["x", "y"]);
        let f = parse("!(x > 1 & y <= 2)", &o).unwrap();
        let n = to_nnf(&f).unwrap();
        assert_eq!(n, parse("x <= 1 | y > 2", &o).unwrap());
    }

    #[test]
    fn nnf_rejects_disequality() {
        let o = order(&["x"]);
        let f = parse("!(x = 5)", &o).unwrap();
        assert_eq!(to_nnf(&f), Err(DnfError::Disequality));
    }

    #[test]
    fn distributes_and_over_or() {
        let o = order(&["x", "y", "z"]);
        let f = parse("(x > 0 | y > 0) & z < 1", &o).unwrap();
        let d = to_dnf(&f).unwrap();
        assert_eq!(d.terms().len(), 2);
        for t in d.terms() {
            assert_eq!(t.atoms().len(), 2);
        }
    }

    #[test]
    fn single_conjunction_is_one_term() {
        let o = order(&["x", "y", "z"]);
        let f = parse("x > 0 & y > 0 & z > 0", &o).unwrap();
        let d = to_dnf(&f).unwrap();
        assert_eq!(d.terms().len(), 1);
        assert_eq!(d.terms()[0].atoms().len(), 3);
    }

    #[test]
    fn two_percolumn_disjunctions_give_four_terms() {
        // Truth-table oracle: each of the 4 sign patterns of the two clauses
        // yields one conjunctive term, and the DNF agrees with the original
        // on every region representative.
        let o = order(&["p1", "p2"]);
        let f = parse(
            "(p1 < 0.05 | p1 > 0.95) & (p2 < 0.05 | p2 > 0.95)",
            &o,
        )
        .unwrap();
        let d = to_dnf(&f).unwrap();
        assert_eq!(d.terms().len(), 4);
        let g = d.as_formula();
        for p1 in [0.0, 0.5, 1.0] {
            for p2 in [0.0, 0.5, 1.0] {
                let point = [p1, p2];
                assert_eq!(f.eval_f64(&point).unwrap(), g.eval_f64(&point).unwrap());
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let o = order(&["a", "b", "c", "d"]);
        let f = parse(
            "(a > 0 | a < 1) & (b > 0 | b < 1) & (c > 0 | c < 1) & (d > 0 | d < 1)",
            &o,
        )
        .unwrap();
        assert_eq!(to_dnf_with_budget(&f, 16).unwrap().terms().len(), 16);
        assert_eq!(
            to_dnf_with_budget(&f, 15),
            Err(DnfError::TermBudgetExceeded { limit: 15 })
        );
    }

    #[test]
    fn simplify_keeps_dominant_lower_bound() {
        let o = order(&["x"]);
        let t = parse_term("x > 1 & x > 3", &o);
        match simplify_term(&t) {
            Simplified::Term(s) => {
                assert_eq!(s.atoms().len(), 1);
                assert_eq!(s.as_formula(), parse("x > 3", &o).unwrap());
            }
            Simplified::Infeasible => panic!("term is feasible"),
        }
    }

    #[test]
    fn simplify_detects_empty_interval() {
        let o = order(&["x"]);
        let t = parse_term("x > 5 & x < 3", &o);
        assert_eq!(simplify_term(&t), Simplified::Infeasible);
        let u = parse_term("x > 2 & x <= 2", &o);
        assert_eq!(simplify_term(&u), Simplified::Infeasible);
        let closed = parse_term("x >= 2 & x <= 2", &o);
        assert!(matches!(simplify_term(&closed), Simplified::Term(_)));
    }

    #[test]
    fn simplify_equality_absorbs_residual_bounds() {
        let o = order(&["x"]);
        let t = parse_term("x = 2 & x > 0", &o);
        match simplify_term(&t) {
            Simplified::Term(s) => {
                assert_eq!(s.as_formula(), parse("x = 2", &o).unwrap());
                // Oracle: the kept equality still implies the dropped bound.
                assert!(parse("x = 2 & x > 0", &o)
                    .unwrap()
                    .eval_f64(&[2.0])
                    .unwrap());
            }
            Simplified::Infeasible => panic!("term is feasible"),
        }
        let bad = parse_term("x = 2 & x > 3", &o);
        assert_eq!(simplify_term(&bad), Simplified::Infeasible);
        let twice = parse_term("x = 2 & x = 3", &o);
        assert_eq!(simplify_term(&twice), Simplified::Infeasible);
    }

    #[test]
    fn dnf_of_false_is_empty() {
        let o = order(&["x"]);
        let f = parse("x > 1 & x > 2 & 1 > 2", &o).unwrap();
        assert_eq!(f, Formula::False);
        let d = to_dnf(&f).unwrap();
        assert!(d.terms().is_empty());
        assert_eq!(d.as_formula(), Formula::False);
    }

    #[test]
    fn idempotent_up_to_ordering() {
        let o = order(&["x", "y"]);
        let f = parse("(x > 0 | y > 0) & (x < 1 | y < 1)", &o).unwrap();
        let d1 = to_dnf(&f).unwrap();
        let d2 = to_dnf(&d1.as_formula()).unwrap();
        assert_eq!(d1.terms(), d2.terms());
    }
}
