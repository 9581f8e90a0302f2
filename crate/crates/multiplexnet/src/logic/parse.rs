//! Recursive-descent parser for the formula language.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! formula := or
//! or      := and ("|" and)*
//! and     := unary ("&" unary)*
//! unary   := "!" unary | "(" formula ")" | atom
//! atom    := linexpr cmp linexpr
//! cmp     := ">=" | "<=" | ">" | "<" | "="
//! linexpr := ["-"] term (("+" | "-") term)*
//! term    := number | number "*" ident | ident
//! number  := digits ["." digits]          (exact rational)
//! ident   := [A-Za-z_][A-Za-z0-9_]*
//! ```
//!
//! The optional leading minus is a small extension over the base grammar so
//! that negative constants (`x >= -3`) can be written directly.

use super::{Cmp, Formula, LinExpr, Rational, VarId, VarOrder};
use num_bigint::BigInt;
use num_traits::Zero;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("unknown identifier `{name}` at line {line}, column {col}")]
    UnknownIdentifier {
        name: String,
        line: usize,
        col: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(Rational),
    Plus,
    Minus,
    Star,
    And,
    Or,
    Not,
    LParen,
    RParen,
    Cmp(Cmp),
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0usize;

    while i < chars.len() {
        let c = chars[i];
        let (tline, tcol) = (line, col);
        let mut push = |tok: Tok| {
            out.push(Spanned {
                tok,
                line: tline,
                col: tcol,
            })
        };
        match c {
            '\n' => {
                line += 1;
                col = 1;
                i += 1;
                continue;
            }
            c if c.is_whitespace() => {}
            '+' => push(Tok::Plus),
            '-' => push(Tok::Minus),
            '*' => push(Tok::Star),
            '&' => push(Tok::And),
            '|' => push(Tok::Or),
            '!' => push(Tok::Not),
            '(' => push(Tok::LParen),
            ')' => push(Tok::RParen),
            '=' => push(Tok::Cmp(Cmp::Eq)),
            '>' | '<' => {
                let strict = c == '>';
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    push(Tok::Cmp(if strict { Cmp::Ge } else { Cmp::Le }));
                    i += 1;
                    col += 1;
                } else {
                    push(Tok::Cmp(if strict { Cmp::Gt } else { Cmp::Lt }));
                }
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let mut frac_len = 0usize;
                if i < chars.len() && chars[i] == '.' {
                    i += 1;
                    let frac_start = i;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                    frac_len = i - frac_start;
                    if frac_len == 0 {
                        return Err(ParseError::Syntax {
                            line,
                            col,
                            message: "expected digits after decimal point".into(),
                        });
                    }
                }
                let lexeme: String = chars[start..i].iter().collect();
                let digits: String = lexeme.chars().filter(|c| *c != '.').collect();
                let numer: BigInt = digits.parse().expect("digit string");
                let denom = BigInt::from(10).pow(frac_len as u32);
                out.push(Spanned {
                    tok: Tok::Number(Rational::new(numer, denom)),
                    line,
                    col,
                });
                col += lexeme.chars().count();
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || chars[i] == '_')
                {
                    i += 1;
                }
                let name: String = chars[start..i].iter().collect();
                let len = name.chars().count();
                out.push(Spanned {
                    tok: Tok::Ident(name),
                    line,
                    col,
                });
                col += len;
                continue;
            }
            other => {
                return Err(ParseError::Syntax {
                    line,
                    col,
                    message: format!("unexpected character `{other}`"),
                });
            }
        }
        i += 1;
        col += 1;
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Spanned>,
    pos: usize,
    order: &'a VarOrder,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        let t = self.peek();
        ParseError::Syntax {
            line: t.line,
            col: t.col,
            message: message.into(),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek().tok == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn lookup(&self, name: &str, line: usize, col: usize) -> Result<VarId, ParseError> {
        self.order
            .lookup(name)
            .ok_or_else(|| ParseError::UnknownIdentifier {
                name: name.to_string(),
                line,
                col,
            })
    }

    fn formula(&mut self) -> Result<Formula, ParseError> {
        let mut children = vec![self.and_chain()?];
        while self.peek().tok == Tok::Or {
            self.bump();
            children.push(self.and_chain()?);
        }
        Ok(if children.len() == 1 {
            children.pop().unwrap()
        } else {
            Formula::or(children)
        })
    }

    fn and_chain(&mut self) -> Result<Formula, ParseError> {
        let mut children = vec![self.unary()?];
        while self.peek().tok == Tok::And {
            self.bump();
            children.push(self.unary()?);
        }
        Ok(if children.len() == 1 {
            children.pop().unwrap()
        } else {
            Formula::and(children)
        })
    }

    fn unary(&mut self) -> Result<Formula, ParseError> {
        match self.peek().tok {
            Tok::Not => {
                self.bump();
                Ok(Formula::not(self.unary()?))
            }
            Tok::LParen => {
                self.bump();
                let f = self.formula()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(f)
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Formula, ParseError> {
        let lhs = self.linexpr()?;
        let cmp = match self.peek().tok {
            Tok::Cmp(c) => {
                self.bump();
                c
            }
            _ => return Err(self.error("expected a comparison operator")),
        };
        let rhs = self.linexpr()?;
        Ok(Formula::atom(lhs.sub(&rhs), cmp))
    }

    fn linexpr(&mut self) -> Result<LinExpr, ParseError> {
        let mut acc = LinExpr::constant(Rational::zero());
        let mut negate = false;
        if self.peek().tok == Tok::Minus {
            self.bump();
            negate = true;
        }
        let first = self.term()?;
        acc = acc.add(&if negate { first.neg() } else { first });
        loop {
            let sub = match self.peek().tok {
                Tok::Plus => false,
                Tok::Minus => true,
                _ => break,
            };
            self.bump();
            let t = self.term()?;
            acc = acc.add(&if sub { t.neg() } else { t });
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<LinExpr, ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Number(n) => {
                self.bump();
                if self.peek().tok == Tok::Star {
                    self.bump();
                    let id = self.peek().clone();
                    if let Tok::Ident(name) = id.tok {
                        self.bump();
                        let v = self.lookup(&name, id.line, id.col)?;
                        Ok(LinExpr::scaled_var(v, n))
                    } else {
                        Err(self.error("expected an identifier after `*`"))
                    }
                } else {
                    Ok(LinExpr::constant(n))
                }
            }
            Tok::Ident(name) => {
                self.bump();
                let v = self.lookup(&name, t.line, t.col)?;
                Ok(LinExpr::var(v))
            }
            _ => Err(self.error("expected a number or identifier")),
        }
    }
}

/// Parse `text` against a declared variable order.
///
/// Every identifier in the text must appear in `order`. Variable-free
/// comparisons fold to `True`/`False` during parsing, and constant folding
/// propagates through the connectives.
pub fn parse(text: &str, order: &VarOrder) -> Result<Formula, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        order,
    };
    let f = p.formula()?;
    if p.peek().tok != Tok::Eof {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(f)
}

/// Parse with the variable order inferred from first occurrence in the text.
///
/// Convenience for CLI entry points where no explicit order is given.
pub fn parse_with_inferred_order(text: &str) -> Result<(Formula, VarOrder), ParseError> {
    let toks = lex(text)?;
    let mut names: Vec<String> = Vec::new();
    for t in &toks {
        if let Tok::Ident(name) = &t.tok {
            if !names.iter().any(|n| n == name) {
                names.push(name.clone());
            }
        }
    }
    let order = VarOrder::new(names).expect("first-occurrence names are unique");
    let f = parse(text, &order)?;
    Ok((f, order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::Atom;

    fn order(names: &[&str]) -> VarOrder {
        VarOrder::new(names.iter().copied()).unwrap()
    }

    fn atoms_of(f: &Formula) -> Vec<&Atom> {
        fn walk<'a>(f: &'a Formula, out: &mut Vec<&'a Atom>) {
            match f {
                Formula::Atom(a) => out.push(a),
                Formula::Not(g) => walk(g, out),
                Formula::And(fs) | Formula::Or(fs) => fs.iter().for_each(|g| walk(g, out)),
                _ => {}
            }
        }
        let mut v = Vec::new();
        walk(f, &mut v);
        v
    }

    #[test]
    fn parses_conjunction_of_disjunction() {
        let o = order(&["x", "y", "z"]);
        let f = parse("(x + y >= z) & (z > 5 | z < 3)", &o).unwrap();
        match &f {
            Formula::And(children) => {
                assert_eq!(children.len(), 2);
                assert!(matches!(children[0], Formula::Atom(_)));
                match &children[1] {
                    Formula::Or(gs) => assert_eq!(gs.len(), 2),
                    other => panic!("expected disjunction, got {other:?}"),
                }
            }
            other => panic!("expected conjunction, got {other:?}"),
        }
        assert_eq!(atoms_of(&f).len(), 3);
    }

    #[test]
    fn parses_simple_conjunction() {
        let o = order(&["x", "y"]);
        let f = parse("x > 3.5 & y > 0", &o).unwrap();
        match f {
            Formula::And(children) => assert_eq!(children.len(), 2),
            other => panic!("expected conjunction, got {other:?}"),
        }
    }

    #[test]
    fn parses_single_equality() {
        let o = order(&["x"]);
        let f = parse("x = 5", &o).unwrap();
        match f {
            Formula::Atom(a) => assert_eq!(a.cmp(), Cmp::Eq),
            other => panic!("expected atom, got {other:?}"),
        }
    }

    #[test]
    fn decimal_literals_are_exact() {
        let o = order(&["x"]);
        let f = parse("x >= 3.5", &o).unwrap();
        let vals_hit = [Rational::new(7.into(), 2.into())];
        assert!(f.eval(&vals_hit).unwrap());
        let vals_miss = [Rational::new(6999999.into(), 2000000.into())];
        assert!(!f.eval(&vals_miss).unwrap());
    }

    #[test]
    fn constant_comparison_folds() {
        let o = order(&["x"]);
        assert_eq!(parse("3 > 2", &o).unwrap(), Formula::True);
        assert_eq!(parse("3 < 2 & x > 0", &o).unwrap(), Formula::False);
        assert_eq!(parse("3 > 2 | x > 0", &o).unwrap(), Formula::True);
    }

    #[test]
    fn unknown_identifier_reports_location() {
        let o = order(&["x"]);
        match parse("x > 0 & q < 1", &o) {
            Err(ParseError::UnknownIdentifier { name, line, col }) => {
                assert_eq!(name, "q");
                assert_eq!(line, 1);
                assert_eq!(col, 9);
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_location() {
        let o = order(&["x"]);
        match parse("x >\n> 1", &o) {
            Err(ParseError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn leading_minus_and_coefficients() {
        let o = order(&["x", "y"]);
        let f = parse("-x + 2*y >= -3.25", &o).unwrap();
        let a = match &f {
            Formula::Atom(a) => a,
            other => panic!("expected atom, got {other:?}"),
        };
        assert_eq!(a.lhs().coeff(&o.var(0)), Rational::from_integer((-1).into()));
        assert_eq!(a.lhs().coeff(&o.var(1)), Rational::from_integer(2.into()));
    }

    #[test]
    fn print_parse_is_a_fixpoint() {
        let o = order(&["x", "y", "z"]);
        for text in [
            "(x + y >= z) & (z > 5 | z < 3)",
            "!(x = 5) | y < 0.125",
            "x > 3.5 & y > 0 & z <= 1",
            "((x > 0 | y > 0) & z < 1) | x = 2",
            "-2*x - 0.5 < y",
        ] {
            let f = parse(text, &o).unwrap();
            let printed = f.to_text();
            let reparsed = parse(&printed, &o).unwrap();
            assert_eq!(f, reparsed, "round-trip failed for `{text}` -> `{printed}`");
            let printed_again = reparsed.to_text();
            assert_eq!(printed, printed_again);
        }
    }

    #[test]
    fn inferred_order_follows_first_occurrence() {
        let (f, o) = parse_with_inferred_order("y > 0 & x < y").unwrap();
        assert_eq!(o.names(), ["y".to_string(), "x".to_string()].as_slice());
        assert_eq!(f.free_vars().len(), 2);
    }
}
