//! Covariate recipes for working models.
//!
//! A recipe is a list of [`Term`]s, each mapping one record to one column.
//! Text syntax: `x`, `x^2`, `a:b`, and the simulation shapes `lin(x)`,
//! `cub(x)`, `exp(x)`, `sin(x)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CombinedSample;
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Nonlinear mean shapes used by the second simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Shape {
    Lin,
    Cub,
    Exp,
    Sin,
}

impl Shape {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Shape::Lin => x,
            Shape::Cub => (x / 3.0).powi(3),
            Shape::Exp => (x / 2.0).exp() / 5.0,
            Shape::Sin => 5.0 * (std::f64::consts::PI * x / 3.0).sin(),
        }
    }

    pub fn all() -> [Shape; 4] {
        [Shape::Lin, Shape::Cub, Shape::Exp, Shape::Sin]
    }

    fn tag(self) -> &'static str {
        match self {
            Shape::Lin => "lin",
            Shape::Cub => "cub",
            Shape::Exp => "exp",
            Shape::Sin => "sin",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag().to_uppercase())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lin" => Ok(Shape::Lin),
            "cub" => Ok(Shape::Cub),
            "exp" => Ok(Shape::Exp),
            "sin" => Ok(Shape::Sin),
            _ => Err(Error::Validation(format!(
                "unknown shape `{s}` (expected LIN, CUB, EXP or SIN)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String),
    Square(String),
    Product(String, String),
    Shaped(Shape, String),
}

impl Term {
    pub fn var(name: &str) -> Self {
        Term::Var(name.to_string())
    }

    fn column(&self, sample: &CombinedSample) -> Result<Vec<f64>> {
        Ok(match self {
            Term::Var(a) => sample.variable(a)?,
            Term::Square(a) => sample.variable(a)?.into_iter().map(|v| v * v).collect(),
            Term::Product(a, b) => {
                let va = sample.variable(a)?;
                let vb = sample.variable(b)?;
                va.iter().zip(&vb).map(|(x, y)| x * y).collect()
            }
            Term::Shaped(s, a) => sample.variable(a)?.into_iter().map(|v| s.eval(v)).collect(),
        })
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(a) => write!(f, "{a}"),
            Term::Square(a) => write!(f, "{a}^2"),
            Term::Product(a, b) => write!(f, "{a}:{b}"),
            Term::Shaped(s, a) => write!(f, "{}({a})", s.tag()),
        }
    }
}

fn ident(s: &str) -> Result<String> {
    let s = s.trim();
    let ok = !s.is_empty()
        && s.chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.');
    if ok {
        Ok(s.to_string())
    } else {
        Err(Error::Validation(format!(
            "bad variable name `{s}` in term"
        )))
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(base) = s.strip_suffix("^2") {
            return Ok(Term::Square(ident(base)?));
        }
        if let Some((a, b)) = s.split_once(':') {
            return Ok(Term::Product(ident(a)?, ident(b)?));
        }
        if let (Some(open), true) = (s.find('('), s.ends_with(')')) {
            let shape: Shape = s[..open].parse()?;
            return Ok(Term::Shaped(shape, ident(&s[open + 1..s.len() - 1])?));
        }
        Ok(Term::Var(ident(s)?))
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a list of term strings.
pub fn parse_terms<S: AsRef<str>>(terms: &[S]) -> Result<Vec<Term>> {
    terms.iter().map(|t| t.as_ref().parse()).collect()
}

/// Design matrix over all pooled records, one column per term, no intercept.
pub fn design(sample: &CombinedSample, terms: &[Term]) -> Result<Matrix> {
    let cols = terms
        .iter()
        .map(|t| t.column(sample))
        .collect::<Result<Vec<_>>>()?;
    if cols.is_empty() {
        return Ok(Matrix::zeros(sample.n_c(), 0));
    }
    Matrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["x", "x^2", "x:d", "exp(x)", "sin(x2)"] {
            let t: Term = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert_eq!(
            "CUB(x)".parse::<Term>().unwrap(),
            Term::Shaped(Shape::Cub, "x".into())
        );
        assert!("foo(x)".parse::<Term>().is_err());
        assert!("".parse::<Term>().is_err());
    }

    #[test]
    fn shapes() {
        assert!((Shape::Sin.eval(1.5) - 5.0).abs() < 1e-12);
        assert_eq!(Shape::Lin.eval(-2.0), -2.0);
        assert!((Shape::Cub.eval(3.0) - 1.0).abs() < 1e-15);
        assert!((Shape::Exp.eval(0.0) - 0.2).abs() < 1e-15);
    }
}
