//! Checked arithmetic expression language used by parameter bindings,
//! conversion models, and impact-model formulas.
//!
//! Grammar:
//!
//! ```text
//! expr       := term (("+"|"-") term)*
//! term       := factor (("*"|"/") factor)*
//! factor     := NUMBER unit-annot? | IDENT | "(" expr ")" | FUNC "(" expr ("," expr)* ")"
//! unit-annot := "[" UNIT-SYMBOL "]"
//! FUNC       := pow | min | max | log | exp
//! ```
//!
//! There are no conditionals and `pow` exponents are restricted to constants,
//! which keeps dimension inference total and decidable. Addition and
//! subtraction require identical operand dimensions; `log`/`exp` require
//! dimensionless arguments. Evaluation happens in coherent base units and
//! the result is expressed in the base unit of the inferred dimension.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::units::{Dimension, Quantity, Unit, UnitError, UnitTable};

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("pow exponent must be a unit-free numeric constant")]
    NonConstantExponent,
    #[error("result is not finite")]
    NonFiniteResult,
    #[error(transparent)]
    Unit(#[from] UnitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Pow,
    Min,
    Max,
    Log,
    Exp,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "pow" => Some(Func::Pow),
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "log" => Some(Func::Log),
            "exp" => Some(Func::Exp),
            _ => None,
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Pow | Func::Min | Func::Max => 2,
            Func::Log | Func::Exp => 1,
        }
    }
}

/// Abstract syntax tree of one expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal { value: f64, unit: Option<String> },
    Param(String),
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Call { func: Func, args: Vec<Expr> },
}

impl Expr {
    /// All parameter names referenced anywhere in the tree.
    pub fn param_refs(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Literal { .. } => {}
            Expr::Param(name) => {
                out.insert(name.clone());
            }
            Expr::Binary { lhs, rhs, .. } => {
                lhs.collect_params(out);
                rhs.collect_params(out);
            }
            Expr::Call { args, .. } => {
                for a in args {
                    a.collect_params(out);
                }
            }
        }
    }

    /// Folds a parameter-free, unit-free subtree to a plain number.
    /// Used for `pow` exponents.
    fn fold_constant(&self) -> Result<f64, ExprError> {
        match self {
            Expr::Literal { value, unit: None } => Ok(*value),
            Expr::Literal { unit: Some(_), .. } | Expr::Param(_) => {
                Err(ExprError::NonConstantExponent)
            }
            Expr::Binary { op, lhs, rhs } => {
                let l = lhs.fold_constant()?;
                let r = rhs.fold_constant()?;
                Ok(match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        l / r
                    }
                })
            }
            Expr::Call { .. } => Err(ExprError::NonConstantExponent),
        }
    }

    /// Infers the dimension of the expression given parameter dimensions.
    pub fn infer_dimension(
        &self,
        param_dims: &BTreeMap<String, Dimension>,
        table: &UnitTable,
    ) -> Result<Dimension, ExprError> {
        match self {
            Expr::Literal { unit: None, .. } => Ok(Dimension::dimensionless()),
            Expr::Literal { unit: Some(symbol), .. } => {
                Ok(table.parse_unit(symbol)?.dimension)
            }
            Expr::Param(name) => param_dims
                .get(name)
                .cloned()
                .ok_or_else(|| ExprError::UnknownParameter(name.clone())),
            Expr::Binary { op, lhs, rhs } => {
                let l = lhs.infer_dimension(param_dims, table)?;
                let r = rhs.infer_dimension(param_dims, table)?;
                match op {
                    BinOp::Add | BinOp::Sub => {
                        if l != r {
                            return Err(UnitError::DimensionMismatch {
                                expected: l.to_string(),
                                found: r.to_string(),
                            }
                            .into());
                        }
                        Ok(l)
                    }
                    BinOp::Mul => Ok(l.mul(&r)),
                    BinOp::Div => Ok(l.div(&r)),
                }
            }
            Expr::Call { func, args } => match func {
                Func::Pow => {
                    let base = args[0].infer_dimension(param_dims, table)?;
                    let exponent = args[1].fold_constant()?;
                    Ok(base.pow_rational(exponent)?)
                }
                Func::Min | Func::Max => {
                    let l = args[0].infer_dimension(param_dims, table)?;
                    let r = args[1].infer_dimension(param_dims, table)?;
                    if l != r {
                        return Err(UnitError::DimensionMismatch {
                            expected: l.to_string(),
                            found: r.to_string(),
                        }
                        .into());
                    }
                    Ok(l)
                }
                Func::Log | Func::Exp => {
                    let d = args[0].infer_dimension(param_dims, table)?;
                    if !d.is_dimensionless() {
                        return Err(UnitError::DimensionMismatch {
                            expected: "1".to_string(),
                            found: d.to_string(),
                        }
                        .into());
                    }
                    Ok(Dimension::dimensionless())
                }
            },
        }
    }

    /// Evaluates in coherent base units; the result carries the base unit of
    /// the inferred dimension. Deterministic.
    pub fn evaluate(
        &self,
        bindings: &BTreeMap<String, Quantity>,
        table: &UnitTable,
    ) -> Result<Quantity, ExprError> {
        let (value, dimension) = self.eval_base(bindings, table)?;
        Quantity::new(value, Unit::base_of(dimension)).map_err(|_| ExprError::NonFiniteResult)
    }

    fn eval_base(
        &self,
        bindings: &BTreeMap<String, Quantity>,
        table: &UnitTable,
    ) -> Result<(f64, Dimension), ExprError> {
        match self {
            Expr::Literal { value, unit: None } => Ok((*value, Dimension::dimensionless())),
            Expr::Literal { value, unit: Some(symbol) } => {
                let unit = table.parse_unit(symbol)?;
                Ok((value * unit.scale, unit.dimension))
            }
            Expr::Param(name) => {
                let q = bindings
                    .get(name)
                    .ok_or_else(|| ExprError::UnknownParameter(name.clone()))?;
                Ok((q.base_value(), q.dimension().clone()))
            }
            Expr::Binary { op, lhs, rhs } => {
                let (lv, ld) = lhs.eval_base(bindings, table)?;
                let (rv, rd) = rhs.eval_base(bindings, table)?;
                match op {
                    BinOp::Add | BinOp::Sub => {
                        if ld != rd {
                            return Err(UnitError::DimensionMismatch {
                                expected: ld.to_string(),
                                found: rd.to_string(),
                            }
                            .into());
                        }
                        let v = if *op == BinOp::Add { lv + rv } else { lv - rv };
                        Ok((v, ld))
                    }
                    BinOp::Mul => Ok((lv * rv, ld.mul(&rd))),
                    BinOp::Div => {
                        if rv == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        Ok((lv / rv, ld.div(&rd)))
                    }
                }
            }
            Expr::Call { func, args } => match func {
                Func::Pow => {
                    let (base, dim) = args[0].eval_base(bindings, table)?;
                    let exponent = args[1].fold_constant()?;
                    Ok((base.powf(exponent), dim.pow_rational(exponent)?))
                }
                Func::Min | Func::Max => {
                    let (lv, ld) = args[0].eval_base(bindings, table)?;
                    let (rv, rd) = args[1].eval_base(bindings, table)?;
                    if ld != rd {
                        return Err(UnitError::DimensionMismatch {
                            expected: ld.to_string(),
                            found: rd.to_string(),
                        }
                        .into());
                    }
                    let v = if *func == Func::Min { lv.min(rv) } else { lv.max(rv) };
                    Ok((v, ld))
                }
                Func::Log | Func::Exp => {
                    let (v, d) = args[0].eval_base(bindings, table)?;
                    if !d.is_dimensionless() {
                        return Err(UnitError::DimensionMismatch {
                            expected: "1".to_string(),
                            found: d.to_string(),
                        }
                        .into());
                    }
                    let out = if *func == Func::Log { v.ln() } else { v.exp() };
                    if !out.is_finite() {
                        return Err(ExprError::NonFiniteResult);
                    }
                    Ok((out, Dimension::dimensionless()))
                }
            },
        }
    }
}

/// Parses an expression per the module grammar. Errors carry the byte
/// offset of the first unexpected input.
pub fn parse_expression(text: &str) -> Result<Expr, ExprError> {
    let mut parser = Parser { text: text.as_bytes(), pos: 0 };
    let expr = parser.parse_expr()?;
    parser.skip_ws();
    if parser.pos != parser.text.len() {
        return Err(parser.err("unexpected trailing input"));
    }
    Ok(expr)
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ExprError {
        ExprError::Syntax { offset: self.pos, message: message.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, byte: u8) -> bool {
        if self.peek() == Some(byte) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.parse_term()?;
        loop {
            self.skip_ws();
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.parse_term()?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
    }

    fn parse_term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.parse_factor()?;
        loop {
            self.skip_ws();
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.parse_factor()?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
    }

    fn parse_factor(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.parse_expr()?;
                self.skip_ws();
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.parse_number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.parse_ident(),
            _ => Err(self.err("expected a number, parameter, function, or '('")),
        }
    }

    fn parse_number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.eat(b'.') {
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if !matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                return Err(self.err("expected exponent digits"));
            }
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        let literal = std::str::from_utf8(&self.text[start..self.pos]).expect("ascii");
        let value: f64 = literal.parse().map_err(|_| ExprError::Syntax {
            offset: start,
            message: format!("invalid number '{literal}'"),
        })?;
        let unit = self.parse_unit_annotation()?;
        Ok(Expr::Literal { value, unit })
    }

    fn parse_unit_annotation(&mut self) -> Result<Option<String>, ExprError> {
        let before = self.pos;
        self.skip_ws();
        if !self.eat(b'[') {
            self.pos = before;
            return Ok(None);
        }
        let start = self.pos;
        while !matches!(self.peek(), Some(b']') | None) {
            self.pos += 1;
        }
        if !self.eat(b']') {
            return Err(self.err("unterminated unit annotation"));
        }
        let symbol = std::str::from_utf8(&self.text[start..self.pos - 1])
            .expect("utf8 slice")
            .trim()
            .to_string();
        if symbol.is_empty() {
            return Err(ExprError::Syntax {
                offset: start,
                message: "empty unit annotation".to_string(),
            });
        }
        Ok(Some(symbol))
    }

    fn parse_ident(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.text[start..self.pos]).expect("ascii");
        let after_ident = self.pos;
        self.skip_ws();
        if self.peek() == Some(b'(') {
            let func = Func::from_name(name).ok_or(ExprError::Syntax {
                offset: start,
                message: format!("unknown function '{name}'"),
            })?;
            self.pos += 1;
            let mut args = vec![self.parse_expr()?];
            loop {
                self.skip_ws();
                if self.eat(b',') {
                    args.push(self.parse_expr()?);
                } else {
                    break;
                }
            }
            if !self.eat(b')') {
                return Err(self.err("expected ')'"));
            }
            if args.len() != func.arity() {
                return Err(ExprError::Syntax {
                    offset: start,
                    message: format!(
                        "{name} takes {} argument(s), got {}",
                        func.arity(),
                        args.len()
                    ),
                });
            }
            return Ok(Expr::Call { func, args });
        }
        self.pos = after_ident;
        if Func::from_name(name).is_some() {
            return Err(ExprError::Syntax {
                offset: start,
                message: format!("'{name}' is a function name, expected '(' after it"),
            });
        }
        Ok(Expr::Param(name.to_string()))
    }
}

/// An expression together with its source text. Manifests round-trip the
/// source verbatim, so canonicalization never rewrites formulas.
#[derive(Debug, Clone)]
pub struct CheckedExpr {
    source: String,
    ast: Expr,
}

impl CheckedExpr {
    pub fn parse(source: &str) -> Result<CheckedExpr, ExprError> {
        let ast = parse_expression(source)?;
        Ok(CheckedExpr { source: source.to_string(), ast })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }
}

impl PartialEq for CheckedExpr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl fmt::Display for CheckedExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Serialize for CheckedExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for CheckedExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let source = String::deserialize(deserializer)?;
        CheckedExpr::parse(&source).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::UnitTable;

    fn table() -> &'static UnitTable {
        UnitTable::builtin()
    }

    fn dims(pairs: &[(&str, Dimension)]) -> BTreeMap<String, Dimension> {
        pairs.iter().map(|(k, d)| (k.to_string(), d.clone())).collect()
    }

    fn binds(pairs: &[(&str, f64, &str)]) -> BTreeMap<String, Quantity> {
        pairs
            .iter()
            .map(|(k, v, u)| (k.to_string(), table().quantity(*v, u).unwrap()))
            .collect()
    }

    #[test]
    fn parses_mul_with_param() {
        let e = parse_expression("2 * area_m2").unwrap();
        assert_eq!(
            e,
            Expr::Binary {
                op: BinOp::Mul,
                lhs: Box::new(Expr::Literal { value: 2.0, unit: None }),
                rhs: Box::new(Expr::Param("area_m2".to_string())),
            }
        );
    }

    #[test]
    fn parses_literal_with_unit_annotation() {
        let e = parse_expression("mass_kg + 3 [kg]").unwrap();
        assert_eq!(
            e,
            Expr::Binary {
                op: BinOp::Add,
                lhs: Box::new(Expr::Param("mass_kg".to_string())),
                rhs: Box::new(Expr::Literal { value: 3.0, unit: Some("kg".to_string()) }),
            }
        );
    }

    #[test]
    fn dangling_operator_reports_offset() {
        match parse_expression("1 +") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn infer_division_combines_exponents() {
        let e = parse_expression("mass_kg / area_m2").unwrap();
        let area = table().parse_unit("m2").unwrap().dimension;
        let d = e
            .infer_dimension(
                &dims(&[("mass_kg", Dimension::base("mass")), ("area_m2", area)]),
                table(),
            )
            .unwrap();
        assert_eq!(d.exponent("mass"), 1);
        assert_eq!(d.exponent("length"), -2);
    }

    #[test]
    fn infer_addition_requires_same_dimension() {
        let e = parse_expression("mass_kg + area_m2").unwrap();
        let area = table().parse_unit("m2").unwrap().dimension;
        let r = e.infer_dimension(
            &dims(&[("mass_kg", Dimension::base("mass")), ("area_m2", area)]),
            table(),
        );
        assert!(matches!(r, Err(ExprError::Unit(UnitError::DimensionMismatch { .. }))));
    }

    #[test]
    fn exp_requires_dimensionless_argument() {
        let e = parse_expression("exp(mass_kg)").unwrap();
        let r = e.infer_dimension(&dims(&[("mass_kg", Dimension::base("mass"))]), table());
        assert!(matches!(r, Err(ExprError::Unit(UnitError::DimensionMismatch { .. }))));
    }

    #[test]
    fn impact_dimensions_never_add() {
        let e = parse_expression("1 [kgCO2e] + 1 [m3we]").unwrap();
        let r = e.infer_dimension(&BTreeMap::new(), table());
        assert!(matches!(r, Err(ExprError::Unit(UnitError::DimensionMismatch { .. }))));
    }

    #[test]
    fn evaluate_scalar_multiple() {
        let e = parse_expression("2 * x").unwrap();
        let q = e.evaluate(&binds(&[("x", 3.0, "kg")]), table()).unwrap();
        assert_eq!(q.value(), 6.0);
        assert_eq!(q.dimension(), &Dimension::base("mass"));
    }

    #[test]
    fn evaluate_self_division_is_dimensionless() {
        let e = parse_expression("x / x").unwrap();
        let q = e.evaluate(&binds(&[("x", 5.0, "m")]), table()).unwrap();
        assert_eq!(q.value(), 1.0);
        assert!(q.dimension().is_dimensionless());
    }

    #[test]
    fn evaluate_pow_squares_value_and_dimension() {
        // Hand evaluation: (2 m)^2 = 4 m^2.
        let e = parse_expression("pow(x, 2)").unwrap();
        let q = e.evaluate(&binds(&[("x", 2.0, "m")]), table()).unwrap();
        assert_eq!(q.value(), 4.0);
        assert_eq!(q.dimension().exponent("length"), 2);
    }

    #[test]
    fn evaluate_division_by_zero() {
        let e = parse_expression("1 / x").unwrap();
        let r = e.evaluate(&binds(&[("x", 0.0, "kg")]), table());
        assert!(matches!(r, Err(ExprError::DivisionByZero)));
    }

    #[test]
    fn evaluate_is_unit_representation_invariant() {
        let e = parse_expression("x * 2 + 1 [kg]").unwrap();
        let in_g = e.evaluate(&binds(&[("x", 1000.0, "g")]), table()).unwrap();
        let in_kg = e.evaluate(&binds(&[("x", 1.0, "kg")]), table()).unwrap();
        let rel = (in_g.base_value() - in_kg.base_value()).abs() / in_kg.base_value().abs();
        assert!(rel < 1e-12);
    }

    #[test]
    fn pow_with_parameter_exponent_is_rejected() {
        let e = parse_expression("pow(x, y)").unwrap();
        let r = e.infer_dimension(
            &dims(&[
                ("x", Dimension::base("mass")),
                ("y", Dimension::dimensionless()),
            ]),
            table(),
        );
        assert!(matches!(r, Err(ExprError::NonConstantExponent)));
    }

    #[test]
    fn checked_expr_round_trips_source() {
        let text = "3.0 [kg/m2] * pcb_area_m2";
        let e = CheckedExpr::parse(text).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, format!("\"{text}\""));
        let back: CheckedExpr = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }
}
