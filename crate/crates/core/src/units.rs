//! Dimensional unit system: open-ended base dimensions, scaled units loaded
//! from a data file, and checked quantities.
//!
//! Base dimensions are not hardcoded beyond convention (mass, length, time,
//! current, temperature, amount); a unit table may declare any synthetic
//! dimension, e.g. `bit`, `flop`, or `impact:GWP`. Impact-category dimensions
//! are ordinary dimensions and therefore never mix in addition.
//!
//! No affine units: temperature is kelvin only, so every unit is a pure
//! scale factor to the coherent base unit of its dimension.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UnitError {
    #[error("unknown unit symbol '{0}'")]
    UnknownUnit(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("value is not finite")]
    NonFiniteValue,
    #[error("exponent {exponent} does not yield integer dimension exponents")]
    FractionalDimension { exponent: f64 },
    #[error("invalid unit table: {0}")]
    InvalidTable(String),
}

/// Product of integer powers of base dimensions. Absent key means exponent 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dimension(BTreeMap<String, i64>);

impl Dimension {
    pub fn dimensionless() -> Self {
        Dimension(BTreeMap::new())
    }

    pub fn base(name: &str) -> Self {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), 1);
        Dimension(m)
    }

    pub fn from_exponents(exps: BTreeMap<String, i64>) -> Self {
        Dimension(exps.into_iter().filter(|(_, e)| *e != 0).collect())
    }

    pub fn is_dimensionless(&self) -> bool {
        self.0.is_empty()
    }

    pub fn exponent(&self, name: &str) -> i64 {
        self.0.get(name).copied().unwrap_or(0)
    }

    pub fn exponents(&self) -> &BTreeMap<String, i64> {
        &self.0
    }

    pub fn mul(&self, other: &Dimension) -> Dimension {
        let mut out = self.0.clone();
        for (k, e) in &other.0 {
            let v = out.entry(k.clone()).or_insert(0);
            *v += e;
            if *v == 0 {
                out.remove(k);
            }
        }
        Dimension(out)
    }

    pub fn div(&self, other: &Dimension) -> Dimension {
        self.mul(&other.inverse())
    }

    pub fn inverse(&self) -> Dimension {
        Dimension(self.0.iter().map(|(k, e)| (k.clone(), -e)).collect())
    }

    /// Raises to a rational power. Every scaled exponent must land on an
    /// integer (within 1e-9), otherwise the dimension would be fractional.
    pub fn pow_rational(&self, exponent: f64) -> Result<Dimension, UnitError> {
        let mut out = BTreeMap::new();
        for (k, e) in &self.0 {
            let scaled = *e as f64 * exponent;
            let rounded = scaled.round();
            if (scaled - rounded).abs() > 1e-9 {
                return Err(UnitError::FractionalDimension { exponent });
            }
            if rounded != 0.0 {
                out.insert(k.clone(), rounded as i64);
            }
        }
        Ok(Dimension(out))
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(k, e)| {
                if *e == 1 {
                    k.clone()
                } else {
                    format!("{k}^{e}")
                }
            })
            .collect();
        write!(f, "{}", parts.join("·"))
    }
}

/// A named unit: a positive scale factor to the coherent base unit of its
/// dimension (e.g. `kWh` has scale 3.6e6 relative to the joule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub symbol: String,
    pub dimension: Dimension,
    pub scale: f64,
}

impl Unit {
    /// The synthesized coherent base unit of a dimension (scale 1). Its
    /// symbol is the dimension form itself, e.g. `mass·length^-2`.
    pub fn base_of(dimension: Dimension) -> Unit {
        Unit {
            symbol: dimension.to_string(),
            dimension,
            scale: 1.0,
        }
    }

    pub fn dimensionless() -> Unit {
        Unit::base_of(Dimension::dimensionless())
    }
}

/// A finite real value carried in a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    value: f64,
    unit: Unit,
}

impl Quantity {
    pub fn new(value: f64, unit: Unit) -> Result<Quantity, UnitError> {
        if !value.is_finite() {
            return Err(UnitError::NonFiniteValue);
        }
        Ok(Quantity { value, unit })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn unit(&self) -> &Unit {
        &self.unit
    }

    pub fn dimension(&self) -> &Dimension {
        &self.unit.dimension
    }

    /// Value expressed in the coherent base unit of its dimension.
    pub fn base_value(&self) -> f64 {
        self.value * self.unit.scale
    }

    /// Rescales into `target`, which must share the dimension.
    pub fn convert(&self, target: &Unit) -> Result<Quantity, UnitError> {
        if self.unit.dimension != target.dimension {
            return Err(UnitError::DimensionMismatch {
                expected: target.dimension.to_string(),
                found: self.unit.dimension.to_string(),
            });
        }
        Quantity::new(self.value * self.unit.scale / target.scale, target.clone())
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.value, self.unit.symbol)
    }
}

/// Registry of declared dimensions and unit symbols, loaded from a JSON
/// data file: `{"dimensions": [...], "units": [{"symbol","dimension","scale"}]}`.
#[derive(Debug, Clone)]
pub struct UnitTable {
    dimensions: BTreeSet<String>,
    units: BTreeMap<String, Unit>,
}

#[derive(Deserialize)]
struct UnitTableFile {
    dimensions: Vec<String>,
    units: Vec<UnitEntry>,
}

#[derive(Deserialize)]
struct UnitEntry {
    symbol: String,
    dimension: BTreeMap<String, i64>,
    scale: f64,
}

impl UnitTable {
    pub fn from_json_str(text: &str) -> Result<UnitTable, UnitError> {
        let file: UnitTableFile =
            serde_json::from_str(text).map_err(|e| UnitError::InvalidTable(e.to_string()))?;
        let dimensions: BTreeSet<String> = file.dimensions.into_iter().collect();
        let mut units = BTreeMap::new();
        for entry in file.units {
            if entry.scale <= 0.0 || !entry.scale.is_finite() {
                return Err(UnitError::InvalidTable(format!(
                    "unit '{}' has non-positive scale",
                    entry.symbol
                )));
            }
            for dim in entry.dimension.keys() {
                if !dimensions.contains(dim) {
                    return Err(UnitError::InvalidTable(format!(
                        "unit '{}' references undeclared dimension '{}'",
                        entry.symbol, dim
                    )));
                }
            }
            let unit = Unit {
                symbol: entry.symbol.clone(),
                dimension: Dimension::from_exponents(entry.dimension),
                scale: entry.scale,
            };
            if units.insert(entry.symbol.clone(), unit).is_some() {
                return Err(UnitError::InvalidTable(format!(
                    "duplicate unit symbol '{}'",
                    entry.symbol
                )));
            }
        }
        Ok(UnitTable { dimensions, units })
    }

    pub fn load(path: &std::path::Path) -> Result<UnitTable, UnitError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UnitError::InvalidTable(format!("{}: {e}", path.display())))?;
        UnitTable::from_json_str(&text)
    }

    /// The table shipped with the crate, covering SI plus the synthetic
    /// dimensions used by ICT models (items, bits, flops, impact categories).
    pub fn builtin() -> &'static UnitTable {
        static TABLE: OnceLock<UnitTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            UnitTable::from_json_str(include_str!("../data/units.json"))
                .expect("builtin unit table is valid")
        })
    }

    pub fn has_dimension(&self, name: &str) -> bool {
        self.dimensions.contains(name)
    }

    /// Looks up a unit symbol. Compound symbols may combine table entries
    /// with `*` and `/`, e.g. `kg/m2` or `kgCO2e/kWh`.
    pub fn parse_unit(&self, symbol: &str) -> Result<Unit, UnitError> {
        let symbol = symbol.trim();
        if symbol.is_empty() {
            return Err(UnitError::UnknownUnit(String::new()));
        }
        let mut dimension = Dimension::dimensionless();
        let mut scale = 1.0f64;
        let mut rest = symbol;
        let mut divide = false;
        loop {
            let split = rest.find(['*', '/']);
            let (atom, next) = match split {
                Some(i) => (&rest[..i], Some((rest.as_bytes()[i], &rest[i + 1..]))),
                None => (rest, None),
            };
            let atom = atom.trim();
            let unit = self
                .units
                .get(atom)
                .ok_or_else(|| UnitError::UnknownUnit(symbol.to_string()))?;
            if divide {
                dimension = dimension.div(&unit.dimension);
                scale /= unit.scale;
            } else {
                dimension = dimension.mul(&unit.dimension);
                scale *= unit.scale;
            }
            match next {
                Some((op, tail)) => {
                    divide = op == b'/';
                    rest = tail;
                }
                None => break,
            }
        }
        Ok(Unit {
            symbol: symbol.to_string(),
            dimension,
            scale,
        })
    }

    pub fn quantity(&self, value: f64, symbol: &str) -> Result<Quantity, UnitError> {
        Quantity::new(value, self.parse_unit(symbol)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> &'static UnitTable {
        UnitTable::builtin()
    }

    #[test]
    fn parse_base_unit() {
        let kg = table().parse_unit("kg").unwrap();
        assert_eq!(kg.dimension, Dimension::base("mass"));
        assert_eq!(kg.scale, 1.0);
    }

    #[test]
    fn parse_kwh_exact_si_definition() {
        let kwh = table().parse_unit("kWh").unwrap();
        let mut exps = BTreeMap::new();
        exps.insert("mass".to_string(), 1);
        exps.insert("length".to_string(), 2);
        exps.insert("time".to_string(), -2);
        assert_eq!(kwh.dimension, Dimension::from_exponents(exps));
        assert_eq!(kwh.scale, 3.6e6);
    }

    #[test]
    fn unknown_symbol_is_an_error() {
        assert!(matches!(
            table().parse_unit("parsec-per-fortnight"),
            Err(UnitError::UnknownUnit(_))
        ));
    }

    #[test]
    fn compound_symbols_combine() {
        let u = table().parse_unit("kg/m2").unwrap();
        assert_eq!(u.dimension.exponent("mass"), 1);
        assert_eq!(u.dimension.exponent("length"), -2);
        assert_eq!(u.scale, 1.0);
    }

    #[test]
    fn litre_converts_to_cubic_metre() {
        let q = table().quantity(1.0, "L").unwrap();
        let m3 = table().parse_unit("m3").unwrap();
        let converted = q.convert(&m3).unwrap();
        assert_eq!(converted.value(), 0.001);
    }

    #[test]
    fn kwh_converts_to_joule() {
        let q = table().quantity(1.0, "kWh").unwrap();
        let j = table().parse_unit("J").unwrap();
        assert_eq!(q.convert(&j).unwrap().value(), 3.6e6);
    }

    #[test]
    fn litre_to_kilogram_is_refused() {
        let q = table().quantity(1.0, "L").unwrap();
        let kg = table().parse_unit("kg").unwrap();
        assert!(matches!(
            q.convert(&kg),
            Err(UnitError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_values_rejected() {
        let kg = table().parse_unit("kg").unwrap();
        assert!(Quantity::new(f64::NAN, kg.clone()).is_err());
        assert!(Quantity::new(f64::INFINITY, kg).is_err());
    }

    #[test]
    fn impact_dimensions_are_distinct() {
        let gwp = table().parse_unit("kgCO2e").unwrap();
        let water = table().parse_unit("m3we").unwrap();
        assert_ne!(gwp.dimension, water.dimension);
    }

    #[test]
    fn dimension_pow_requires_integrality() {
        let area = Dimension::base("length").mul(&Dimension::base("length"));
        assert_eq!(
            area.pow_rational(0.5).unwrap(),
            Dimension::base("length")
        );
        assert!(Dimension::base("length").pow_rational(0.5).is_err());
    }
}
