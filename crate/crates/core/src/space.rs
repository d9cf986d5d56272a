//! Configuration spaces, configurations and the operators the optimizers
//! apply to them: sampling, unit-cube encoding and PBT-style perturbation.
//!
//! Continuous values are stored at 12 significant decimal digits. Every
//! constructor in this module ([`ConfigSpace::sample`], [`ConfigSpace::from_unit`],
//! [`ConfigSpace::perturb`]) emits canonical values, which makes
//! `from_unit(to_unit(c)) == c` hold bit-exactly and keeps journal text stable.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate hyperparameter name `{0}`")]
    DuplicateName(String),
    #[error("invalid bounds for `{name}`: {message}")]
    Bounds { name: String, message: String },
    #[error("invalid choices for `{name}`: {message}")]
    Choices { name: String, message: String },
    #[error("a configuration space needs at least one hyperparameter")]
    Empty,
    #[error("configuration does not match space: {0}")]
    Mismatch(String),
    #[error("unit coordinate {index} is {value}, expected a value in [0, 1]")]
    OutOfUnitRange { index: usize, value: f64 },
}

/// The four hyperparameter kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Continuous { lower: f64, upper: f64 },
    LogContinuous { lower: f64, upper: f64 },
    Integer { lower: i64, upper: i64 },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameter {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

impl Hyperparameter {
    pub fn new(name: impl Into<String>, kind: ParamKind) -> Result<Self, SpaceError> {
        let name = name.into();
        let bounds = |message: &str| SpaceError::Bounds {
            name: name.clone(),
            message: message.to_string(),
        };
        match &kind {
            ParamKind::Continuous { lower, upper } => {
                if !lower.is_finite() || !upper.is_finite() {
                    return Err(bounds("bounds must be finite"));
                }
                if lower >= upper {
                    return Err(bounds("lower must be strictly below upper"));
                }
            }
            ParamKind::LogContinuous { lower, upper } => {
                if !lower.is_finite() || !upper.is_finite() {
                    return Err(bounds("bounds must be finite"));
                }
                if *lower <= 0.0 {
                    return Err(bounds("log-scaled lower bound must be positive"));
                }
                if lower >= upper {
                    return Err(bounds("lower must be strictly below upper"));
                }
            }
            ParamKind::Integer { lower, upper } => {
                if lower >= upper {
                    return Err(bounds("lower must be strictly below upper"));
                }
            }
            ParamKind::Categorical { choices } => {
                if choices.len() < 2 {
                    return Err(SpaceError::Choices {
                        name,
                        message: "at least two choices are required".into(),
                    });
                }
                for (i, c) in choices.iter().enumerate() {
                    if c.is_empty() {
                        return Err(SpaceError::Choices {
                            name,
                            message: "empty choice".into(),
                        });
                    }
                    if choices[..i].contains(c) {
                        return Err(SpaceError::Choices {
                            name,
                            message: format!("choice `{c}` appears twice"),
                        });
                    }
                }
            }
        }
        Ok(Self { name, kind })
    }

    pub fn continuous(name: &str, lower: f64, upper: f64) -> Result<Self, SpaceError> {
        Self::new(name, ParamKind::Continuous { lower, upper })
    }

    pub fn log_continuous(name: &str, lower: f64, upper: f64) -> Result<Self, SpaceError> {
        Self::new(name, ParamKind::LogContinuous { lower, upper })
    }

    pub fn integer(name: &str, lower: i64, upper: i64) -> Result<Self, SpaceError> {
        Self::new(name, ParamKind::Integer { lower, upper })
    }

    pub fn categorical<S: AsRef<str>>(name: &str, choices: &[S]) -> Result<Self, SpaceError> {
        Self::new(
            name,
            ParamKind::Categorical {
                choices: choices.iter().map(|c| c.as_ref().to_string()).collect(),
            },
        )
    }

    /// Checks that `value` has the right type for this parameter and lies
    /// within its bounds or choices.
    pub fn check(&self, value: &Value) -> Result<(), SpaceError> {
        let mismatch = |what: String| Err(SpaceError::Mismatch(format!("`{}`: {what}", self.name)));
        match (&self.kind, value) {
            (ParamKind::Continuous { lower, upper }, Value::Float(v))
            | (ParamKind::LogContinuous { lower, upper }, Value::Float(v)) => {
                if v.is_finite() && *v >= *lower && *v <= *upper {
                    Ok(())
                } else {
                    mismatch(format!("{v} outside [{lower}, {upper}]"))
                }
            }
            (ParamKind::Integer { lower, upper }, Value::Int(v)) => {
                if v >= lower && v <= upper {
                    Ok(())
                } else {
                    mismatch(format!("{v} outside [{lower}, {upper}]"))
                }
            }
            (ParamKind::Categorical { choices }, Value::Choice(c)) => {
                if choices.contains(c) {
                    Ok(())
                } else {
                    mismatch(format!("`{c}` is not one of the choices"))
                }
            }
            (_, v) => mismatch(format!("value {v} has the wrong type")),
        }
    }

    /// Parses a value written on the command line and checks it.
    pub fn parse_value(&self, text: &str) -> Result<Value, SpaceError> {
        let text = text.trim();
        let bad = || SpaceError::Mismatch(format!("`{}`: cannot read `{text}`", self.name));
        let value = match &self.kind {
            ParamKind::Continuous { .. } | ParamKind::LogContinuous { .. } => {
                Value::Float(text.parse().map_err(|_| bad())?)
            }
            ParamKind::Integer { .. } => Value::Int(text.parse().map_err(|_| bad())?),
            ParamKind::Categorical { .. } => Value::Choice(text.to_string()),
        };
        self.check(&value)?;
        Ok(value)
    }

    /// Renders the kind in the space-file notation, e.g. `log(1e-6, 0.1)`.
    pub fn kind_spec(&self) -> String {
        match &self.kind {
            ParamKind::Continuous { lower, upper } => format!("({lower:?}, {upper:?})"),
            ParamKind::LogContinuous { lower, upper } => format!("log({lower:?}, {upper:?})"),
            ParamKind::Integer { lower, upper } => format!("int[{lower}, {upper}]"),
            ParamKind::Categorical { choices } => format!("{{{}}}", choices.join(", ")),
        }
    }
}

/// A single hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Float(v) => Some(*v),
            Value::Choice(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Choice(c) => f.write_str(c),
        }
    }
}

/// A point of a [`ConfigSpace`], keyed by hyperparameter name in declaration order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration {
    values: IndexMap<String, Value>,
}

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: Value) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn insert(&mut self, name: &str, value: Value) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }

    pub fn get_f64(&self, name: &str) -> Option<f64> {
        self.values.get(name).and_then(Value::as_f64)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(", "))
    }
}

/// Settings for [`ConfigSpace::perturb`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSettings {
    pub factor_up: f64,
    pub factor_down: f64,
    pub resample_prob: f64,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        Self {
            factor_up: 1.2,
            factor_down: 0.8,
            resample_prob: 0.25,
        }
    }
}

/// Rounds to 12 significant decimal digits.
fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Maps a raw continuous value onto its canonical stored form.
fn canonical(x: f64, lower: f64, upper: f64) -> f64 {
    round_sig(x).clamp(lower, upper)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigSpace {
    params: Vec<Hyperparameter>,
}

impl ConfigSpace {
    pub fn new(params: Vec<Hyperparameter>) -> Result<Self, SpaceError> {
        if params.is_empty() {
            return Err(SpaceError::Empty);
        }
        for (i, p) in params.iter().enumerate() {
            if params[..i].iter().any(|q| q.name == p.name) {
                return Err(SpaceError::DuplicateName(p.name.clone()));
            }
            // Re-run per-parameter validation for values built by hand or deserialized.
            Hyperparameter::new(p.name.clone(), p.kind.clone())?;
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[Hyperparameter] {
        &self.params
    }

    pub fn dimension(&self) -> usize {
        self.params.len()
    }

    pub fn get(&self, name: &str) -> Option<&Hyperparameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    /// Canonical space-file text, one parameter per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            out.push_str(&p.name);
            out.push_str(": ");
            out.push_str(&p.kind_spec());
            out.push('\n');
        }
        out
    }

    pub fn validate(&self, config: &Configuration) -> Result<(), SpaceError> {
        if config.len() != self.params.len() {
            return Err(SpaceError::Mismatch(format!(
                "expected {} values, got {}",
                self.params.len(),
                config.len()
            )));
        }
        for p in &self.params {
            let v = config
                .get(&p.name)
                .ok_or_else(|| SpaceError::Mismatch(format!("missing value for `{}`", p.name)))?;
            p.check(v)?;
        }
        Ok(())
    }

    /// Brings a configuration into the canonical value order and numeric
    /// form. Integer values given as whole floats are accepted.
    pub fn canonicalize(&self, config: &Configuration) -> Result<Configuration, SpaceError> {
        let mut out = Configuration::new();
        for p in &self.params {
            let v = config
                .get(&p.name)
                .ok_or_else(|| SpaceError::Mismatch(format!("missing value for `{}`", p.name)))?;
            let v = match (&p.kind, v) {
                (ParamKind::Continuous { lower, upper }, v)
                | (ParamKind::LogContinuous { lower, upper }, v) => match v.as_f64() {
                    Some(x) if x >= *lower && x <= *upper => Value::Float(canonical(x, *lower, *upper)),
                    _ => v.clone(),
                },
                (ParamKind::Integer { .. }, Value::Float(x)) if x.fract() == 0.0 => Value::Int(*x as i64),
                (_, v) => v.clone(),
            };
            p.check(&v)?;
            out.insert(&p.name, v);
        }
        if out.len() != config.len() {
            return Err(SpaceError::Mismatch("configuration has extra values".into()));
        }
        Ok(out)
    }

    /// Draws one configuration: log kinds uniform in the log domain, integers
    /// uniform over the inclusive range, categoricals uniform over choices.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let mut config = Configuration::new();
        for p in &self.params {
            let value = match &p.kind {
                ParamKind::Continuous { .. } | ParamKind::LogContinuous { .. } => {
                    let u: f64 = rng.random();
                    decode_coordinate(&p.kind, u)
                }
                ParamKind::Integer { lower, upper } => Value::Int(rng.random_range(*lower..=*upper)),
                ParamKind::Categorical { choices } => {
                    Value::Choice(choices[rng.random_range(0..choices.len())].clone())
                }
            };
            config.insert(&p.name, value);
        }
        config
    }

    /// Encodes a configuration into `[0, 1]^d`. Integer and categorical
    /// values map to the centre of their bin.
    pub fn to_unit(&self, config: &Configuration) -> Result<Vec<f64>, SpaceError> {
        self.validate(config)?;
        Ok(self
            .params
            .iter()
            .map(|p| {
                let v = config.get(&p.name).expect("validated");
                match (&p.kind, v) {
                    (ParamKind::Continuous { lower, upper }, Value::Float(x)) => {
                        (x - lower) / (upper - lower)
                    }
                    (ParamKind::LogContinuous { lower, upper }, Value::Float(x)) => {
                        (x.ln() - lower.ln()) / (upper.ln() - lower.ln())
                    }
                    (ParamKind::Integer { lower, upper }, Value::Int(x)) => {
                        ((x - lower) as f64 + 0.5) / ((upper - lower + 1) as f64)
                    }
                    (ParamKind::Categorical { choices }, Value::Choice(c)) => {
                        let i = choices.iter().position(|x| x == c).expect("validated");
                        (i as f64 + 0.5) / choices.len() as f64
                    }
                    _ => unreachable!("validated"),
                }
                .clamp(0.0, 1.0)
            })
            .collect())
    }

    /// Decodes a unit vector. Exact inverse of [`ConfigSpace::to_unit`] on
    /// canonical configurations.
    pub fn from_unit(&self, unit: &[f64]) -> Result<Configuration, SpaceError> {
        if unit.len() != self.params.len() {
            return Err(SpaceError::Mismatch(format!(
                "expected a vector of length {}, got {}",
                self.params.len(),
                unit.len()
            )));
        }
        let mut config = Configuration::new();
        for (index, (p, &u)) in self.params.iter().zip(unit).enumerate() {
            if !(0.0..=1.0).contains(&u) {
                return Err(SpaceError::OutOfUnitRange { index, value: u });
            }
            config.insert(&p.name, decode_coordinate(&p.kind, u));
        }
        Ok(config)
    }

    /// Multiplies every ranged value by `factor_up` or `factor_down` (fair
    /// coin per value) and clips to bounds; resamples each categorical with
    /// probability `resample_prob`.
    pub fn perturb<R: Rng + ?Sized>(
        &self,
        config: &Configuration,
        rng: &mut R,
        settings: &PerturbSettings,
    ) -> Result<Configuration, SpaceError> {
        let mut out = Configuration::new();
        for p in &self.params {
            let v = config
                .get(&p.name)
                .ok_or_else(|| SpaceError::Mismatch(format!("missing value for `{}`", p.name)))?;
            p.check(v)?;
            let value = match &p.kind {
                ParamKind::Categorical { choices } => {
                    if rng.random_bool(settings.resample_prob.clamp(0.0, 1.0)) {
                        Value::Choice(choices[rng.random_range(0..choices.len())].clone())
                    } else {
                        v.clone()
                    }
                }
                _ => {
                    let factor = if rng.random_bool(0.5) {
                        settings.factor_up
                    } else {
                        settings.factor_down
                    };
                    scale_value(&p.kind, v, factor)
                }
            };
            out.insert(&p.name, value);
        }
        Ok(out)
    }
}

/// Multiplies a ranged value by `factor` and clips it back into bounds.
/// Integers round half away from zero and move by at least one step
/// whenever `factor != 1`.
pub fn scale_value(kind: &ParamKind, value: &Value, factor: f64) -> Value {
    match (kind, value) {
        (ParamKind::Continuous { lower, upper }, Value::Float(x))
        | (ParamKind::LogContinuous { lower, upper }, Value::Float(x)) => {
            Value::Float(canonical(x * factor, *lower, *upper))
        }
        (ParamKind::Integer { lower, upper }, Value::Int(x)) => {
            let raw = *x as f64 * factor;
            let mut next = raw.round() as i64;
            if factor != 1.0 && next == *x {
                let up = raw > *x as f64 || (raw == *x as f64 && factor > 1.0);
                next = if up { x + 1 } else { x - 1 };
            }
            Value::Int(next.clamp(*lower, *upper))
        }
        _ => value.clone(),
    }
}

fn decode_coordinate(kind: &ParamKind, u: f64) -> Value {
    match kind {
        ParamKind::Continuous { lower, upper } => {
            if u <= 0.0 {
                Value::Float(*lower)
            } else if u >= 1.0 {
                Value::Float(*upper)
            } else {
                Value::Float(canonical(lower + u * (upper - lower), *lower, *upper))
            }
        }
        ParamKind::LogContinuous { lower, upper } => {
            if u <= 0.0 {
                Value::Float(*lower)
            } else if u >= 1.0 {
                Value::Float(*upper)
            } else {
                let x = (lower.ln() + u * (upper.ln() - lower.ln())).exp();
                Value::Float(canonical(x, *lower, *upper))
            }
        }
        ParamKind::Integer { lower, upper } => {
            let n = upper - lower + 1;
            let bin = ((u * n as f64).floor() as i64).clamp(0, n - 1);
            Value::Int(lower + bin)
        }
        ParamKind::Categorical { choices } => {
            let k = choices.len();
            let bin = ((u * k as f64).floor() as usize).min(k - 1);
            Value::Choice(choices[bin].clone())
        }
    }
}

// ---------------------------------------------------------------------------
// Space-file parsing
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
    /// Byte offset of `text` within the original line, for column reporting.
    base: usize,
}

impl<'a> Cursor<'a> {
    fn error(&self, message: impl Into<String>) -> SpaceError {
        SpaceError::Syntax {
            line: self.line,
            column: self.base + self.pos + 1,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), SpaceError> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{token}`")))
        }
    }

    /// Reads up to (not including) any of `stops`, trimmed.
    fn take_until(&mut self, stops: &[char]) -> (usize, &'a str) {
        self.skip_ws();
        let start = self.pos;
        let rest = self.rest();
        let len = rest.find(|c| stops.contains(&c)).unwrap_or(rest.len());
        self.pos += len;
        (start, rest[..len].trim_end())
    }

    fn number<T: FromStr>(&mut self, stops: &[char]) -> Result<T, SpaceError> {
        let (start, token) = self.take_until(stops);
        token.parse().map_err(|_| SpaceError::Syntax {
            line: self.line,
            column: self.base + start + 1,
            message: format!("`{token}` is not a valid number"),
        })
    }

    fn finish(&mut self) -> Result<(), SpaceError> {
        self.skip_ws();
        if self.rest().is_empty() {
            Ok(())
        } else {
            Err(self.error("unexpected trailing characters"))
        }
    }
}

fn parse_kind(cur: &mut Cursor<'_>) -> Result<ParamKind, SpaceError> {
    // Accept the long-hand table notation as aliases: `interval(..)`,
    // `log(interval(..))` and `range[..]`.
    if cur.eat("log(") {
        let nested = cur.eat("interval(") || cur.eat("(");
        let lower = cur.number(&[','])?;
        cur.expect(",")?;
        let upper = cur.number(&[')'])?;
        cur.expect(")")?;
        if nested {
            cur.expect(")")?;
        }
        return Ok(ParamKind::LogContinuous { lower, upper });
    }
    if cur.eat("int[") || cur.eat("range[") {
        let lower = cur.number(&[','])?;
        cur.expect(",")?;
        let upper = cur.number(&[']'])?;
        cur.expect("]")?;
        return Ok(ParamKind::Integer { lower, upper });
    }
    if cur.eat("interval(") || cur.eat("(") {
        let lower = cur.number(&[','])?;
        cur.expect(",")?;
        let upper = cur.number(&[')'])?;
        cur.expect(")")?;
        return Ok(ParamKind::Continuous { lower, upper });
    }
    if cur.eat("{") {
        let mut choices = Vec::new();
        loop {
            let (start, token) = cur.take_until(&[',', '}']);
            if token.is_empty() {
                return Err(SpaceError::Syntax {
                    line: cur.line,
                    column: cur.base + start + 1,
                    message: "empty categorical choice".into(),
                });
            }
            choices.push(token.to_string());
            if cur.eat("}") {
                break;
            }
            cur.expect(",")?;
        }
        return Ok(ParamKind::Categorical { choices });
    }
    cur.skip_ws();
    Err(cur.error("expected one of `(`, `log(`, `int[` or `{`"))
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl FromStr for ConfigSpace {
    type Err = SpaceError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut params = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let colon = content.find(':').ok_or(SpaceError::Syntax {
                line,
                column: 1,
                message: "expected `name: kind`".into(),
            })?;
            let name = content[..colon].trim();
            if !is_identifier(name) {
                let column = content.len() - content.trim_start().len() + 1;
                return Err(SpaceError::Syntax {
                    line,
                    column,
                    message: format!("`{name}` is not a valid hyperparameter name"),
                });
            }
            let mut cur = Cursor {
                text: &content[colon + 1..],
                pos: 0,
                line,
                base: colon + 1,
            };
            let kind = parse_kind(&mut cur)?;
            cur.finish()?;
            if params.iter().any(|p: &Hyperparameter| p.name == name) {
                return Err(SpaceError::DuplicateName(name.to_string()));
            }
            params.push(Hyperparameter::new(name, kind)?);
        }
        ConfigSpace::new(params)
    }
}

impl fmt::Display for ConfigSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
