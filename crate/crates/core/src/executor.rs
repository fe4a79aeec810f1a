//! Program evaluation with NULL semantics, plus the NLI decision table.
//!
//! Every failure (unbound token, wrong arity, division by zero, unparseable
//! date span, non-finite arithmetic) collapses to [`Value::Null`]. The
//! [`NullReason`] attached by [`Executor::run`] is diagnostic only.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::program::{parse, CmpOp, Function, FunctionId, Program};
use crate::tagger::Environment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Number(f64),
    Boolean(bool),
    Null,
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    /// JSON form: number, boolean or null.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Number(v) => serde_json::Number::from_f64(*v)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Boolean(b) => serde_json::Value::Bool(*b),
            Value::Null => serde_json::Value::Null,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => f.write_str(&render_number(*v)),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::Null => f.write_str("NULL"),
        }
    }
}

/// Answer rendering: `42`, `40.75`.
pub fn render_number(v: f64) -> String {
    crate::program::format_number(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullReason {
    NoProgram,
    ParseError,
    UnknownFunction,
    UnboundToken,
    ArityMismatch,
    BadArgKind,
    IllegalComparison,
    DivisionByZero,
    DateParse,
    NonFinite,
}

impl NullReason {
    pub fn as_str(self) -> &'static str {
        match self {
            NullReason::NoProgram => "no_program",
            NullReason::ParseError => "parse_error",
            NullReason::UnknownFunction => "unknown_function",
            NullReason::UnboundToken => "unbound_token",
            NullReason::ArityMismatch => "arity_mismatch",
            NullReason::BadArgKind => "bad_arg_kind",
            NullReason::IllegalComparison => "illegal_comparison",
            NullReason::DivisionByZero => "division_by_zero",
            NullReason::DateParse => "date_parse",
            NullReason::NonFinite => "non_finite",
        }
    }
}

impl fmt::Display for NullReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Value plus the reason when it is `Null`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub value: Value,
    pub null_reason: Option<NullReason>,
}

impl Outcome {
    fn ok(value: Value) -> Self {
        Outcome {
            value,
            null_reason: None,
        }
    }

    pub fn null(reason: NullReason) -> Self {
        Outcome {
            value: Value::Null,
            null_reason: Some(reason),
        }
    }
}

/// Equality tolerance for `=` / `!=`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs: 1e-6,
            rel: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn equal(&self, x: f64, y: f64) -> bool {
        (x - y).abs() <= self.abs.max(self.rel * x.abs().max(y.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DateField {
    Year,
    Month,
    Day,
    Hour,
    Minute,
    Second,
}

impl DateField {
    fn from_function(id: FunctionId) -> Option<Self> {
        Some(match id {
            FunctionId::Year => DateField::Year,
            FunctionId::Month => DateField::Month,
            FunctionId::Day => DateField::Day,
            FunctionId::Hour => DateField::Hour,
            FunctionId::Minute => DateField::Minute,
            FunctionId::Second => DateField::Second,
            _ => return None,
        })
    }
}

type Eval = Result<f64, NullReason>;

#[derive(Debug, Clone, Copy, Default)]
pub struct Executor {
    pub tolerance: Tolerance,
}

impl Executor {
    pub fn new(tolerance: Tolerance) -> Self {
        Executor { tolerance }
    }

    pub fn evaluate(&self, program: &Program, env: &Environment) -> Value {
        self.run(program, env).value
    }

    /// Evaluates and keeps the diagnostic reason for `Null` results.
    pub fn run(&self, program: &Program, env: &Environment) -> Outcome {
        match program {
            Program::Comparison { op, lhs, rhs } => {
                let l = match self.number(lhs, env) {
                    Ok(v) => v,
                    Err(r) => return Outcome::null(r),
                };
                let r = match self.number(rhs, env) {
                    Ok(v) => v,
                    Err(r) => return Outcome::null(r),
                };
                let eq = self.tolerance.equal(l, r);
                Outcome::ok(Value::Boolean(match op {
                    CmpOp::Eq => eq,
                    CmpOp::Neq => !eq,
                }))
            }
            other => match self.number(other, env) {
                Ok(v) => Outcome::ok(Value::Number(v)),
                Err(r) => Outcome::null(r),
            },
        }
    }

    /// Parses then runs; parse failures are `Null` with `ParseError`.
    pub fn run_text(&self, text: &str, env: &Environment) -> Outcome {
        match parse(text) {
            Ok(p) => self.run(&p, env),
            Err(_) => Outcome::null(NullReason::ParseError),
        }
    }

    fn number(&self, node: &Program, env: &Environment) -> Eval {
        let v = match node {
            Program::NumberLit(v) => *v,
            Program::TokenRef(t) => *env.get(t).ok_or(NullReason::UnboundToken)?,
            Program::StringLit(_) => return Err(NullReason::BadArgKind),
            Program::Comparison { .. } => return Err(NullReason::IllegalComparison),
            Program::Call { function, args } => match function {
                Function::Unknown(_) => return Err(NullReason::UnknownFunction),
                Function::Known(id) => self.call(*id, args, env)?,
            },
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NullReason::NonFinite)
        }
    }

    fn call(&self, id: FunctionId, args: &[Program], env: &Environment) -> Eval {
        if !id.arity().accepts(args.len()) {
            return Err(NullReason::ArityMismatch);
        }
        if let Some(field) = DateField::from_function(id) {
            return match &args[0] {
                Program::StringLit(span) => {
                    parse_date_span(span, field).as_number().ok_or(NullReason::DateParse)
                }
                _ => Err(NullReason::BadArgKind),
            };
        }
        if id == FunctionId::Count {
            // Terms are counted, not summed; each must still resolve.
            for a in args {
                if !matches!(a, Program::StringLit(_)) {
                    self.number(a, env)?;
                }
            }
            return Ok(args.len() as f64);
        }
        let xs = args
            .iter()
            .map(|a| self.number(a, env))
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(match id {
            FunctionId::Add => xs.iter().sum(),
            FunctionId::Diff => xs[0] - xs[1],
            FunctionId::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            FunctionId::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
            FunctionId::Mul => xs[0] * xs[1],
            FunctionId::Div => {
                if xs[1] == 0.0 {
                    return Err(NullReason::DivisionByZero);
                }
                xs[0] / xs[1]
            }
            FunctionId::Avg => xs.iter().sum::<f64>() / xs.len() as f64,
            _ => unreachable!("handled above"),
        })
    }

    pub fn exec_nli(&self, pair: &NliProgramPair, env: &Environment) -> NliLabel {
        nli_decide(
            self.evaluate(&pair.e_program, env),
            self.evaluate(&pair.c_program, env),
        )
    }
}

/// Evaluates with the default tolerance.
pub fn evaluate(program: &Program, env: &Environment) -> Value {
    Executor::default().evaluate(program, env)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NliProgramPair {
    pub e_program: Program,
    pub c_program: Program,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
    Invalid,
}

impl NliLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Contradiction => "contradiction",
            NliLabel::Neutral => "neutral",
            NliLabel::Invalid => "invalid",
        }
    }

    pub fn from_str_ci(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "entailment" => Some(NliLabel::Entailment),
            "contradiction" => Some(NliLabel::Contradiction),
            "neutral" => Some(NliLabel::Neutral),
            "invalid" => Some(NliLabel::Invalid),
            _ => None,
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps the truth values of the entailment and contradiction programs to a
/// label. Anything that is not a boolean makes the pair `Invalid`.
pub fn nli_decide(e: Value, c: Value) -> NliLabel {
    match (e, c) {
        (Value::Boolean(true), Value::Boolean(true)) => NliLabel::Invalid,
        (Value::Boolean(true), Value::Boolean(false)) => NliLabel::Entailment,
        (Value::Boolean(false), Value::Boolean(true)) => NliLabel::Contradiction,
        (Value::Boolean(false), Value::Boolean(false)) => NliLabel::Neutral,
        _ => NliLabel::Invalid,
    }
}

pub fn exec_nli(pair: &NliProgramPair, env: &Environment) -> NliLabel {
    Executor::default().exec_nli(pair, env)
}

// ---------------------------------------------------------------------------
// Date spans

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

fn month_number(name: &str) -> Option<u32> {
    let lower = name.to_lowercase();
    let lower = lower.trim_end_matches('.');
    MONTHS
        .iter()
        .position(|m| *m == lower || (lower.len() >= 3 && m.starts_with(lower) && lower.len() <= m.len()))
        .map(|i| i as u32 + 1)
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
struct DateParts {
    year: Option<u32>,
    month: Option<u32>,
    day: Option<u32>,
    hour: Option<u32>,
    minute: Option<u32>,
    second: Option<u32>,
}

fn date_patterns() -> &'static [Regex; 5] {
    static RE: OnceLock<[Regex; 5]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            // 1942
            Regex::new(r"^([0-9]{4})$").unwrap(),
            // January 3, 1997 / January 3rd 1997 / January 1997
            Regex::new(r"^([A-Za-z]+\.?)\s+(?:([0-9]{1,2})(?:st|nd|rd|th)?,?\s+)?([0-9]{4})$").unwrap(),
            // 3 January 1997
            Regex::new(r"^([0-9]{1,2})(?:st|nd|rd|th)?\s+([A-Za-z]+\.?),?\s+([0-9]{4})$").unwrap(),
            // 01/03/1997
            Regex::new(r"^([0-9]{1,2})/([0-9]{1,2})/([0-9]{4})$").unwrap(),
            // 14:05 / 14:05:09
            Regex::new(r"^([0-9]{1,2}):([0-9]{2})(?::([0-9]{2}))?$").unwrap(),
        ]
    })
}

fn parse_parts(span: &str) -> Option<DateParts> {
    let s = span.trim();
    let [bare_year, month_first, day_first, numeric, clock] = date_patterns();
    let num = |m: Option<regex::Match>| m.and_then(|m| m.as_str().parse::<u32>().ok());

    let parts = if let Some(c) = bare_year.captures(s) {
        DateParts {
            year: num(c.get(1)),
            ..Default::default()
        }
    } else if let Some(c) = month_first.captures(s) {
        DateParts {
            month: Some(month_number(&c[1])?),
            day: num(c.get(2)),
            year: num(c.get(3)),
            ..Default::default()
        }
    } else if let Some(c) = day_first.captures(s) {
        DateParts {
            day: num(c.get(1)),
            month: Some(month_number(&c[2])?),
            year: num(c.get(3)),
            ..Default::default()
        }
    } else if let Some(c) = numeric.captures(s) {
        DateParts {
            month: num(c.get(1)),
            day: num(c.get(2)),
            year: num(c.get(3)),
            ..Default::default()
        }
    } else if let Some(c) = clock.captures(s) {
        DateParts {
            hour: num(c.get(1)),
            minute: num(c.get(2)),
            second: num(c.get(3)),
            ..Default::default()
        }
    } else {
        return None;
    };

    let in_range = |v: Option<u32>, lo: u32, hi: u32| v.is_none_or(|v| (lo..=hi).contains(&v));
    let ok = in_range(parts.month, 1, 12)
        && in_range(parts.day, 1, 31)
        && in_range(parts.hour, 0, 23)
        && in_range(parts.minute, 0, 59)
        && in_range(parts.second, 0, 59);
    ok.then_some(parts)
}

/// Extracts one field from a date or time span.
///
/// Supported forms: `1942`, `January 3, 1997`, `3 January 1997`,
/// `01/03/1997` (month first) and `HH:MM[:SS]`. A field missing from the
/// recognised form, or an unrecognised span, yields `Null`.
pub fn parse_date_span(span: &str, field: DateField) -> Value {
    let Some(parts) = parse_parts(span) else {
        return Value::Null;
    };
    let v = match field {
        DateField::Year => parts.year,
        DateField::Month => parts.month,
        DateField::Day => parts.day,
        DateField::Hour => parts.hour,
        DateField::Minute => parts.minute,
        DateField::Second => parts.second,
    };
    v.map(|v| Value::Number(v as f64)).unwrap_or(Value::Null)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, f64)]) -> Environment {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn eval(text: &str, pairs: &[(&str, f64)]) -> Value {
        evaluate(&parse(text).unwrap(), &env(pairs))
    }

    #[test]
    fn basic_functions() {
        assert_eq!(eval("diff(N1,N1)", &[("N1", 7.0)]), Value::Number(0.0));
        assert_eq!(eval("max(N1,N2,N3)", &[("N1", 3.0), ("N2", 9.0), ("N3", -1.0)]), Value::Number(9.0));
        assert_eq!(eval("min(N1,N2,N3)", &[("N1", 3.0), ("N2", 9.0), ("N3", -1.0)]), Value::Number(-1.0));
        assert_eq!(eval("mul(N1,2.5)", &[("N1", 4.0)]), Value::Number(10.0));
        assert_eq!(eval("div(N1,N2)", &[("N1", 9.0), ("N2", 4.0)]), Value::Number(2.25));
    }

    #[test]
    fn null_paths() {
        let out = Executor::default().run(&parse("div(N1,N2)").unwrap(), &env(&[("N1", 5.0), ("N2", 0.0)]));
        assert_eq!(out, Outcome::null(NullReason::DivisionByZero));
        let out = Executor::default().run(&parse("add(N1,N2)").unwrap(), &env(&[("N1", 5.0)]));
        assert_eq!(out.null_reason, Some(NullReason::UnboundToken));
        assert_eq!(eval("diff(N1)", &[("N1", 1.0)]), Value::Null);
        assert_eq!(eval("sqrt(N1)", &[("N1", 1.0)]), Value::Null);
        assert_eq!(eval("add(\"x\",N1)", &[("N1", 1.0)]), Value::Null);
        assert_eq!(eval("year(N1)", &[("N1", 1.0)]), Value::Null);
        assert_eq!(eval("count(N9)", &[]), Value::Null);
        assert_eq!(
            Executor::default().run_text("add(N1", &env(&[])).null_reason,
            Some(NullReason::ParseError)
        );
    }

    #[test]
    fn non_finite_collapses_to_null() {
        let big = 1e308;
        let out = Executor::default().run(&parse("mul(N1,N2)").unwrap(), &env(&[("N1", big), ("N2", big)]));
        assert_eq!(out.null_reason, Some(NullReason::NonFinite));
    }

    #[test]
    fn comparisons_use_tolerance() {
        assert_eq!(eval("add(N1,N2)=N3", &[("N1", 0.1), ("N2", 0.2), ("N3", 0.3)]), Value::Boolean(true));
        assert_eq!(eval("add(N1,N2)!=N3", &[("N1", 0.1), ("N2", 0.2), ("N3", 0.3)]), Value::Boolean(false));
        assert_eq!(eval("N1=N2", &[("N1", 1.0), ("N2", 1.01)]), Value::Boolean(false));
        assert_eq!(eval("N1=N2", &[("N1", 1.0)]), Value::Null);
        let strict = Executor::new(Tolerance { abs: 0.0, rel: 0.0 });
        assert_eq!(
            strict.evaluate(&parse("add(N1,N2)=N3").unwrap(), &env(&[("N1", 0.1), ("N2", 0.2), ("N3", 0.3)])),
            Value::Boolean(false)
        );
    }

    #[test]
    fn date_spans() {
        assert_eq!(parse_date_span("1942", DateField::Year), Value::Number(1942.0));
        assert_eq!(parse_date_span("January 3, 1997", DateField::Month), Value::Number(1.0));
        assert_eq!(parse_date_span("January 3, 1997", DateField::Day), Value::Number(3.0));
        assert_eq!(parse_date_span("January 3, 1997", DateField::Year), Value::Number(1997.0));
        assert_eq!(parse_date_span("3 Jan. 1997", DateField::Month), Value::Number(1.0));
        assert_eq!(parse_date_span("12th March 2001", DateField::Day), Value::Number(12.0));
        assert_eq!(parse_date_span("01/03/1997", DateField::Day), Value::Number(3.0));
        assert_eq!(parse_date_span("14:05:09", DateField::Second), Value::Number(9.0));
        assert_eq!(parse_date_span("14:05", DateField::Minute), Value::Number(5.0));
        assert_eq!(parse_date_span("14:05", DateField::Second), Value::Null);
        assert_eq!(parse_date_span("not a date", DateField::Day), Value::Null);
        assert_eq!(parse_date_span("Smarch 3, 1997", DateField::Month), Value::Null);
        assert_eq!(parse_date_span("13/40/1997", DateField::Month), Value::Null);
        assert_eq!(parse_date_span("1942", DateField::Month), Value::Null);
    }

    #[test]
    fn date_functions_in_programs() {
        assert_eq!(eval("year(\"1942\")", &[]), Value::Number(1942.0));
        assert_eq!(eval("diff(year(\"May 2, 1950\"),year(\"1942\"))", &[]), Value::Number(8.0));
        assert_eq!(eval("month(\"soon\")", &[]), Value::Null);
    }

    #[test]
    fn rendering() {
        assert_eq!(Value::Number(42.0).to_string(), "42");
        assert_eq!(Value::Number(40.75).to_string(), "40.75");
        assert_eq!(Value::Number(-0.0).to_string(), "0");
        assert_eq!(Value::Null.to_string(), "NULL");
    }

    #[test]
    fn label_parsing() {
        assert_eq!(NliLabel::from_str_ci("ENTAILMENT"), Some(NliLabel::Entailment));
        assert_eq!(NliLabel::from_str_ci(" neutral "), Some(NliLabel::Neutral));
        assert_eq!(NliLabel::from_str_ci("maybe"), None);
    }
}
