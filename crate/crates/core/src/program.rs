//! The arithmetic/date program language.
//!
//! ```text
//! program    := comparison | expr
//! comparison := expr ("=" | "!=") expr
//! expr       := IDENT "(" arg ("," arg)* ")" | TOKEN | NUMBER
//! arg        := expr | STRING
//! ```
//!
//! Tokens are `[NQM][0-9]+`, strings are double quoted with backslash escapes,
//! and whitespace outside strings is ignored. The parser accepts any
//! identifier as a function name; unknown names are reported by [`validate`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum call nesting accepted by the parser.
pub const MAX_DEPTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionId {
    Add,
    Diff,
    Max,
    Min,
    Mul,
    Div,
    Avg,
    Count,
    Year,
    Month,
    Day,
    Hour,
    Minute,
    Second,
}

/// Accepted argument counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "exactly {k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

impl FunctionId {
    pub const ALL: [FunctionId; 14] = [
        FunctionId::Add,
        FunctionId::Diff,
        FunctionId::Max,
        FunctionId::Min,
        FunctionId::Mul,
        FunctionId::Div,
        FunctionId::Avg,
        FunctionId::Count,
        FunctionId::Year,
        FunctionId::Month,
        FunctionId::Day,
        FunctionId::Hour,
        FunctionId::Minute,
        FunctionId::Second,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionId::Add => "add",
            FunctionId::Diff => "diff",
            FunctionId::Max => "max",
            FunctionId::Min => "min",
            FunctionId::Mul => "mul",
            FunctionId::Div => "div",
            FunctionId::Avg => "avg",
            FunctionId::Count => "count",
            FunctionId::Year => "year",
            FunctionId::Month => "month",
            FunctionId::Day => "day",
            FunctionId::Hour => "hour",
            FunctionId::Minute => "minute",
            FunctionId::Second => "second",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub fn arity(self) -> Arity {
        match self {
            FunctionId::Diff | FunctionId::Mul | FunctionId::Div => Arity::Exactly(2),
            FunctionId::Add | FunctionId::Max | FunctionId::Min | FunctionId::Avg => {
                Arity::AtLeast(2)
            }
            FunctionId::Count => Arity::AtLeast(1),
            _ => Arity::Exactly(1),
        }
    }

    /// Date/time field extractors take a single string span.
    pub fn is_date_field(self) -> bool {
        matches!(
            self,
            FunctionId::Year
                | FunctionId::Month
                | FunctionId::Day
                | FunctionId::Hour
                | FunctionId::Minute
                | FunctionId::Second
        )
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Function {
    Known(FunctionId),
    Unknown(String),
}

impl Function {
    pub fn from_name(name: &str) -> Self {
        FunctionId::from_name(name)
            .map(Function::Known)
            .unwrap_or_else(|| Function::Unknown(name.to_string()))
    }

    pub fn name(&self) -> &str {
        match self {
            Function::Known(id) => id.name(),
            Function::Unknown(s) => s,
        }
    }
}

impl From<FunctionId> for Function {
    fn from(id: FunctionId) -> Self {
        Function::Known(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Neq,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Neq => "!=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Program {
    Call { function: Function, args: Vec<Program> },
    TokenRef(String),
    StringLit(String),
    NumberLit(f64),
    Comparison {
        op: CmpOp,
        lhs: Box<Program>,
        rhs: Box<Program>,
    },
}

impl Program {
    pub fn call(function: FunctionId, args: Vec<Program>) -> Self {
        Program::Call {
            function: Function::Known(function),
            args,
        }
    }

    pub fn token(name: impl Into<String>) -> Self {
        Program::TokenRef(name.into())
    }

    pub fn compare(op: CmpOp, lhs: Program, rhs: Program) -> Self {
        Program::Comparison {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    /// Outermost function, if the program is a call.
    pub fn root_function(&self) -> Option<&Function> {
        match self {
            Program::Call { function, .. } => Some(function),
            _ => None,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Program::Call { args, .. } => 1 + args.iter().map(Program::depth).max().unwrap_or(0),
            Program::Comparison { lhs, rhs, .. } => 1 + lhs.depth().max(rhs.depth()),
            _ => 1,
        }
    }

    /// All token names referenced anywhere in the program.
    pub fn tokens(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_tokens(&mut out);
        out
    }

    fn collect_tokens<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Program::TokenRef(t) => {
                out.insert(t);
            }
            Program::Call { args, .. } => args.iter().for_each(|a| a.collect_tokens(out)),
            Program::Comparison { lhs, rhs, .. } => {
                lhs.collect_tokens(out);
                rhs.collect_tokens(out);
            }
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Formatting

/// Canonical compact rendering, e.g. `diff(N9,N10)` or `add(M1,M2)!=N1`.
pub fn format(program: &Program) -> String {
    program.to_string()
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Program::Call { function, args } => {
                write!(f, "{}(", function.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Program::TokenRef(t) => f.write_str(t),
            Program::StringLit(s) => write_quoted(f, s),
            Program::NumberLit(v) => f.write_str(&format_number(*v)),
            Program::Comparison { op, lhs, rhs } => write!(f, "{lhs}{}{rhs}", op.symbol()),
        }
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            '\r' => f.write_str("\\r")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

/// Integral values print without a decimal point; everything else uses the
/// shortest decimal that round-trips.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        // Collapses -0 as well.
        return "0".to_string();
    }
    format!("{v}")
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at position {position}: {message}")]
pub struct ParseError {
    /// 1-based character position of the offending input (one past the end
    /// for unexpected end of input).
    pub position: usize,
    pub message: String,
}

impl FromStr for Program {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

pub fn parse(text: &str) -> Result<Program, ParseError> {
    let mut p = Parser {
        chars: text.chars().collect(),
        pos: 0,
    };
    let program = p.program()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error(format!("unexpected trailing {:?}", p.chars[p.pos])));
    }
    Ok(program)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            position: self.pos + 1,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let lhs = self.expr(0)?;
        self.skip_ws();
        let op = match self.peek() {
            Some('=') => {
                self.pos += 1;
                CmpOp::Eq
            }
            Some('!') => {
                self.pos += 1;
                self.expect_immediate('=')?;
                CmpOp::Neq
            }
            _ => return Ok(lhs),
        };
        let rhs = self.expr(0)?;
        Ok(Program::compare(op, lhs, rhs))
    }

    fn expect_immediate(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {c:?}")))
        }
    }

    fn expr(&mut self, depth: usize) -> Result<Program, ParseError> {
        self.skip_ws();
        if depth > MAX_DEPTH {
            return Err(self.error("nesting too deep"));
        }
        match self.peek() {
            None => Err(self.error("expected expression, found end of input")),
            Some(c) if c.is_ascii_digit() || c == '-' || c == '.' => self.number(),
            Some(c) if c.is_alphabetic() || c == '_' => {
                let start = self.pos;
                let ident = self.ident();
                self.skip_ws();
                if self.peek() == Some('(') {
                    self.pos += 1;
                    let args = self.args(depth)?;
                    Ok(Program::Call {
                        function: Function::from_name(&ident),
                        args,
                    })
                } else if is_token_name(&ident) {
                    Ok(Program::TokenRef(ident))
                } else {
                    Err(ParseError {
                        position: start + 1,
                        message: format!("{ident:?} is neither a token nor a call"),
                    })
                }
            }
            Some('"') => Err(self.error("string literal only allowed as a function argument")),
            Some(c) => Err(self.error(format!("unexpected {c:?}"))),
        }
    }

    fn args(&mut self, depth: usize) -> Result<Vec<Program>, ParseError> {
        let mut args = Vec::new();
        loop {
            self.skip_ws();
            let arg = if self.peek() == Some('"') {
                self.string()?
            } else {
                self.expr(depth + 1)?
            };
            args.push(arg);
            self.skip_ws();
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(')') => {
                    self.pos += 1;
                    return Ok(args);
                }
                Some(c) => return Err(self.error(format!("expected ',' or ')', found {c:?}"))),
                None => return Err(self.error("expected ',' or ')', found end of input")),
            }
        }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_alphanumeric() || c == '_')
        {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn number(&mut self) -> Result<Program, ParseError> {
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        let int_start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == int_start {
            return Err(self.error("expected digits"));
        }
        if self.peek() == Some('.') {
            self.pos += 1;
            let frac_start = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == frac_start {
                return Err(self.error("expected digits after '.'"));
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        let value: f64 = text.parse().map_err(|_| ParseError {
            position: start + 1,
            message: format!("invalid number {text:?}"),
        })?;
        if !value.is_finite() {
            return Err(ParseError {
                position: start + 1,
                message: format!("number {text:?} out of range"),
            });
        }
        Ok(Program::NumberLit(value))
    }

    fn string(&mut self) -> Result<Program, ParseError> {
        self.pos += 1; // opening quote
        let mut out = String::new();
        loop {
            match self.peek() {
                None => return Err(self.error("unterminated string")),
                Some('"') => {
                    self.pos += 1;
                    return Ok(Program::StringLit(out));
                }
                Some('\\') => {
                    self.pos += 1;
                    let c = self.peek().ok_or_else(|| self.error("unterminated escape"))?;
                    out.push(match c {
                        'n' => '\n',
                        't' => '\t',
                        'r' => '\r',
                        other => other,
                    });
                    self.pos += 1;
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }
}

pub fn is_token_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('N' | 'Q' | 'M'))
        && !s[1..].is_empty()
        && s[1..].bytes().all(|b| b.is_ascii_digit())
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    UnknownFunction,
    ArityMismatch,
    UnboundToken,
    BadArgKind,
    IllegalComparisonPosition,
    ParseError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Character span `[start, end)` in the canonical rendering of the
    /// program (in the source text for parse errors).
    pub location: (usize, usize),
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

/// Checks a program against the known token set.
///
/// An empty report means execution can only fail for runtime reasons
/// (division by zero, unparseable date span, non-finite result).
pub fn validate<S: AsRef<str> + Ord>(program: &Program, known_tokens: &BTreeSet<S>) -> ValidationReport {
    let known: BTreeSet<&str> = known_tokens.iter().map(AsRef::as_ref).collect();
    let mut v = Validator {
        known,
        violations: Vec::new(),
    };
    match program {
        Program::Comparison { lhs, rhs, op } => {
            let lhs_len = lhs.to_string().chars().count();
            v.numeric(lhs, 0);
            v.numeric(rhs, lhs_len + op.symbol().len());
        }
        other => v.numeric(other, 0),
    }
    ValidationReport {
        violations: v.violations,
    }
}

/// Parses then validates; parse failures become a single `ParseError` violation.
pub fn validate_text<S: AsRef<str> + Ord>(text: &str, known_tokens: &BTreeSet<S>) -> ValidationReport {
    match parse(text) {
        Ok(p) => validate(&p, known_tokens),
        Err(e) => ValidationReport {
            violations: vec![Violation {
                code: ViolationCode::ParseError,
                location: (e.position - 1, e.position),
                message: e.message,
            }],
        },
    }
}

struct Validator<'a> {
    known: BTreeSet<&'a str>,
    violations: Vec<Violation>,
}

impl Validator<'_> {
    fn push(&mut self, code: ViolationCode, start: usize, node: &Program, message: String) {
        let len = node.to_string().chars().count();
        self.violations.push(Violation {
            code,
            location: (start, start + len),
            message,
        });
    }

    /// `node` must produce a number; `at` is its offset in the canonical text.
    fn numeric(&mut self, node: &Program, at: usize) {
        match node {
            Program::TokenRef(t) => {
                if !self.known.contains(t.as_str()) {
                    self.push(ViolationCode::UnboundToken, at, node, format!("unbound token {t}"));
                }
            }
            Program::NumberLit(_) => {}
            Program::StringLit(_) => self.push(
                ViolationCode::BadArgKind,
                at,
                node,
                "string span where a number is required".into(),
            ),
            Program::Comparison { .. } => self.push(
                ViolationCode::IllegalComparisonPosition,
                at,
                node,
                "comparison is only allowed at the top level".into(),
            ),
            Program::Call { function, args } => self.call(node, function, args, at),
        }
    }

    fn call(&mut self, node: &Program, function: &Function, args: &[Program], at: usize) {
        let id = match function {
            Function::Known(id) => *id,
            Function::Unknown(name) => {
                self.push(
                    ViolationCode::UnknownFunction,
                    at,
                    node,
                    format!("unknown function {name}"),
                );
                // Still look inside for further problems.
                self.args(args, at + name.chars().count() + 1, |v, a, off| v.numeric(a, off));
                return;
            }
        };
        let arity = id.arity();
        if !arity.accepts(args.len()) {
            self.push(
                ViolationCode::ArityMismatch,
                at,
                node,
                format!("{id} takes {arity} argument(s), got {}", args.len()),
            );
        }
        let first_arg = at + id.name().len() + 1;
        if id.is_date_field() {
            self.args(args, first_arg, |v, a, off| {
                if !matches!(a, Program::StringLit(_)) {
                    v.push(
                        ViolationCode::BadArgKind,
                        off,
                        a,
                        format!("{id} expects a quoted text span"),
                    );
                }
            });
        } else if id == FunctionId::Count {
            self.args(args, first_arg, |v, a, off| {
                if !matches!(a, Program::StringLit(_)) {
                    v.numeric(a, off);
                }
            });
        } else {
            self.args(args, first_arg, |v, a, off| v.numeric(a, off));
        }
    }

    fn args(&mut self, args: &[Program], mut offset: usize, mut check: impl FnMut(&mut Self, &Program, usize)) {
        for a in args {
            check(self, a, offset);
            offset += a.to_string().chars().count() + 1;
        }
    }
}
