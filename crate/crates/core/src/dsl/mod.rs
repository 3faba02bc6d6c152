//! The textual rule language.
//!
//! A rule file (`.nsr`) holds an ordered list of rules. Each rule names the
//! patients it applies to (a boolean condition over schema features) and the
//! evidence shift it contributes (a sum-of-products of differentiable
//! primitives over numeric features, parameterized by the rule's declared
//! trainable scalars).
//!
//! ```text
//! rule age_risk {
//!   describe "AD risk rises after a threshold age and accelerates late"
//!   when present(age)
//!   effect sigmoid(age; alpha, T1, tau) + ramp(age; beta, T2)
//!   params {
//!     alpha = 0.8
//!     beta = 0.05
//!     T1 = 70 in [50, 90]
//!     T2 = 85 in [70, 100]
//!     tau = 5 in [0.1, 20]
//!   }
//! }
//! ```
//!
//! Primitive semantics over a record `z` (sigma is the logistic function):
//!
//! | factor                 | value                         |
//! |------------------------|-------------------------------|
//! | `sigmoid(f; a, T, tau)`| `a * sigma((z_f - T) / tau)`  |
//! | `ramp(f; b, T)`        | `b * max(0, z_f - T)`         |
//! | `linear(f; a, b)`      | `a * z_f + b`                 |
//! | `gate(c; g)`           | `g` if condition `c` holds, else 0 |
//! | `const(c)`             | `c`                           |
//!
//! The grammar is whitespace-separated and line-insensitive; `#` starts a
//! comment that runs to end of line. Keywords are case-sensitive. Parameters
//! are scoped to their rule and addressed globally as `<rule_id>.<name>`.

mod lexer;
mod parser;
mod printer;
mod validate;

pub use parser::parse_ruleset;
pub use printer::serialize_ruleset;
pub use validate::{validate_ruleset, Diagnostic, DiagnosticKind};

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Whether a feature holds real numbers or category strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::Numeric => write!(f, "numeric"),
            FeatureKind::Categorical => write!(f, "categorical"),
        }
    }
}

/// Declares the features rules may reference, with their kinds.
///
/// Ordering comparisons type-check only against numeric features; equality
/// works on either kind (categoricals compare by exact string equality).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureSchema {
    entries: BTreeMap<String, FeatureKind>,
    order: Vec<String>,
}

impl FeatureSchema {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a feature; redeclaring an existing name is an error.
    pub fn declare(&mut self, name: &str, kind: FeatureKind) -> Result<(), SchemaError> {
        if self.entries.insert(name.to_string(), kind).is_some() {
            return Err(SchemaError::Duplicate(name.to_string()));
        }
        self.order.push(name.to_string());
        Ok(())
    }

    pub fn kind_of(&self, name: &str) -> Option<FeatureKind> {
        self.entries.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Feature names in declaration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Parses the schema file format: one `feature <name> numeric|categorical`
    /// per line, blank lines and `#` comments allowed.
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let mut schema = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let mut words = line.split_whitespace();
            let Some(head) = words.next() else { continue };
            if head != "feature" {
                return Err(SchemaError::Malformed {
                    line: lineno + 1,
                    reason: format!("expected `feature`, found `{head}`"),
                });
            }
            let name = words.next().ok_or(SchemaError::Malformed {
                line: lineno + 1,
                reason: "missing feature name".into(),
            })?;
            let kind = match words.next() {
                Some("numeric") => FeatureKind::Numeric,
                Some("categorical") => FeatureKind::Categorical,
                other => {
                    return Err(SchemaError::Malformed {
                        line: lineno + 1,
                        reason: format!(
                            "expected `numeric` or `categorical`, found `{}`",
                            other.unwrap_or("end of line")
                        ),
                    })
                }
            };
            if let Some(extra) = words.next() {
                return Err(SchemaError::Malformed {
                    line: lineno + 1,
                    reason: format!("unexpected trailing `{extra}`"),
                });
            }
            schema.declare(name, kind)?;
        }
        Ok(schema)
    }

    /// Renders the schema file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for name in &self.order {
            out.push_str(&format!("feature {} {}\n", name, self.entries[name]));
        }
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("feature `{0}` declared twice")]
    Duplicate(String),
    #[error("schema line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// An ordered collection of rules together with the schema they were
/// validated against.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub schema: FeatureSchema,
}

impl RuleSet {
    pub fn empty(schema: FeatureSchema) -> Self {
        Self { rules: Vec::new(), schema }
    }

    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }
}

/// One symbolic rule: an applicability condition plus a differentiable
/// effect expression over the rule's declared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: String,
    pub description: Option<String>,
    pub condition: CondExpr,
    pub effect: EffectExpr,
    pub params: Vec<ParamDecl>,
}

impl Rule {
    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Global name of a rule-scoped parameter.
    pub fn qualified(&self, param: &str) -> String {
        format!("{}.{}", self.id, param)
    }
}

/// Comparison operators usable in conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    /// Ordering operators require numeric operands; equality works on both.
    pub fn is_ordering(self) -> bool {
        matches!(self, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
    }
}

/// Right-hand side of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(f64),
    Str(String),
}

/// Boolean condition over patient features.
///
/// `All`/`Any` nodes always hold at least two children; a single-child
/// conjunction or disjunction collapses to the child during parsing, so two
/// structurally equal conditions are representationally equal.
#[derive(Debug, Clone, PartialEq)]
pub enum CondExpr {
    Any(Vec<CondExpr>),
    All(Vec<CondExpr>),
    Not(Box<CondExpr>),
    Present(String),
    Cmp {
        feature: String,
        op: CmpOp,
        value: Literal,
    },
}

impl CondExpr {
    /// Collects every feature name the condition reads.
    pub fn features(&self, into: &mut Vec<String>) {
        match self {
            CondExpr::Any(cs) | CondExpr::All(cs) => {
                for c in cs {
                    c.features(into);
                }
            }
            CondExpr::Not(c) => c.features(into),
            CondExpr::Present(f) => into.push(f.clone()),
            CondExpr::Cmp { feature, .. } => into.push(feature.clone()),
        }
    }
}

/// Reference to a parameter declared by the enclosing rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRef(pub String);

/// One differentiable primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// `scale * sigma((z_f - threshold) / smoothness)`
    Sigmoid {
        feature: String,
        scale: ParamRef,
        threshold: ParamRef,
        smoothness: ParamRef,
    },
    /// `slope * max(0, z_f - threshold)`
    Ramp {
        feature: String,
        slope: ParamRef,
        threshold: ParamRef,
    },
    /// `weight * z_f + offset`
    Linear {
        feature: String,
        weight: ParamRef,
        offset: ParamRef,
    },
    /// `value` when the condition holds, else 0; the condition itself carries
    /// no gradient.
    Gate { condition: CondExpr, value: ParamRef },
    /// The bare parameter value.
    Const { value: ParamRef },
}

impl Factor {
    pub fn name(&self) -> &'static str {
        match self {
            Factor::Sigmoid { .. } => "sigmoid",
            Factor::Ramp { .. } => "ramp",
            Factor::Linear { .. } => "linear",
            Factor::Gate { .. } => "gate",
            Factor::Const { .. } => "const",
        }
    }

    /// Parameter references in argument order.
    pub fn param_refs(&self) -> Vec<&ParamRef> {
        match self {
            Factor::Sigmoid { scale, threshold, smoothness, .. } => {
                vec![scale, threshold, smoothness]
            }
            Factor::Ramp { slope, threshold, .. } => vec![slope, threshold],
            Factor::Linear { weight, offset, .. } => vec![weight, offset],
            Factor::Gate { value, .. } => vec![value],
            Factor::Const { value } => vec![value],
        }
    }

    /// Features read when this factor is evaluated (gate conditions included).
    pub fn features(&self, into: &mut Vec<String>) {
        match self {
            Factor::Sigmoid { feature, .. }
            | Factor::Ramp { feature, .. }
            | Factor::Linear { feature, .. } => into.push(feature.clone()),
            Factor::Gate { condition, .. } => condition.features(into),
            Factor::Const { .. } => {}
        }
    }
}

/// Product of factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub factors: Vec<Factor>,
}

/// Sum of terms; the value a rule contributes when it fires.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectExpr {
    pub terms: Vec<Term>,
}

impl EffectExpr {
    /// Every feature the effect reads, deduplicated, in first-use order.
    pub fn features(&self) -> Vec<String> {
        let mut all = Vec::new();
        for term in &self.terms {
            for factor in &term.factors {
                factor.features(&mut all);
            }
        }
        let mut seen = Vec::new();
        for f in all {
            if !seen.contains(&f) {
                seen.push(f);
            }
        }
        seen
    }

    /// Parameter references anywhere in the effect, in evaluation order.
    pub fn param_refs(&self) -> Vec<&ParamRef> {
        let mut out = Vec::new();
        for term in &self.terms {
            for factor in &term.factors {
                out.extend(factor.param_refs());
            }
        }
        out
    }

    /// Names of parameters used in a sigmoid smoothness slot. These divide
    /// the sigmoid argument and must stay positive.
    pub fn smoothness_params(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for term in &self.terms {
            for factor in &term.factors {
                if let Factor::Sigmoid { smoothness, .. } = factor {
                    if !out.contains(&smoothness.0.as_str()) {
                        out.push(smoothness.0.as_str());
                    }
                }
            }
        }
        out
    }
}

/// A trainable scalar declared by a rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub init: f64,
    pub bounds: Option<(f64, f64)>,
    pub frozen: bool,
}

/// Position in a rule source file, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// Parse or validation failure with source position.
#[derive(Debug, Error, PartialEq)]
pub enum DslError {
    #[error("{pos}: syntax error: {message}")]
    Syntax { pos: Pos, message: String },
    #[error("{pos}: `{primitive}` takes {expected} parameter(s), found {found}")]
    Arity {
        pos: Pos,
        primitive: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{pos}: unknown feature `{feature}`")]
    UnknownFeature { pos: Pos, feature: String },
    #[error("{pos}: parameter `{param}` is not declared by rule `{rule}`")]
    UnresolvedParam { pos: Pos, rule: String, param: String },
    #[error("{pos}: {message}")]
    TypeMismatch { pos: Pos, message: String },
    #[error("{pos}: duplicate rule id `{id}`")]
    DuplicateRuleId { pos: Pos, id: String },
    #[error("{pos}: duplicate parameter `{param}` in rule `{rule}`")]
    DuplicateParam { pos: Pos, rule: String, param: String },
    #[error("{pos}: parameter `{param}`: init {init} outside bounds [{lo}, {hi}]")]
    InitOutOfBounds {
        pos: Pos,
        param: String,
        init: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{pos}: number out of range")]
    NumberOutOfRange { pos: Pos },
}
