//! Rule selection and logit adjustment.
//!
//! For a patient record the reasoner finds the applicable rules, sums their
//! effect values into a single evidence shift `delta`, and moves the
//! perception logits apart by it: the AD logit gains `delta`, the CN logit
//! loses `w * delta` where `w` is the global balance parameter.

use std::collections::BTreeMap;

use crate::autodiff::{eval_effect, eval_with_grad, ParameterStore, StoreError};
use crate::dsl::{CmpOp, CondExpr, Literal, Rule, RuleSet};
use crate::perception::LogitPair;

/// Qualified name of the global balance parameter from the logit update.
pub const BALANCE_PARAM: &str = "w";

/// Registers the balance parameter with its default value and range.
pub fn register_balance(store: &mut ParameterStore, frozen: bool) -> Result<(), StoreError> {
    store.register(BALANCE_PARAM, 1.0, Some((0.0, 10.0)), frozen)
}

/// A patient's structured data: sparse feature map plus optional binary
/// label (0 = CN, 1 = AD). Absent features mean the value was never measured.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    features: BTreeMap<String, FeatureValue>,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Numeric(f64),
    Categorical(String),
}

impl PatientRecord {
    pub fn new(id: &str) -> Self {
        Self { id: id.to_string(), features: BTreeMap::new(), label: None }
    }

    pub fn set(&mut self, name: &str, value: FeatureValue) {
        if let FeatureValue::Numeric(v) = value {
            assert!(v.is_finite(), "non-finite value for feature `{name}`");
        }
        self.features.insert(name.to_string(), value);
    }

    pub fn set_numeric(&mut self, name: &str, value: f64) {
        self.set(name, FeatureValue::Numeric(value));
    }

    pub fn set_categorical(&mut self, name: &str, value: &str) {
        self.set(name, FeatureValue::Categorical(value.to_string()));
    }

    pub fn remove(&mut self, name: &str) -> Option<FeatureValue> {
        self.features.remove(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.features.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&FeatureValue> {
        self.features.get(name)
    }

    pub fn numeric(&self, name: &str) -> Option<f64> {
        match self.features.get(name) {
            Some(FeatureValue::Numeric(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn categorical(&self, name: &str) -> Option<&str> {
        match self.features.get(name) {
            Some(FeatureValue::Categorical(s)) => Some(s.as_str()),
            _ => None,
        }
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }
}

/// Three-valued condition outcome. Comparisons on missing features are
/// `Unknown`, and `Unknown` propagates through `not`/`and`/`or` by Kleene's
/// rules, so negation never turns missing data into a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriState {
    False,
    Unknown,
    True,
}

impl TriState {
    pub fn is_true(self) -> bool {
        self == TriState::True
    }

    fn not(self) -> TriState {
        match self {
            TriState::True => TriState::False,
            TriState::False => TriState::True,
            TriState::Unknown => TriState::Unknown,
        }
    }

    fn and(self, other: TriState) -> TriState {
        use TriState::*;
        match (self, other) {
            (False, _) | (_, False) => False,
            (Unknown, _) | (_, Unknown) => Unknown,
            _ => True,
        }
    }

    fn or(self, other: TriState) -> TriState {
        use TriState::*;
        match (self, other) {
            (True, _) | (_, True) => True,
            (Unknown, _) | (_, Unknown) => Unknown,
            _ => False,
        }
    }
}

/// Evaluates a condition against a record. `present(f)` is decided for every
/// record; all other atoms are `Unknown` when their feature is missing.
pub fn eval_condition(cond: &CondExpr, z: &PatientRecord) -> TriState {
    match cond {
        CondExpr::Any(parts) => parts
            .iter()
            .map(|p| eval_condition(p, z))
            .fold(TriState::False, TriState::or),
        CondExpr::All(parts) => parts
            .iter()
            .map(|p| eval_condition(p, z))
            .fold(TriState::True, TriState::and),
        CondExpr::Not(inner) => eval_condition(inner, z).not(),
        CondExpr::Present(feature) => {
            if z.has(feature) {
                TriState::True
            } else {
                TriState::False
            }
        }
        CondExpr::Cmp { feature, op, value } => match (z.get(feature), value) {
            (None, _) => TriState::Unknown,
            (Some(FeatureValue::Numeric(a)), Literal::Number(b)) => {
                bool_state(compare_numeric(*a, *op, *b))
            }
            (Some(FeatureValue::Categorical(a)), Literal::Str(b)) => match op {
                CmpOp::Eq => bool_state(a == b),
                CmpOp::Ne => bool_state(a != b),
                // Ordering on categoricals is rejected at parse time; a
                // hand-built AST that reaches here is undecidable.
                _ => TriState::Unknown,
            },
            // Record/literal kind mismatch: undecidable rather than a fault.
            _ => TriState::Unknown,
        },
    }
}

fn bool_state(b: bool) -> TriState {
    if b {
        TriState::True
    } else {
        TriState::False
    }
}

fn compare_numeric(a: f64, op: CmpOp, b: f64) -> bool {
    match op {
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
        CmpOp::Lt => a < b,
        CmpOp::Le => a <= b,
        CmpOp::Gt => a > b,
        CmpOp::Ge => a >= b,
    }
}

/// True when the rule both matches the record and can evaluate its effect:
/// the condition holds and every feature the effect reads (gate conditions
/// included) is present.
pub fn rule_applies(rule: &Rule, z: &PatientRecord) -> bool {
    eval_condition(&rule.condition, z).is_true()
        && rule.effect.features().iter().all(|f| z.has(f))
}

/// Ids of the rules whose condition evaluates true for `z`, in declaration
/// order.
pub fn select_rules<'a>(rs: &'a RuleSet, z: &PatientRecord) -> Vec<&'a str> {
    rs.rules
        .iter()
        .filter(|r| eval_condition(&r.condition, z).is_true())
        .map(|r| r.id.as_str())
        .collect()
}

/// Outcome of one logit adjustment: which rules fired, with what individual
/// effects, and the resulting logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjustment {
    /// (rule id, effect value) for every rule that fired, in declaration order.
    pub active: Vec<(String, f64)>,
    /// Sum of the active effect values.
    pub delta_total: f64,
    /// Balance parameter value used for the CN shift.
    pub w: f64,
    pub input_logits: LogitPair,
    pub output_logits: LogitPair,
}

/// Applies the rule engine to `y`: `(y_cn - w*delta, y_ad + delta)`.
///
/// Rules whose condition holds but whose effect reads missing data are
/// skipped, so missing features never fault — they only deactivate rules.
/// With no active rules the output is the input, bit for bit. The store must
/// contain [`BALANCE_PARAM`].
pub fn adjust(
    rs: &RuleSet,
    z: &PatientRecord,
    y: LogitPair,
    params: &ParameterStore,
) -> Adjustment {
    let w = params.value(BALANCE_PARAM);
    let mut active = Vec::new();
    let mut delta_total = 0.0;
    for rule in &rs.rules {
        if rule_applies(rule, z) {
            let delta = eval_effect(rule, z, params);
            delta_total += delta;
            active.push((rule.id.clone(), delta));
        }
    }
    let output_logits = if active.is_empty() {
        y
    } else {
        LogitPair { cn: y.cn - w * delta_total, ad: y.ad + delta_total }
    };
    Adjustment { active, delta_total, w, input_logits: y, output_logits }
}

/// [`adjust`] plus the gradient of both output logits with respect to every
/// unfrozen parameter involved: rule parameters map to
/// `(-w * d(delta)/dp, d(delta)/dp)` and the balance parameter to
/// `(-delta, 0)`. The gradient with respect to the input logits is the
/// identity and is not materialized.
pub fn adjust_with_grad(
    rs: &RuleSet,
    z: &PatientRecord,
    y: LogitPair,
    params: &ParameterStore,
) -> (Adjustment, BTreeMap<String, (f64, f64)>) {
    let w = params.value(BALANCE_PARAM);
    let mut active = Vec::new();
    let mut delta_total = 0.0;
    let mut grads: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for rule in &rs.rules {
        if rule_applies(rule, z) {
            let (delta, rule_grads) = eval_with_grad(rule, z, params);
            delta_total += delta;
            active.push((rule.id.clone(), delta));
            for (name, g) in rule_grads {
                let entry = grads.entry(name).or_insert((0.0, 0.0));
                entry.0 += -w * g;
                entry.1 += g;
            }
        }
    }
    if !params.entry(BALANCE_PARAM).unwrap().frozen {
        grads.insert(BALANCE_PARAM.to_string(), (-delta_total, 0.0));
    }
    let output_logits = if active.is_empty() {
        y
    } else {
        LogitPair { cn: y.cn - w * delta_total, ad: y.ad + delta_total }
    };
    let adjustment =
        Adjustment { active, delta_total, w, input_logits: y, output_logits };
    (adjustment, grads)
}
