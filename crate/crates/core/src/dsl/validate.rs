//! Whole-AST validation for rule sets built or edited programmatically.
//! The parser runs the same hard checks inline; this pass re-checks them
//! without source positions and adds advisory findings.

use std::collections::BTreeSet;

use super::{CondExpr, Factor, FeatureKind, FeatureSchema, Literal, RuleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    /// Rule the finding belongs to, when it is rule-scoped.
    pub rule: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn error(rule: Option<&str>, message: String) -> Self {
        Self { kind: DiagnosticKind::Error, rule: rule.map(str::to_string), message }
    }

    fn warning(rule: Option<&str>, message: String) -> Self {
        Self { kind: DiagnosticKind::Warning, rule: rule.map(str::to_string), message }
    }
}

/// Checks every rule against `schema` and reports all findings at once.
/// An empty result means the rule set is safe to evaluate and train.
pub fn validate_ruleset(rules: &RuleSet, schema: &FeatureSchema) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen_ids: BTreeSet<&str> = BTreeSet::new();

    for rule in &rules.rules {
        let id = rule.id.as_str();
        if !seen_ids.insert(id) {
            out.push(Diagnostic::error(None, format!("duplicate rule id `{id}`")));
        }

        check_cond(&rule.condition, schema, id, &mut out);
        for term in &rule.effect.terms {
            for factor in &term.factors {
                check_factor(factor, schema, id, &mut out);
            }
        }

        let mut seen_params: BTreeSet<&str> = BTreeSet::new();
        for decl in &rule.params {
            if !seen_params.insert(decl.name.as_str()) {
                out.push(Diagnostic::error(
                    Some(id),
                    format!("duplicate parameter `{}`", decl.name),
                ));
            }
            if let Some((lo, hi)) = decl.bounds {
                if !(lo <= decl.init && decl.init <= hi) {
                    out.push(Diagnostic::error(
                        Some(id),
                        format!(
                            "initial value {} of `{}` lies outside [{lo}, {hi}]",
                            decl.init, decl.name
                        ),
                    ));
                }
            }
        }

        let referenced: BTreeSet<&str> =
            rule.effect.param_refs().iter().map(|r| r.0.as_str()).collect();
        for name in &referenced {
            if !seen_params.contains(name) {
                out.push(Diagnostic::error(
                    Some(id),
                    format!("effect references undeclared parameter `{name}`"),
                ));
            }
        }
        for decl in &rule.params {
            if !referenced.contains(decl.name.as_str()) {
                out.push(Diagnostic::warning(
                    Some(id),
                    format!("parameter `{}` is declared but never used", decl.name),
                ));
            }
        }
    }

    out
}

fn check_cond(cond: &CondExpr, schema: &FeatureSchema, rule: &str, out: &mut Vec<Diagnostic>) {
    match cond {
        CondExpr::Any(parts) | CondExpr::All(parts) => {
            for part in parts {
                check_cond(part, schema, rule, out);
            }
        }
        CondExpr::Not(inner) => check_cond(inner, schema, rule, out),
        CondExpr::Present(feature) => {
            check_feature(feature, schema, rule, out);
        }
        CondExpr::Cmp { feature, op, value } => {
            let Some(kind) = check_feature(feature, schema, rule, out) else {
                return;
            };
            match (kind, value) {
                (FeatureKind::Categorical, _) if op.is_ordering() => {
                    out.push(Diagnostic::error(
                        Some(rule),
                        format!(
                            "ordering comparison `{}` on categorical feature `{feature}`",
                            op.symbol()
                        ),
                    ));
                }
                (FeatureKind::Numeric, Literal::Str(_)) => {
                    out.push(Diagnostic::error(
                        Some(rule),
                        format!("numeric feature `{feature}` compared to a string"),
                    ));
                }
                (FeatureKind::Categorical, Literal::Number(_)) => {
                    out.push(Diagnostic::error(
                        Some(rule),
                        format!("categorical feature `{feature}` compared to a number"),
                    ));
                }
                _ => {}
            }
        }
    }
}

fn check_factor(factor: &Factor, schema: &FeatureSchema, rule: &str, out: &mut Vec<Diagnostic>) {
    match factor {
        Factor::Sigmoid { feature, .. }
        | Factor::Ramp { feature, .. }
        | Factor::Linear { feature, .. } => {
            if let Some(kind) = check_feature(feature, schema, rule, out) {
                if kind != FeatureKind::Numeric {
                    out.push(Diagnostic::error(
                        Some(rule),
                        format!(
                            "`{}` requires a numeric feature, `{feature}` is categorical",
                            factor.name()
                        ),
                    ));
                }
            }
        }
        Factor::Gate { condition, .. } => check_cond(condition, schema, rule, out),
        Factor::Const { .. } => {}
    }
}

fn check_feature(
    name: &str,
    schema: &FeatureSchema,
    rule: &str,
    out: &mut Vec<Diagnostic>,
) -> Option<FeatureKind> {
    let kind = schema.kind_of(name);
    if kind.is_none() {
        out.push(Diagnostic::error(Some(rule), format!("unknown feature `{name}`")));
    }
    kind
}
