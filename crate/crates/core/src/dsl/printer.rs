//! Canonical text form for rule sets. Parentheses are emitted only where
//! reparsing would otherwise regroup the condition tree, so
//! `parse(serialize(r)) == r` for any parsed rule set `r`.

use std::fmt::Write;

use super::{CondExpr, EffectExpr, Factor, ParamDecl, Rule, RuleSet, Term};

pub fn serialize_ruleset(rules: &RuleSet) -> String {
    let mut out = String::new();
    for (i, rule) in rules.rules.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        write_rule(&mut out, rule);
    }
    out
}

fn write_rule(out: &mut String, rule: &Rule) {
    writeln!(out, "rule {} {{", rule.id).unwrap();
    if let Some(text) = &rule.description {
        writeln!(out, "  describe \"{}\"", escape(text)).unwrap();
    }
    writeln!(out, "  when {}", cond_text(&rule.condition)).unwrap();
    writeln!(out, "  effect {}", effect_text(&rule.effect)).unwrap();
    writeln!(out, "  params {{").unwrap();
    for decl in &rule.params {
        writeln!(out, "    {}", pdecl_text(decl)).unwrap();
    }
    writeln!(out, "  }}").unwrap();
    writeln!(out, "}}").unwrap();
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            other => out.push(other),
        }
    }
    out
}

pub(super) fn cond_text(cond: &CondExpr) -> String {
    match cond {
        CondExpr::Any(parts) => parts
            .iter()
            .map(|p| wrap_if(p, matches!(p, CondExpr::Any(_))))
            .collect::<Vec<_>>()
            .join(" or "),
        CondExpr::All(parts) => parts
            .iter()
            .map(|p| wrap_if(p, matches!(p, CondExpr::Any(_) | CondExpr::All(_))))
            .collect::<Vec<_>>()
            .join(" and "),
        CondExpr::Not(inner) => format!(
            "not {}",
            wrap_if(inner, matches!(**inner, CondExpr::Any(_) | CondExpr::All(_)))
        ),
        CondExpr::Present(feature) => format!("present({feature})"),
        CondExpr::Cmp { feature, op, value } => {
            format!("{feature} {} {}", op.symbol(), literal_text(value))
        }
    }
}

fn wrap_if(cond: &CondExpr, parens: bool) -> String {
    let text = cond_text(cond);
    if parens {
        format!("({text})")
    } else {
        text
    }
}

fn literal_text(value: &super::Literal) -> String {
    match value {
        super::Literal::Number(n) => format!("{n}"),
        super::Literal::Str(s) => format!("\"{}\"", escape(s)),
    }
}

pub(super) fn effect_text(effect: &EffectExpr) -> String {
    effect.terms.iter().map(term_text).collect::<Vec<_>>().join(" + ")
}

fn term_text(term: &Term) -> String {
    term.factors.iter().map(factor_text).collect::<Vec<_>>().join(" * ")
}

fn factor_text(factor: &Factor) -> String {
    match factor {
        Factor::Sigmoid { feature, scale, threshold, smoothness } => {
            format!("sigmoid({feature}; {}, {}, {})", scale.0, threshold.0, smoothness.0)
        }
        Factor::Ramp { feature, slope, threshold } => {
            format!("ramp({feature}; {}, {})", slope.0, threshold.0)
        }
        Factor::Linear { feature, weight, offset } => {
            format!("linear({feature}; {}, {})", weight.0, offset.0)
        }
        Factor::Gate { condition, value } => {
            format!("gate({}; {})", cond_text(condition), value.0)
        }
        Factor::Const { value } => format!("const({})", value.0),
    }
}

fn pdecl_text(decl: &ParamDecl) -> String {
    let mut text = format!("{} = {}", decl.name, decl.init);
    if let Some((lo, hi)) = decl.bounds {
        write!(text, " in [{lo}, {hi}]").unwrap();
    }
    if decl.frozen {
        text.push_str(" frozen");
    }
    text
}
