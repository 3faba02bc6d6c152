//! Shared helpers for the acceptance suite: random scenario generation over
//! the full rule grammar, an independent brute-force effect interpreter, and
//! finite-difference utilities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nsad_core::autodiff::ParameterStore;
use nsad_core::dsl::{parse_ruleset, CmpOp, CondExpr, Factor, Literal, Rule, RuleSet};
use nsad_core::perception::{ce_grad_logits, cross_entropy, softmax, MlpModel};
use nsad_core::reasoner::{
    adjust, adjust_with_grad, register_balance, FeatureValue, PatientRecord, BALANCE_PARAM,
};
use nsad_core::{FeatureSchema, LogitPair};

pub const NUMERIC_FEATURES: &[(&str, f64, f64)] =
    &[("age", 55.0, 95.0), ("mmse_score", 10.0, 30.0), ("biomarker", -3.0, 3.0)];

pub const CATEGORICAL_FEATURES: &[(&str, &[&str])] =
    &[("smoker", &["never", "former", "current"]), ("sex", &["f", "m"])];

pub fn test_schema() -> FeatureSchema {
    let mut text = String::new();
    for (name, _, _) in NUMERIC_FEATURES {
        let _ = writeln!(text, "feature {name} numeric");
    }
    for (name, _) in CATEGORICAL_FEATURES {
        let _ = writeln!(text, "feature {name} categorical");
    }
    FeatureSchema::parse(&text).unwrap()
}

// ---------------------------------------------------------------------------
// Random generation over the grammar
// ---------------------------------------------------------------------------

fn numeric_feature(rng: &mut ChaCha8Rng) -> (&'static str, f64, f64) {
    NUMERIC_FEATURES[rng.gen_range(0..NUMERIC_FEATURES.len())]
}

fn categorical_feature(rng: &mut ChaCha8Rng) -> (&'static str, &'static [&'static str]) {
    CATEGORICAL_FEATURES[rng.gen_range(0..CATEGORICAL_FEATURES.len())]
}

fn gen_atom(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..4) {
        0 => {
            let name = if rng.gen_bool(0.7) {
                numeric_feature(rng).0
            } else {
                categorical_feature(rng).0
            };
            format!("present({name})")
        }
        1 => {
            let (name, lo, hi) = numeric_feature(rng);
            let op = ["<", "<=", ">", ">=", "==", "!="][rng.gen_range(0..6)];
            let lit = rng.gen_range(lo..hi);
            format!("{name} {op} {lit}")
        }
        2 => {
            let (name, values) = categorical_feature(rng);
            let op = if rng.gen_bool(0.7) { "==" } else { "!=" };
            let value = values[rng.gen_range(0..values.len())];
            format!("{name} {op} \"{value}\"")
        }
        _ => format!("not ({})", gen_cond(rng, 0)),
    }
}

fn gen_cond(rng: &mut ChaCha8Rng, depth: usize) -> String {
    if depth >= 2 || rng.gen_bool(0.45) {
        return gen_atom(rng);
    }
    let n = rng.gen_range(2..=3);
    let glue = if rng.gen_bool(0.5) { " and " } else { " or " };
    let parts: Vec<String> = (0..n)
        .map(|_| {
            let inner = gen_cond(rng, depth + 1);
            if inner.contains(" and ") || inner.contains(" or ") {
                format!("({inner})")
            } else {
                inner
            }
        })
        .collect();
    parts.join(glue)
}

struct ParamGen {
    decls: Vec<String>,
    next: usize,
}

impl ParamGen {
    fn new() -> Self {
        Self { decls: Vec::new(), next: 0 }
    }

    /// Declares a fresh parameter with `init` strictly inside any bounds by a
    /// wide margin, so finite-difference probes never touch a clamp.
    fn fresh(
        &mut self,
        rng: &mut ChaCha8Rng,
        init: f64,
        bounds: Option<(f64, f64)>,
        may_freeze: bool,
    ) -> String {
        let name = format!("p{}", self.next);
        self.next += 1;
        let mut decl = format!("{name} = {init}");
        if let Some((lo, hi)) = bounds {
            let _ = write!(decl, " in [{lo}, {hi}]");
        }
        if may_freeze && rng.gen_bool(0.15) {
            decl.push_str(" frozen");
        }
        self.decls.push(decl);
        name
    }
}

fn gen_factor(rng: &mut ChaCha8Rng, params: &mut ParamGen) -> String {
    match rng.gen_range(0..5) {
        0 => {
            let (f, lo, hi) = numeric_feature(rng);
            let a = rng.gen_range(-2.0..2.0);
            let t = rng.gen_range(lo..hi);
            let tau = rng.gen_range(0.5..5.0);
            let a = params.fresh(rng, a, Some((-3.0, 3.0)), true);
            let t = params.fresh(rng, t, None, true);
            let tau = params.fresh(rng, tau, Some((0.3, 10.0)), true);
            format!("sigmoid({f}; {a}, {t}, {tau})")
        }
        1 => {
            let (f, lo, hi) = numeric_feature(rng);
            let (b, t) = (rng.gen_range(-1.0..1.0), rng.gen_range(lo..hi));
            let b = params.fresh(rng, b, None, true);
            let t = params.fresh(rng, t, None, true);
            format!("ramp({f}; {b}, {t})")
        }
        2 => {
            let (f, _, _) = numeric_feature(rng);
            let (a, b) = (rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0));
            let a = params.fresh(rng, a, None, true);
            let b = params.fresh(rng, b, None, true);
            format!("linear({f}; {a}, {b})")
        }
        3 => {
            let g = rng.gen_range(-1.5..1.5);
            let g = params.fresh(rng, g, Some((-2.5, 2.5)), true);
            format!("gate({}; {g})", gen_cond(rng, 1))
        }
        _ => {
            let c = rng.gen_range(-2.0..2.0);
            let c = params.fresh(rng, c, None, true);
            format!("const({c})")
        }
    }
}

const WORDS: &[&str] = &[
    "risk", "marker", "screen", "history", "burden", "protective", "late", "elevated", "combined",
];

pub fn gen_ruleset_source(rng: &mut ChaCha8Rng, n_rules: usize) -> String {
    let mut src = String::new();
    for idx in 0..n_rules {
        let mut params = ParamGen::new();
        let n_terms = rng.gen_range(1..=3);
        let terms: Vec<String> = (0..n_terms)
            .map(|_| {
                let n_factors = rng.gen_range(1..=2);
                let factors: Vec<String> =
                    (0..n_factors).map(|_| gen_factor(rng, &mut params)).collect();
                factors.join(" * ")
            })
            .collect();
        let _ = writeln!(src, "rule r{idx:02} {{");
        if rng.gen_bool(0.5) {
            let a = WORDS[rng.gen_range(0..WORDS.len())];
            let b = WORDS[rng.gen_range(0..WORDS.len())];
            let _ = writeln!(src, "  describe \"{a} {b}\"");
        }
        let _ = writeln!(src, "  when {}", gen_cond(rng, 0));
        let _ = writeln!(src, "  effect {}", terms.join(" + "));
        let _ = writeln!(src, "  params {{");
        for decl in &params.decls {
            let _ = writeln!(src, "    {decl}");
        }
        let _ = writeln!(src, "  }}");
        let _ = writeln!(src, "}}");
    }
    src
}

pub fn gen_record(rng: &mut ChaCha8Rng, id: &str, presence: f64) -> PatientRecord {
    let mut z = PatientRecord::new(id);
    for (name, lo, hi) in NUMERIC_FEATURES {
        if rng.gen_bool(presence) {
            z.set_numeric(name, rng.gen_range(*lo..*hi));
        }
    }
    for (name, values) in CATEGORICAL_FEATURES {
        if rng.gen_bool(presence) {
            z.set_categorical(name, values[rng.gen_range(0..values.len())]);
        }
    }
    z
}

/// A generated ruleset, record, and parameter store ready to evaluate.
pub struct Scenario {
    pub source: String,
    pub rules: RuleSet,
    pub record: PatientRecord,
    pub store: ParameterStore,
}

pub fn build_scenario(seed: u64, n_rules: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = gen_ruleset_source(&mut rng, n_rules);
    let rules = parse_ruleset(&source, &test_schema()).expect("generated source parses");
    let mut record = gen_record(&mut rng, &format!("g{seed}"), 0.85);
    let mut store = ParameterStore::new();
    register_balance(&mut store, false).unwrap();
    store.register_rule_params(&rules).unwrap();
    store.set(BALANCE_PARAM, rng.gen_range(0.2..2.0)).unwrap();
    nudge_off_ramp_kinks(&rules, &store, &mut record);
    Scenario { source, rules, record, store }
}

/// Moves record features away from any ramp threshold so small parameter
/// perturbations cannot cross the rectifier's kink.
fn nudge_off_ramp_kinks(rules: &RuleSet, store: &ParameterStore, record: &mut PatientRecord) {
    for _ in 0..8 {
        let mut clean = true;
        for rule in &rules.rules {
            for term in &rule.effect.terms {
                for factor in &term.factors {
                    if let Factor::Ramp { feature, threshold, .. } = factor {
                        let t = store.value(&rule.qualified(&threshold.0));
                        if let Some(z) = record.numeric(feature) {
                            if (z - t).abs() <= 1e-3 {
                                record.set_numeric(feature, z + 0.0173);
                                clean = false;
                            }
                        }
                    }
                }
            }
        }
        if clean {
            return;
        }
    }
    panic!("could not move record away from ramp kinks");
}

// ---------------------------------------------------------------------------
// Brute-force oracle: a direct recursive interpreter, independent of the
// tape-based evaluator under test.
// ---------------------------------------------------------------------------

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Kleene three-valued condition evaluation; `None` means unknown.
pub fn oracle_condition(cond: &CondExpr, z: &PatientRecord) -> Option<bool> {
    match cond {
        CondExpr::Any(parts) => {
            let vals: Vec<_> = parts.iter().map(|p| oracle_condition(p, z)).collect();
            if vals.iter().any(|v| *v == Some(true)) {
                Some(true)
            } else if vals.iter().all(|v| *v == Some(false)) {
                Some(false)
            } else {
                None
            }
        }
        CondExpr::All(parts) => {
            let vals: Vec<_> = parts.iter().map(|p| oracle_condition(p, z)).collect();
            if vals.iter().any(|v| *v == Some(false)) {
                Some(false)
            } else if vals.iter().all(|v| *v == Some(true)) {
                Some(true)
            } else {
                None
            }
        }
        CondExpr::Not(inner) => oracle_condition(inner, z).map(|b| !b),
        CondExpr::Present(f) => Some(z.has(f)),
        CondExpr::Cmp { feature, op, value } => match (z.get(feature), value) {
            (None, _) => None,
            (Some(FeatureValue::Numeric(a)), Literal::Number(b)) => Some(match op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
            }),
            (Some(FeatureValue::Categorical(a)), Literal::Str(b)) => match op {
                CmpOp::Eq => Some(a == b),
                CmpOp::Ne => Some(a != b),
                _ => None,
            },
            _ => None,
        },
    }
}

pub fn oracle_rule_applies(rule: &Rule, z: &PatientRecord) -> bool {
    oracle_condition(&rule.condition, z) == Some(true)
        && rule.effect.features().iter().all(|f| z.has(f))
}

pub fn oracle_effect(rule: &Rule, z: &PatientRecord, store: &ParameterStore) -> f64 {
    let pv = |name: &str| store.value(&rule.qualified(name));
    let fv = |name: &str| match z.get(name) {
        Some(FeatureValue::Numeric(v)) => *v,
        other => panic!("oracle read feature `{name}`: {other:?}"),
    };
    let mut total = 0.0;
    let mut term_values = Vec::new();
    for term in &rule.effect.terms {
        let factors: Vec<f64> = term
            .factors
            .iter()
            .map(|factor| match factor {
                Factor::Sigmoid { feature, scale, threshold, smoothness } => {
                    let (a, t, tau) = (pv(&scale.0), pv(&threshold.0), pv(&smoothness.0));
                    a * logistic((fv(feature) - t) / tau)
                }
                Factor::Ramp { feature, slope, threshold } => {
                    pv(&slope.0) * (fv(feature) - pv(&threshold.0)).max(0.0)
                }
                Factor::Linear { feature, weight, offset } => {
                    pv(&weight.0) * fv(feature) + pv(&offset.0)
                }
                Factor::Gate { condition, value } => {
                    let open = oracle_condition(condition, z) == Some(true);
                    pv(&value.0) * if open { 1.0 } else { 0.0 }
                }
                Factor::Const { value } => pv(&value.0),
            })
            .collect();
        term_values.push(if factors.len() == 1 { factors[0] } else { factors.iter().product() });
    }
    if term_values.len() == 1 {
        return term_values[0];
    }
    for v in term_values {
        total += v;
    }
    total
}

/// Active rule ids (declaration order) and the total evidence shift.
pub fn oracle_delta(rs: &RuleSet, z: &PatientRecord, store: &ParameterStore) -> (Vec<String>, f64) {
    let mut ids = Vec::new();
    let mut total = 0.0;
    for rule in &rs.rules {
        if oracle_rule_applies(rule, z) {
            total += oracle_effect(rule, z, store);
            ids.push(rule.id.clone());
        }
    }
    (ids, total)
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub const FD_H: f64 = 1e-5;

/// Central difference of `f` with respect to one stored parameter.
pub fn central_difference(
    store: &mut ParameterStore,
    name: &str,
    mut f: impl FnMut(&ParameterStore) -> f64,
) -> f64 {
    let v0 = store.value(name);
    store.set(name, v0 + FD_H).unwrap();
    let hi = f(store);
    store.set(name, v0 - FD_H).unwrap();
    let lo = f(store);
    store.set(name, v0).unwrap();
    (hi - lo) / (2.0 * FD_H)
}

/// Gradient agreement check. Below the noise floor of a central difference
/// the relative error is meaningless, so tiny gradients compare absolutely.
pub fn grad_close(analytic: f64, fd: f64, tol: f64) -> bool {
    let scale = analytic.abs().max(fd.abs());
    if scale < 1e-6 {
        (analytic - fd).abs() < 1e-8
    } else {
        (analytic - fd).abs() / scale <= tol
    }
}

pub fn delta_of(rules: &RuleSet, record: &PatientRecord, store: &ParameterStore) -> f64 {
    adjust(rules, record, LogitPair { cn: 0.0, ad: 0.0 }, store).delta_total
}

/// One end-to-end loss case: imaging features through the network, adjusted
/// by the rules, scored with weighted cross-entropy.
pub struct LossCase<'a> {
    pub model: &'a MlpModel,
    pub rules: &'a RuleSet,
    pub record: &'a PatientRecord,
    pub features: &'a [f64],
    pub label: u8,
    pub class_weights: (f64, f64),
}

pub fn loss_value(case: &LossCase, store: &ParameterStore) -> f64 {
    let weights = case.model.snapshot(store);
    let y = case.model.forward_dense(&weights, case.features);
    let out = adjust(case.rules, case.record, y, store).output_logits;
    cross_entropy(&[(softmax(out), case.label)], case.class_weights)
}

pub fn loss_gradients(case: &LossCase, store: &ParameterStore) -> BTreeMap<String, f64> {
    let weights = case.model.snapshot(store);
    let trace = case.model.forward_trace(&weights, case.features);
    let (adj, sym) = adjust_with_grad(case.rules, case.record, trace.logits(), store);
    let w_label = if case.label == 0 { case.class_weights.0 } else { case.class_weights.1 };
    let (d_cn, d_ad) = ce_grad_logits(adj.output_logits, case.label, w_label);
    let mut grads: BTreeMap<String, f64> = BTreeMap::new();
    for (name, (g_cn, g_ad)) in &sym {
        *grads.entry(name.clone()).or_insert(0.0) += d_cn * g_cn + d_ad * g_ad;
    }
    let mut dense = case.model.zero_grads();
    case.model.backward_trace(&weights, &trace, (d_cn, d_ad), &mut dense);
    case.model.grads_to_map(&dense, &mut grads);
    grads
}
