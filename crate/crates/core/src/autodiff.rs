//! Parameter storage and exact gradients for rule effects.
//!
//! Effects are tiny scalar expressions, so reverse-mode differentiation runs
//! on a per-call tape: the forward pass appends one node per effect factor
//! (plus product/sum combiners) with local partials cached, and a single
//! reverse sweep accumulates d(output)/d(parameter) for every unfrozen
//! parameter. Frozen parameters are folded into node values as constants and
//! never appear in gradients.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use thiserror::Error;

use crate::dsl::{EffectExpr, Factor, Rule, RuleSet};
use crate::reasoner::{eval_condition, PatientRecord, TriState};

/// Smallest smoothness the sigmoid primitive accepts; its argument divides
/// by this parameter, so the store keeps it strictly positive.
pub const MIN_SMOOTHNESS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamEntry {
    pub value: f64,
    pub bounds: Option<(f64, f64)>,
    pub frozen: bool,
}

impl ParamEntry {
    fn clamp(&mut self) {
        if let Some((lo, hi)) = self.bounds {
            self.value = self.value.clamp(lo, hi);
        }
    }
}

/// Every trainable scalar in the system — rule parameters under
/// `<rule_id>.<name>`, the balance factor `w`, and network weights — keyed by
/// qualified name, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, ParamEntry>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("parameter `{0}` registered twice")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{0}` is frozen")]
    Frozen(String),
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        value: f64,
        bounds: Option<(f64, f64)>,
        frozen: bool,
    ) -> Result<(), StoreError> {
        if self.entries.contains_key(name) {
            return Err(StoreError::Duplicate(name.to_string()));
        }
        let mut entry = ParamEntry { value, bounds, frozen };
        entry.clamp();
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    /// Registers every parameter of every rule under its qualified name.
    ///
    /// Parameters used in a sigmoid smoothness slot get their lower bound
    /// raised to at least [`MIN_SMOOTHNESS`] so the division stays defined.
    pub fn register_rule_params(&mut self, rules: &RuleSet) -> Result<(), StoreError> {
        for rule in &rules.rules {
            let smoothness = rule.effect.smoothness_params();
            for decl in &rule.params {
                let bounds = if smoothness.contains(&decl.name.as_str()) {
                    match decl.bounds {
                        Some((lo, hi)) => Some((lo.max(MIN_SMOOTHNESS), hi)),
                        None => Some((MIN_SMOOTHNESS, f64::INFINITY)),
                    }
                } else {
                    decl.bounds
                };
                self.register(&rule.qualified(&decl.name), decl.init, bounds, decl.frozen)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(|e| e.value)
    }

    /// Value of a known parameter; panics if `name` was never registered.
    pub fn value(&self, name: &str) -> f64 {
        match self.get(name) {
            Some(v) => v,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Sets a value directly (clamped to bounds). Used when restoring saved
    /// parameters; frozen entries are writable here by design.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), StoreError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| StoreError::Unknown(name.to_string()))?;
        entry.value = value;
        entry.clamp();
        Ok(())
    }

    /// Adds `delta` to each named parameter, then clamps to bounds.
    pub fn apply_update(&mut self, deltas: &BTreeMap<String, f64>) -> Result<(), StoreError> {
        for name in deltas.keys() {
            match self.entries.get(name) {
                None => return Err(StoreError::Unknown(name.clone())),
                Some(e) if e.frozen => return Err(StoreError::Frozen(name.clone())),
                Some(_) => {}
            }
        }
        for (name, delta) in deltas {
            let entry = self.entries.get_mut(name).unwrap();
            entry.value += delta;
            entry.clamp();
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn slot_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    fn by_slot(&self, slot: usize) -> (&str, &ParamEntry) {
        let (name, entry) = self.entries.get_index(slot).unwrap();
        (name.as_str(), entry)
    }
}

/// Append-only record of one effect evaluation. Node inputs always precede
/// the node itself, so a single reverse pass propagates adjoints exactly.
pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    value: f64,
    /// (input node, d value / d input), computed during the forward pass.
    deps: Vec<(usize, f64)>,
    /// Store slot when this node is an unfrozen parameter leaf.
    slot: Option<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, node: usize) -> f64 {
        self.nodes[node].value
    }

    fn leaf(&mut self, value: f64, slot: Option<usize>) -> usize {
        self.nodes.push(Node { value, deps: Vec::new(), slot });
        self.nodes.len() - 1
    }

    fn push(&mut self, value: f64, deps: Vec<(usize, f64)>) -> usize {
        self.nodes.push(Node { value, deps, slot: None });
        self.nodes.len() - 1
    }

    /// Adjoints of `root` with respect to every parameter leaf, summed per
    /// store slot.
    fn backward(&self, root: usize) -> BTreeMap<usize, f64> {
        let mut adjoint = vec![0.0; self.nodes.len()];
        adjoint[root] = 1.0;
        let mut grads = BTreeMap::new();
        for idx in (0..=root).rev() {
            let a = adjoint[idx];
            let node = &self.nodes[idx];
            if let Some(slot) = node.slot {
                *grads.entry(slot).or_insert(0.0) += a;
            }
            if a != 0.0 {
                for &(input, partial) in &node.deps {
                    adjoint[input] += a * partial;
                }
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Logistic function, computed in the branch that never exponentiates a
/// positive argument.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Value of a rule's effect at `z`.
///
/// Every feature the effect reads must be present in `z` (the reasoner
/// guarantees this by gating); a missing numeric read is a programming error
/// and panics. A gate whose condition cannot be decided contributes 0.
pub fn eval_effect(rule: &Rule, z: &PatientRecord, params: &ParameterStore) -> f64 {
    let mut tape = Tape::new();
    let root = record_effect(&mut tape, rule, z, params);
    tape.value(root)
}

/// Value and gradient of a rule's effect at `z`.
///
/// The gradient holds one entry per unfrozen parameter referenced by the
/// effect (zero entries included), keyed by qualified name. Frozen
/// parameters are absent.
pub fn eval_with_grad(
    rule: &Rule,
    z: &PatientRecord,
    params: &ParameterStore,
) -> (f64, BTreeMap<String, f64>) {
    let mut tape = Tape::new();
    let root = record_effect(&mut tape, rule, z, params);
    let by_slot = tape.backward(root);
    let mut grads: BTreeMap<String, f64> = BTreeMap::new();
    for pref in rule.effect.param_refs() {
        let qualified = rule.qualified(&pref.0);
        if !params.entry(&qualified).unwrap().frozen {
            grads.entry(qualified).or_insert(0.0);
        }
    }
    for (slot, g) in by_slot {
        let (name, _) = params.by_slot(slot);
        *grads.get_mut(name).unwrap() += g;
    }
    (tape.value(root), grads)
}

/// Records the full effect expression onto `tape`, returning the root node.
fn record_effect(
    tape: &mut Tape,
    rule: &Rule,
    z: &PatientRecord,
    params: &ParameterStore,
) -> usize {
    let effect: &EffectExpr = &rule.effect;
    let mut term_nodes = Vec::with_capacity(effect.terms.len());
    for term in &effect.terms {
        let factor_nodes: Vec<usize> = term
            .factors
            .iter()
            .map(|f| record_factor(tape, f, rule, z, params))
            .collect();
        if factor_nodes.len() == 1 {
            term_nodes.push(factor_nodes[0]);
        } else {
            let values: Vec<f64> = factor_nodes.iter().map(|&n| tape.value(n)).collect();
            let product: f64 = values.iter().product();
            let deps = factor_nodes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let others: f64 = values
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, v)| v)
                        .product();
                    (n, others)
                })
                .collect();
            term_nodes.push(tape.push(product, deps));
        }
    }
    if term_nodes.len() == 1 {
        term_nodes[0]
    } else {
        let sum: f64 = term_nodes.iter().map(|&n| tape.value(n)).sum();
        let deps = term_nodes.iter().map(|&n| (n, 1.0)).collect();
        tape.push(sum, deps)
    }
}

fn record_factor(
    tape: &mut Tape,
    factor: &Factor,
    rule: &Rule,
    z: &PatientRecord,
    params: &ParameterStore,
) -> usize {
    // Resolves one parameter argument: unfrozen parameters become tape
    // leaves, frozen ones fold to constants (slot None).
    let arg = |tape: &mut Tape, name: &str| -> (usize, f64) {
        let qualified = rule.qualified(name);
        let slot = params
            .slot_of(&qualified)
            .unwrap_or_else(|| panic!("unregistered parameter `{qualified}`"));
        let entry = params.by_slot(slot).1;
        let node = tape.leaf(entry.value, if entry.frozen { None } else { Some(slot) });
        (node, entry.value)
    };
    let feature_value = |name: &str| -> f64 {
        z.numeric(name)
            .unwrap_or_else(|| panic!("effect read missing or non-numeric feature `{name}`"))
    };

    match factor {
        Factor::Sigmoid { feature, scale, threshold, smoothness } => {
            let zf = feature_value(feature);
            let (a_n, a) = arg(tape, &scale.0);
            let (t_n, t) = arg(tape, &threshold.0);
            let (tau_n, tau) = arg(tape, &smoothness.0);
            let s = sigmoid((zf - t) / tau);
            let ds = s * (1.0 - s);
            let deps = vec![
                (a_n, s),
                (t_n, a * ds * (-1.0 / tau)),
                (tau_n, a * ds * (-(zf - t) / (tau * tau))),
            ];
            tape.push(a * s, deps)
        }
        Factor::Ramp { feature, slope, threshold } => {
            let zf = feature_value(feature);
            let (b_n, b) = arg(tape, &slope.0);
            let (t_n, t) = arg(tape, &threshold.0);
            let rect = (zf - t).max(0.0);
            // Subgradient 0 exactly at the kink.
            let active = zf - t > 0.0;
            let deps = vec![(b_n, rect), (t_n, if active { -b } else { 0.0 })];
            tape.push(b * rect, deps)
        }
        Factor::Linear { feature, weight, offset } => {
            let zf = feature_value(feature);
            let (a_n, _) = arg(tape, &weight.0);
            let (b_n, _) = arg(tape, &offset.0);
            let a = tape.value(a_n);
            let b = tape.value(b_n);
            tape.push(a * zf + b, vec![(a_n, zf), (b_n, 1.0)])
        }
        Factor::Gate { condition, value } => {
            let open = eval_condition(condition, z) == TriState::True;
            let (g_n, g) = arg(tape, &value.0);
            let indicator = if open { 1.0 } else { 0.0 };
            tape.push(g * indicator, vec![(g_n, indicator)])
        }
        Factor::Const { value } => {
            let (c_n, c) = arg(tape, &value.0);
            tape.push(c, vec![(c_n, 1.0)])
        }
    }
}
