//! Per-patient explanatory diagnostic reports.
//!
//! A [`DiagnosisReport`] is the structured record of one adjusted diagnosis:
//! which rules fired, how much each moved the logits, and what the final
//! decision was. It serializes to JSON as-is and renders to plain text either
//! from a deterministic template or with prose fetched from an external
//! text-generation service (falling back to the template on any failure).

use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::dsl::RuleSet;
use crate::perception::{softmax, LogitPair};
use crate::reasoner::{Adjustment, PatientRecord};

/// One activated rule's share of the symbolic adjustment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleContribution {
    pub id: String,
    pub description: Option<String>,
    /// Signed effect value contributed by this rule.
    pub delta: f64,
    /// `"toward AD"`, `"toward CN"`, or `"neutral"` for a zero effect.
    pub direction: &'static str,
    /// `|delta|` as a fraction of the summed absolute effects (0 when every
    /// active rule contributed exactly zero).
    pub influence: f64,
}

/// Structured explanatory report for a single patient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub patient_id: String,
    pub input_logits: LogitPair,
    /// Activated rules sorted by `|delta|` descending, ties by id.
    pub active_rules: Vec<RuleContribution>,
    pub delta_total: f64,
    pub w: f64,
    pub adjusted_logits: LogitPair,
    pub p_cn: f64,
    pub p_ad: f64,
    pub decision: &'static str,
    /// True when the adjustment flipped the perception model's decision.
    pub symbolic_override: bool,
    pub prose: Option<String>,
}

fn decide(y: LogitPair) -> &'static str {
    if y.ad > y.cn {
        "AD"
    } else {
        "CN"
    }
}

fn direction_of(delta: f64) -> &'static str {
    if delta > 0.0 {
        "toward AD"
    } else if delta < 0.0 {
        "toward CN"
    } else {
        "neutral"
    }
}

/// Assemble the structured report for an adjustment computed on `record`.
pub fn build_report(adj: &Adjustment, rules: &RuleSet, record: &PatientRecord) -> DiagnosisReport {
    let total_abs: f64 = adj.active.iter().map(|(_, d)| d.abs()).sum();
    let mut active: Vec<RuleContribution> = adj
        .active
        .iter()
        .map(|(id, delta)| RuleContribution {
            id: id.clone(),
            description: rules
                .rules
                .iter()
                .find(|r| r.id == *id)
                .and_then(|r| r.description.clone()),
            delta: *delta,
            direction: direction_of(*delta),
            influence: if total_abs > 0.0 { delta.abs() / total_abs } else { 0.0 },
        })
        .collect();
    active.sort_by(|a, b| {
        b.delta
            .abs()
            .total_cmp(&a.delta.abs())
            .then_with(|| a.id.cmp(&b.id))
    });

    let (p_cn, p_ad) = softmax(adj.output_logits);
    let decision = decide(adj.output_logits);
    DiagnosisReport {
        patient_id: record.id.clone(),
        input_logits: adj.input_logits,
        active_rules: active,
        delta_total: adj.delta_total,
        w: adj.w,
        adjusted_logits: adj.output_logits,
        p_cn,
        p_ad,
        decision,
        symbolic_override: decision != decide(adj.input_logits),
        prose: None,
    }
}

/// How [`render_text`] fills the narrative section.
pub enum RenderStyle<'a> {
    /// Deterministic text derived from the report alone.
    Template,
    /// Fetch prose from an external service, degrading to the template plus a
    /// notice when the call fails.
    External(&'a ExternalProseConfig),
}

/// Render the report as plain text. All numbers are printed with four decimal
/// places so they round-trip to the stored values at that precision.
pub fn render_text(report: &DiagnosisReport, style: RenderStyle<'_>) -> String {
    match style {
        RenderStyle::Template => template_text(report, report.prose.as_deref(), None),
        RenderStyle::External(cfg) => match fetch_external_prose(report, cfg) {
            Ok(text) => template_text(report, Some(&text), None),
            Err(err) => template_text(report, report.prose.as_deref(), Some(&err.to_string())),
        },
    }
}

fn template_text(r: &DiagnosisReport, prose: Option<&str>, notice: Option<&str>) -> String {
    let mut out = String::new();
    let title = format!("Diagnostic report for patient {}", r.patient_id);
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", "-".repeat(title.len()));
    let _ = writeln!(
        out,
        "Perception logits: CN {:.4}, AD {:.4}",
        r.input_logits.cn, r.input_logits.ad
    );
    out.push('\n');
    if r.active_rules.is_empty() {
        let _ = writeln!(
            out,
            "Activated rules: none — no symbolic adjustments applied; the decision \
             follows the perception output unchanged."
        );
    } else {
        let _ = writeln!(out, "Activated rules ({}):", r.active_rules.len());
        let width = r.active_rules.iter().map(|c| c.id.len()).max().unwrap_or(0);
        for c in &r.active_rules {
            let _ = writeln!(
                out,
                "  {:width$}  delta {:+.4}  influence {:.4}  {}",
                c.id, c.delta, c.influence, c.direction
            );
            if let Some(desc) = &c.description {
                let _ = writeln!(out, "  {:width$}  {}", "", desc);
            }
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "Symbolic adjustment: delta {:.4}, balance w {:.4}",
            r.delta_total, r.w
        );
    }
    let _ = writeln!(
        out,
        "Adjusted logits: CN {:.4}, AD {:.4}",
        r.adjusted_logits.cn, r.adjusted_logits.ad
    );
    let _ = writeln!(out, "Probabilities: CN {:.4}, AD {:.4}", r.p_cn, r.p_ad);
    if r.symbolic_override {
        let _ = writeln!(out, "Decision: {} (symbolic override of perception)", r.decision);
    } else {
        let _ = writeln!(out, "Decision: {}", r.decision);
    }
    if let Some(text) = prose {
        out.push('\n');
        let _ = writeln!(out, "Narrative:");
        let _ = writeln!(out, "{text}");
    }
    if let Some(reason) = notice {
        out.push('\n');
        let _ = writeln!(out, "Note: external prose unavailable ({reason}); template text only.");
    }
    out
}

/// Connection details for the optional prose-generation service.
#[derive(Debug, Clone)]
pub struct ExternalProseConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl ExternalProseConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(30),
        }
    }

    /// Read `NSAD_LLM_ENDPOINT` (required) and `NSAD_LLM_KEY` (optional).
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("NSAD_LLM_ENDPOINT").ok()?;
        let mut cfg = Self::new(endpoint);
        cfg.api_key = std::env::var("NSAD_LLM_KEY").ok();
        Some(cfg)
    }
}

#[derive(Debug, Error)]
pub enum ProseError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("service returned status {0}")]
    Status(u16),
}

/// POST the structured report to the service and return the text of its
/// `{"text": ...}` reply.
pub fn fetch_external_prose(
    report: &DiagnosisReport,
    cfg: &ExternalProseConfig,
) -> Result<String, ProseError> {
    #[derive(serde::Deserialize)]
    struct Reply {
        text: String,
    }

    let client = reqwest::blocking::Client::builder()
        .timeout(cfg.timeout)
        .build()?;
    let mut req = client.post(&cfg.endpoint).json(report);
    if let Some(key) = &cfg.api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send()?;
    if !resp.status().is_success() {
        return Err(ProseError::Status(resp.status().as_u16()));
    }
    Ok(resp.json::<Reply>()?.text)
}

/// Fill `report.prose` from the external service. The structured fields are
/// never modified, even on failure.
pub fn narrate(
    report: &mut DiagnosisReport,
    cfg: &ExternalProseConfig,
) -> Result<(), ProseError> {
    let text = fetch_external_prose(report, cfg)?;
    report.prose = Some(text);
    Ok(())
}
