//! Cohort I/O and the synthetic-cohort simulator.
//!
//! Records travel as CSV (`id,diagnosis,<features...>`, empty cell =
//! missing); simulation configs as TOML. The simulator draws every sample
//! from its own counter-derived RNG stream, so output is reproducible
//! bit-for-bit for a given (spec, rules, seed) triple regardless of batch
//! size or platform.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{eval_effect, sigmoid, ParameterStore};
use crate::dsl::{FeatureKind, FeatureSchema, RuleSet};
use crate::perception::{load_external_logits, LogitPair, LogitsFileError, PatientSample};
use crate::reasoner::{rule_applies, FeatureValue, PatientRecord};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading records: {0}")]
    Io(#[from] std::io::Error),
    #[error("records row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("column `{0}` is not in the schema")]
    UnknownColumn(String),
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("row {row}: diagnosis `{value}` is not a recognized study arm")]
    UnknownDiagnosis { row: usize, value: String },
    #[error("record `{id}` is missing imaging feature `{feature}`")]
    MissingImaging { id: String, feature: String },
    #[error("external logits do not match the cohort: {0}")]
    LogitsMismatch(String),
    #[error(transparent)]
    Logits(#[from] LogitsFileError),
    #[error("simulation spec: {0}")]
    BadSpec(String),
    #[error("simulation spec: {0}")]
    SpecSyntax(#[from] toml::de::Error),
    #[error("writing json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Maps a study-arm diagnosis onto the binary screening target: CN, SMC and
/// EMCI count as cognitively normal, LMCI and AD as the disease class.
pub fn consolidate_label(diagnosis: &str) -> Option<u8> {
    match diagnosis {
        "CN" | "SMC" | "EMCI" => Some(0),
        "LMCI" | "AD" => Some(1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Ingested,
    Simulated { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub samples: Vec<PatientSample>,
    pub schema: FeatureSchema,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn imaging_dim(&self) -> usize {
        imaging_names(&self.schema).len()
    }
}

fn imaging_names(schema: &FeatureSchema) -> Vec<&str> {
    schema.names().filter(|n| n.starts_with("img_")).collect()
}

/// Reads a records CSV (plus optional external logits) against a schema.
pub fn load_cohort(
    records_path: &Path,
    schema: &FeatureSchema,
    logits_path: Option<&Path>,
) -> Result<Cohort, DataError> {
    let text = std::fs::read_to_string(records_path)?;
    let mut cohort = parse_records(&text, schema)?;
    if let Some(path) = logits_path {
        let logits = load_external_logits(path)?;
        attach_logits(&mut cohort, &logits)?;
    }
    Ok(cohort)
}

/// Parses records CSV text. Unknown columns are rejected; clinical columns
/// may be absent (those features are then missing everywhere) but every
/// imaging column must be present and filled.
pub fn parse_records(text: &str, schema: &FeatureSchema) -> Result<Cohort, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 2 || headers[0] != "id" || headers[1] != "diagnosis" {
        return Err(DataError::Malformed {
            row: 0,
            reason: "header must start with `id,diagnosis`".to_string(),
        });
    }
    let mut columns: Vec<(usize, String, FeatureKind)> = Vec::new();
    for (idx, name) in headers.iter().enumerate().skip(2) {
        let kind = schema
            .kind_of(name)
            .ok_or_else(|| DataError::UnknownColumn(name.clone()))?;
        if name.starts_with("img_") && kind != FeatureKind::Numeric {
            return Err(DataError::Malformed {
                row: 0,
                reason: format!("imaging column `{name}` must be numeric"),
            });
        }
        if columns.iter().any(|(_, n, _)| n == name) {
            return Err(DataError::Malformed {
                row: 0,
                reason: format!("column `{name}` appears twice"),
            });
        }
        columns.push((idx, name.clone(), kind));
    }
    let img_names = imaging_names(schema);
    for img in &img_names {
        if !columns.iter().any(|(_, n, _)| n == img) {
            return Err(DataError::Malformed {
                row: 0,
                reason: format!("missing imaging column `{img}`"),
            });
        }
    }

    let mut samples = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 1;
        let row = row.map_err(csv_err)?;
        let id = row.get(0).unwrap_or("");
        if id.is_empty() {
            return Err(DataError::Malformed {
                row: rownum,
                reason: "empty id".to_string(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(DataError::DuplicateId(id.to_string()));
        }
        let mut record = PatientRecord::new(id);
        let diagnosis = row.get(1).unwrap_or("");
        if !diagnosis.is_empty() {
            record.label =
                Some(consolidate_label(diagnosis).ok_or_else(|| DataError::UnknownDiagnosis {
                    row: rownum,
                    value: diagnosis.to_string(),
                })?);
        }
        let mut img_values: BTreeMap<&str, f64> = BTreeMap::new();
        for (idx, name, kind) in &columns {
            let cell = row.get(*idx).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            match kind {
                FeatureKind::Numeric => {
                    let v: f64 = cell.parse().map_err(|_| DataError::Malformed {
                        row: rownum,
                        reason: format!("`{cell}` is not a number (column `{name}`)"),
                    })?;
                    if !v.is_finite() {
                        return Err(DataError::Malformed {
                            row: rownum,
                            reason: format!("non-finite value in column `{name}`"),
                        });
                    }
                    if name.starts_with("img_") {
                        img_values.insert(name, v);
                    } else {
                        record.set_numeric(name, v);
                    }
                }
                FeatureKind::Categorical => record.set_categorical(name, cell),
            }
        }
        let mut imaging_features = Vec::with_capacity(img_names.len());
        for img in &img_names {
            match img_values.get(img) {
                Some(&v) => imaging_features.push(v),
                None => {
                    return Err(DataError::MissingImaging {
                        id: id.to_string(),
                        feature: img.to_string(),
                    })
                }
            }
        }
        samples.push(PatientSample { record, imaging_features, external_logits: None });
    }
    Ok(Cohort { samples, schema: schema.clone(), provenance: Provenance::Ingested })
}

fn csv_err(e: csv::Error) -> DataError {
    let row = e.position().map(|p| p.record() as usize).unwrap_or(0);
    DataError::Malformed { row, reason: e.to_string() }
}

fn attach_logits(
    cohort: &mut Cohort,
    logits: &BTreeMap<String, LogitPair>,
) -> Result<(), DataError> {
    let ids: std::collections::BTreeSet<&str> =
        cohort.samples.iter().map(|s| s.record.id.as_str()).collect();
    for id in logits.keys() {
        if !ids.contains(id.as_str()) {
            return Err(DataError::LogitsMismatch(format!("logits row for unknown id `{id}`")));
        }
    }
    for sample in &mut cohort.samples {
        match logits.get(&sample.record.id) {
            Some(&pair) => sample.external_logits = Some(pair),
            None => {
                return Err(DataError::LogitsMismatch(format!(
                    "no logits for id `{}`",
                    sample.record.id
                )))
            }
        }
    }
    Ok(())
}

/// Serializes a cohort back to records-CSV form. Floats print in shortest
/// round-trip notation, so a write/load cycle reproduces values exactly.
pub fn records_to_csv_string(cohort: &Cohort) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "diagnosis".to_string()];
    header.extend(cohort.schema.names().map(str::to_string));
    wtr.write_record(&header).expect("in-memory write");
    for sample in &cohort.samples {
        let mut row = vec![
            sample.record.id.clone(),
            match sample.record.label {
                Some(0) => "CN".to_string(),
                Some(_) => "AD".to_string(),
                None => String::new(),
            },
        ];
        let mut img_idx = 0;
        for name in cohort.schema.names() {
            if name.starts_with("img_") {
                row.push(format!("{}", sample.imaging_features[img_idx]));
                img_idx += 1;
            } else {
                row.push(match sample.record.get(name) {
                    Some(FeatureValue::Numeric(v)) => format!("{v}"),
                    Some(FeatureValue::Categorical(c)) => c.clone(),
                    None => String::new(),
                });
            }
        }
        wtr.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8 rows")
}

pub fn write_records_csv(cohort: &Cohort, path: &Path) -> Result<(), DataError> {
    Ok(std::fs::write(path, records_to_csv_string(cohort))?)
}

pub fn write_schema(schema: &FeatureSchema, path: &Path) -> Result<(), DataError> {
    Ok(std::fs::write(path, schema.to_text())?)
}

pub fn write_manifest(manifest: &SimManifest, path: &Path) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureSpec {
    Numeric {
        cn: Gaussian,
        ad: Gaussian,
        #[serde(default)]
        round: bool,
        #[serde(default)]
        clamp: Option<(f64, f64)>,
        #[serde(default)]
        missing_rate: f64,
    },
    Categorical {
        values: Vec<String>,
        cn: Vec<f64>,
        ad: Vec<f64>,
        #[serde(default)]
        missing_rate: f64,
    },
}

impl FeatureSpec {
    fn kind(&self) -> FeatureKind {
        match self {
            FeatureSpec::Numeric { .. } => FeatureKind::Numeric,
            FeatureSpec::Categorical { .. } => FeatureKind::Categorical,
        }
    }

    fn missing_rate(&self) -> f64 {
        match self {
            FeatureSpec::Numeric { missing_rate, .. } => *missing_rate,
            FeatureSpec::Categorical { missing_rate, .. } => *missing_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingSpec {
    pub dim: usize,
    pub separation: f64,
    #[serde(default = "default_one")]
    pub strength: f64,
}

/// Generative description of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    pub prior_ad: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_one")]
    pub rule_strength: f64,
    /// Optional path to the rule file whose effects enter the ground-truth
    /// risk; callers fall back to the built-in rules when absent.
    #[serde(default)]
    pub truth_rules: Option<String>,
    pub imaging: ImagingSpec,
    pub features: BTreeMap<String, FeatureSpec>,
}

fn default_n_samples() -> usize {
    2000
}

fn default_one() -> f64 {
    1.0
}

impl SimSpec {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let spec: SimSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// The built-in cohort description shipped with the crate.
    pub fn default_spec() -> Self {
        Self::parse(crate::assets::DEFAULT_SIM_SPEC).expect("embedded spec is valid")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::BadSpec(msg));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".to_string());
        }
        if !(self.prior_ad > 0.0 && self.prior_ad < 1.0) {
            return bad(format!("prior_ad {} must lie strictly inside (0, 1)", self.prior_ad));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad(format!("label_noise {} must lie in [0, 0.5]", self.label_noise));
        }
        if !self.rule_strength.is_finite() {
            return bad("rule_strength must be finite".to_string());
        }
        if self.imaging.dim == 0 {
            return bad("imaging.dim must be positive".to_string());
        }
        if !(self.imaging.separation.is_finite() && self.imaging.separation >= 0.0) {
            return bad("imaging.separation must be finite and non-negative".to_string());
        }
        if !self.imaging.strength.is_finite() {
            return bad("imaging.strength must be finite".to_string());
        }
        if self.features.is_empty() {
            return bad("at least one clinical feature is required".to_string());
        }
        for (name, feature) in &self.features {
            if !valid_ident(name) {
                return bad(format!("feature name `{name}` is not an identifier"));
            }
            if name == "id" || name == "diagnosis" {
                return bad(format!("feature name `{name}` collides with a records column"));
            }
            if name.starts_with("img_") {
                return bad(format!("feature name `{name}` uses the reserved imaging prefix"));
            }
            let rate = feature.missing_rate();
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("feature `{name}`: missing_rate {rate} must lie in [0, 1)"));
            }
            match feature {
                FeatureSpec::Numeric { cn, ad, clamp, .. } => {
                    for g in [cn, ad] {
                        if !(g.mean.is_finite() && g.sd.is_finite() && g.sd > 0.0) {
                            return bad(format!("feature `{name}`: needs finite mean and sd > 0"));
                        }
                    }
                    if let Some((lo, hi)) = clamp {
                        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                            return bad(format!("feature `{name}`: clamp bounds are inverted"));
                        }
                    }
                }
                FeatureSpec::Categorical { values, cn, ad, .. } => {
                    if values.is_empty() {
                        return bad(format!("feature `{name}`: no category values"));
                    }
                    let mut uniq = std::collections::BTreeSet::new();
                    for v in values {
                        if !uniq.insert(v) {
                            return bad(format!("feature `{name}`: duplicate value `{v}`"));
                        }
                    }
                    for (tag, weights) in [("cn", cn), ("ad", ad)] {
                        if weights.len() != values.len() {
                            return bad(format!(
                                "feature `{name}`: {tag} has {} weights for {} values",
                                weights.len(),
                                values.len()
                            ));
                        }
                        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                            return bad(format!("feature `{name}`: {tag} weights must be >= 0"));
                        }
                        if weights.iter().sum::<f64>() <= 0.0 {
                            return bad(format!("feature `{name}`: {tag} weights sum to zero"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Schema implied by the spec: clinical features in name order, then
    /// `img_0..img_{dim-1}`.
    pub fn schema(&self) -> FeatureSchema {
        let mut schema = FeatureSchema::new();
        for (name, feature) in &self.features {
            schema.declare(name, feature.kind()).expect("feature names are unique");
        }
        for k in 0..self.imaging.dim {
            schema
                .declare(&format!("img_{k}"), FeatureKind::Numeric)
                .expect("imaging prefix is reserved");
        }
        schema
    }
}

fn valid_ident(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Ground-truth diagnostics recorded alongside a simulated cohort.
///
/// `ref_acc_full` scores the generating risk itself against the sampled
/// labels; `ref_acc_imaging` scores a recalibrated imaging-only risk. Their
/// difference is the accuracy headroom that only the clinical features (via
/// the rules) can close.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub seed: u64,
    pub n_samples: usize,
    pub prior_configured: f64,
    pub prior_empirical: f64,
    pub label_noise: f64,
    pub intercept: f64,
    pub imaging_dim: usize,
    pub imaging_separation: f64,
    pub imaging_strength: f64,
    pub rule_strength: f64,
    pub ref_acc_full: f64,
    pub ref_acc_imaging: f64,
    pub bayes_gap: f64,
}

/// Draws a cohort of `spec.n_samples` patients.
///
/// Sample `i` consumes three dedicated RNG streams of the seed: stream `i`
/// for features, `2^32 + i` for the label draw, `2^33 + i` for the
/// missingness mask, so masking never perturbs feature values and labels
/// never perturb either. The risk intercept is calibrated by bisection so
/// the mean label probability matches `prior_ad`; rule effects are
/// evaluated on the complete record before masking.
pub fn simulate_cohort(
    spec: &SimSpec,
    rules: &RuleSet,
    seed: u64,
) -> Result<(Cohort, SimManifest), DataError> {
    spec.validate()?;
    let mut store = ParameterStore::new();
    store
        .register_rule_params(rules)
        .map_err(|e| DataError::BadSpec(format!("truth rules: {e}")))?;

    let n = spec.n_samples;
    let dim = spec.imaging.dim;
    let unit = 1.0 / (dim as f64).sqrt();
    let shift = spec.imaging.separation / 2.0;

    let mut records = Vec::with_capacity(n);
    let mut imaging = Vec::with_capacity(n);
    let mut bases = Vec::with_capacity(n);
    let mut projections = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let is_ad = rng.gen::<f64>() < spec.prior_ad;

        let mut record = PatientRecord::new(&format!("s{i:05}"));
        for (name, feature) in &spec.features {
            match feature {
                FeatureSpec::Numeric { cn, ad, round, clamp, .. } => {
                    let g = if is_ad { ad } else { cn };
                    let mut v: f64 =
                        Normal::new(g.mean, g.sd).expect("validated sd").sample(&mut rng);
                    if *round {
                        v = v.round();
                    }
                    if let Some((lo, hi)) = clamp {
                        v = v.clamp(*lo, *hi);
                    }
                    record.set_numeric(name, v);
                }
                FeatureSpec::Categorical { values, cn, ad, .. } => {
                    let weights = if is_ad { ad } else { cn };
                    record.set_categorical(name, draw_category(&mut rng, values, weights));
                }
            }
        }

        let sign = if is_ad { 1.0 } else { -1.0 };
        let mut x = Vec::with_capacity(dim);
        let mut proj = 0.0;
        for _ in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let v = z + sign * shift * unit;
            proj += v * unit;
            x.push(v);
        }

        let delta: f64 = rules
            .rules
            .iter()
            .filter(|r| rule_applies(r, &record))
            .map(|r| eval_effect(r, &record, &store))
            .sum();

        bases.push(spec.imaging.strength * proj + spec.rule_strength * delta);
        projections.push(spec.imaging.strength * proj);
        records.push(record);
        imaging.push(x);
    }

    let intercept = calibrate_intercept(&bases, spec.prior_ad);
    let intercept_imaging = calibrate_intercept(&projections, spec.prior_ad);

    let mut labels = Vec::with_capacity(n);
    for (i, base) in bases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1u64 << 32) + i as u64);
        let mut y = rng.gen::<f64>() < sigmoid(intercept + base);
        if rng.gen::<f64>() < spec.label_noise {
            y = !y;
        }
        labels.push(y as u8);
    }

    let correct = |score: f64, y: u8| ((score > 0.0) as u8 == y) as u32 as f64;
    let ref_acc_full = bases
        .iter()
        .zip(&labels)
        .map(|(b, &y)| correct(intercept + b, y))
        .sum::<f64>()
        / n as f64;
    let ref_acc_imaging = projections
        .iter()
        .zip(&labels)
        .map(|(p, &y)| correct(intercept_imaging + p, y))
        .sum::<f64>()
        / n as f64;

    let mut samples = Vec::with_capacity(n);
    for (i, (mut record, x)) in records.into_iter().zip(imaging).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1u64 << 33) + i as u64);
        for (name, feature) in &spec.features {
            if rng.gen::<f64>() < feature.missing_rate() {
                record.remove(name);
            }
        }
        record.label = Some(labels[i]);
        samples.push(PatientSample {
            record,
            imaging_features: x,
            external_logits: None,
        });
    }

    let manifest = SimManifest {
        seed,
        n_samples: n,
        prior_configured: spec.prior_ad,
        prior_empirical: labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64,
        label_noise: spec.label_noise,
        intercept,
        imaging_dim: dim,
        imaging_separation: spec.imaging.separation,
        imaging_strength: spec.imaging.strength,
        rule_strength: spec.rule_strength,
        ref_acc_full,
        ref_acc_imaging,
        bayes_gap: ref_acc_full - ref_acc_imaging,
    };
    let cohort =
        Cohort { samples, schema: spec.schema(), provenance: Provenance::Simulated { seed } };
    Ok((cohort, manifest))
}

fn draw_category<'a>(rng: &mut ChaCha8Rng, values: &'a [String], weights: &[f64]) -> &'a str {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (value, w) in values.iter().zip(weights) {
        u -= w;
        if u <= 0.0 {
            return value;
        }
    }
    values.last().expect("validated non-empty")
}

/// Finds `b` with mean sigmoid(b + base_i) = target by bisection; the mean
/// is strictly increasing in `b`, so 80 halvings pin it past f64 precision.
fn calibrate_intercept(bases: &[f64], target: f64) -> f64 {
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let mean =
            bases.iter().map(|b| sigmoid(mid + b)).sum::<f64>() / bases.len() as f64;
        if mean < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
