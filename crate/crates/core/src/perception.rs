//! The perception stand-in: a small MLP from imaging-derived feature vectors
//! to (CN, AD) logits, plus softmax/cross-entropy and an adapter for logits
//! produced by an external backbone.
//!
//! Network weights live in the shared [`ParameterStore`] under `mlp.*`, so
//! the same optimizer drives them and the rule parameters. The hot training
//! path copies them once per batch into a dense [`MlpWeights`] snapshot and
//! runs forward/backward on plain arrays.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ParameterStore, StoreError};
use crate::reasoner::PatientRecord;

/// (CN, AD) logits.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LogitPair {
    pub cn: f64,
    pub ad: f64,
}

/// One training/evaluation unit: structured record, imaging feature vector,
/// and optionally logits precomputed by an external backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSample {
    pub record: PatientRecord,
    pub imaging_features: Vec<f64>,
    pub external_logits: Option<LogitPair>,
}

/// Feedforward ReLU network; the last layer is affine with 2 outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    names: Vec<String>,
}

/// Dense copy of the network weights, row-major `[out][in]` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

/// Layer activations cached by a forward pass, for backprop.
pub struct MlpTrace {
    /// `inputs[0]` is the sample; `inputs[l]` the post-ReLU input of layer l.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of every layer.
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn logits(&self) -> LogitPair {
        let out = &self.pre[self.pre.len() - 1];
        LogitPair { cn: out[0], ad: out[1] }
    }
}

impl MlpModel {
    /// `dims` runs input → hidden… → 2.
    pub fn new(dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(*dims.last().unwrap(), 2, "output layer must have 2 units");
        assert!(dims.iter().all(|&d| d > 0), "zero-width layer");
        let mut names = Vec::new();
        for l in 0..dims.len() - 1 {
            for r in 0..dims[l + 1] {
                for c in 0..dims[l] {
                    names.push(format!("mlp.l{l}.w.{r}.{c}"));
                }
            }
            for r in 0..dims[l + 1] {
                names.push(format!("mlp.l{l}.b.{r}"));
            }
        }
        Self { dims, names }
    }

    /// The default topology: `input_dim → 32 → 16 → 2`.
    pub fn default_for_input(input_dim: usize) -> Self {
        Self::new(vec![input_dim, 32, 16, 2])
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Qualified store names of every weight and bias, in fixed order.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Registers all weights, Xavier-uniform from the seed; biases start at 0.
    pub fn register_params(&self, store: &mut ParameterStore, seed: u64) -> Result<(), StoreError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    store.register(
                        &format!("mlp.l{l}.w.{r}.{c}"),
                        dist.sample(&mut rng),
                        None,
                        false,
                    )?;
                }
            }
            for r in 0..fan_out {
                store.register(&format!("mlp.l{l}.b.{r}"), 0.0, None, false)?;
            }
        }
        Ok(())
    }

    /// Copies `mlp.*` values out of the store for dense evaluation.
    pub fn snapshot(&self, store: &ParameterStore) -> MlpWeights {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let mut wl = Vec::with_capacity(fan_in * fan_out);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    wl.push(store.value(&format!("mlp.l{l}.w.{r}.{c}")));
                }
            }
            let bl = (0..fan_out)
                .map(|r| store.value(&format!("mlp.l{l}.b.{r}")))
                .collect();
            w.push(wl);
            b.push(bl);
        }
        MlpWeights { w, b }
    }

    /// Logits for one feature vector, reading weights from the store.
    pub fn forward(&self, features: &[f64], store: &ParameterStore) -> LogitPair {
        self.forward_dense(&self.snapshot(store), features)
    }

    pub fn forward_dense(&self, weights: &MlpWeights, features: &[f64]) -> LogitPair {
        self.forward_trace(weights, features).logits()
    }

    /// Forward pass that keeps activations for [`Self::backward_trace`].
    pub fn forward_trace(&self, weights: &MlpWeights, features: &[f64]) -> MlpTrace {
        assert_eq!(
            features.len(),
            self.dims[0],
            "input has {} features, model expects {}",
            features.len(),
            self.dims[0]
        );
        let layers = self.dims.len() - 1;
        let mut inputs = vec![features.to_vec()];
        let mut pre = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let x = &inputs[l];
            let mut out = vec![0.0; fan_out];
            for r in 0..fan_out {
                let row = &weights.w[l][r * fan_in..(r + 1) * fan_in];
                let mut acc = weights.b[l][r];
                for c in 0..fan_in {
                    acc += row[c] * x[c];
                }
                out[r] = acc;
            }
            pre.push(out.clone());
            if l + 1 < layers {
                for v in &mut out {
                    *v = v.max(0.0);
                }
                inputs.push(out);
            }
        }
        MlpTrace { inputs, pre }
    }

    /// Backprop from logit gradients to dense weight/bias gradients, added
    /// into `grads` (same shapes as the snapshot).
    pub fn backward_trace(
        &self,
        weights: &MlpWeights,
        trace: &MlpTrace,
        d_logits: (f64, f64),
        grads: &mut MlpWeights,
    ) {
        let layers = self.dims.len() - 1;
        let mut d_out = vec![d_logits.0, d_logits.1];
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let x = &trace.inputs[l];
            let mut d_in = vec![0.0; fan_in];
            for r in 0..fan_out {
                let g = d_out[r];
                if g != 0.0 {
                    let row = &weights.w[l][r * fan_in..(r + 1) * fan_in];
                    let grow = &mut grads.w[l][r * fan_in..(r + 1) * fan_in];
                    for c in 0..fan_in {
                        grow[c] += g * x[c];
                        d_in[c] += g * row[c];
                    }
                    grads.b[l][r] += g;
                }
            }
            if l > 0 {
                // ReLU gate: activations cached pre-activation.
                for (c, d) in d_in.iter_mut().enumerate() {
                    if trace.pre[l - 1][c] <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            d_out = d_in;
        }
    }

    /// Zero-filled gradient buffers matching the snapshot shapes.
    pub fn zero_grads(&self) -> MlpWeights {
        let w = (0..self.dims.len() - 1)
            .map(|l| vec![0.0; self.dims[l] * self.dims[l + 1]])
            .collect();
        let b = (0..self.dims.len() - 1)
            .map(|l| vec![0.0; self.dims[l + 1]])
            .collect();
        MlpWeights { w, b }
    }

    /// Flattens dense gradients into the name-keyed map the optimizer takes.
    pub fn grads_to_map(&self, dense: &MlpWeights, out: &mut BTreeMap<String, f64>) {
        let mut idx = 0;
        for l in 0..self.dims.len() - 1 {
            for v in &dense.w[l] {
                out.insert(self.names[idx].clone(), *v);
                idx += 1;
            }
            for v in &dense.b[l] {
                out.insert(self.names[idx].clone(), *v);
                idx += 1;
            }
        }
    }
}

/// Class probabilities from logits, in the max-subtraction form that cannot
/// overflow for any finite input.
pub fn softmax(y: LogitPair) -> (f64, f64) {
    let m = y.cn.max(y.ad);
    let e_cn = (y.cn - m).exp();
    let e_ad = (y.ad - m).exp();
    let z = e_cn + e_ad;
    (e_cn / z, e_ad / z)
}

/// Mean weighted cross-entropy over a batch of (probabilities, label).
/// The log argument is clamped below at 1e-12, so confidently wrong
/// predictions yield a large finite loss. Panics on an empty batch.
pub fn cross_entropy(batch: &[((f64, f64), u8)], class_weights: (f64, f64)) -> f64 {
    assert!(!batch.is_empty(), "cross_entropy of an empty batch");
    let mut total = 0.0;
    for &((p_cn, p_ad), label) in batch {
        let (p, w) = if label == 0 {
            (p_cn, class_weights.0)
        } else {
            (p_ad, class_weights.1)
        };
        total += -w * p.max(1e-12).ln();
    }
    total / batch.len() as f64
}

/// Per-sample gradient of weighted softmax cross-entropy with respect to the
/// logits (before batch averaging): `w_label * (p - onehot)`.
pub fn ce_grad_logits(y: LogitPair, label: u8, class_weight: f64) -> (f64, f64) {
    let (p_cn, p_ad) = softmax(y);
    let (t_cn, t_ad) = if label == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
    (class_weight * (p_cn - t_cn), class_weight * (p_ad - t_ad))
}

/// Inverse-frequency class weights normalized to mean 1. Falls back to unit
/// weights when either class is absent.
pub fn class_weights(labels: impl IntoIterator<Item = u8>) -> (f64, f64) {
    let mut n = [0usize; 2];
    for label in labels {
        n[usize::from(label != 0)] += 1;
    }
    if n[0] == 0 || n[1] == 0 {
        return (1.0, 1.0);
    }
    let raw = [1.0 / n[0] as f64, 1.0 / n[1] as f64];
    let mean = (raw[0] + raw[1]) / 2.0;
    (raw[0] / mean, raw[1] / mean)
}

#[derive(Debug, Error)]
pub enum LogitsFileError {
    #[error("reading logits file: {0}")]
    Io(#[from] std::io::Error),
    #[error("logits row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("duplicate id `{0}` in logits file")]
    DuplicateId(String),
}

/// Loads a `id,logit_cn,logit_ad` CSV into an id-keyed map.
pub fn load_external_logits(path: &Path) -> Result<BTreeMap<String, LogitPair>, LogitsFileError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                LogitsFileError::Io(std::io::Error::other(e.to_string()))
            }
            _ => LogitsFileError::Malformed { row: 0, reason: e.to_string() },
        })?;
    {
        let headers = reader
            .headers()
            .map_err(|e| LogitsFileError::Malformed { row: 0, reason: e.to_string() })?;
        let expected = ["id", "logit_cn", "logit_ad"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(LogitsFileError::Malformed {
                row: 0,
                reason: format!("header must be `{}`", expected.join(",")),
            });
        }
    }
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 1;
        let row = row.map_err(|e| LogitsFileError::Malformed {
            row: rownum,
            reason: e.to_string(),
        })?;
        if row.len() != 3 {
            return Err(LogitsFileError::Malformed {
                row: rownum,
                reason: format!("expected 3 fields, found {}", row.len()),
            });
        }
        let id = row[0].to_string();
        let parse = |field: &str, name: &str| -> Result<f64, LogitsFileError> {
            let v: f64 = field.parse().map_err(|_| LogitsFileError::Malformed {
                row: rownum,
                reason: format!("bad {name} `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(LogitsFileError::Malformed {
                    row: rownum,
                    reason: format!("non-finite {name}"),
                });
            }
            Ok(v)
        };
        let cn = parse(&row[1], "logit_cn")?;
        let ad = parse(&row[2], "logit_ad")?;
        if out.insert(id.clone(), LogitPair { cn, ad }).is_some() {
            return Err(LogitsFileError::DuplicateId(id));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn zero_network_outputs_zero_logits() {
        let model = MlpModel::new(vec![3, 4, 2]);
        let mut store = ParameterStore::new();
        for name in model.param_names() {
            store.register(name, 0.0, None, false).unwrap();
        }
        let y = model.forward(&[1.0, -2.0, 3.0], &store);
        assert_eq!((y.cn, y.ad), (0.0, 0.0));
    }

    #[test]
    fn identity_single_layer_passes_inputs_through() {
        let model = MlpModel::new(vec![2, 2]);
        let mut store = ParameterStore::new();
        for name in model.param_names() {
            store.register(name, 0.0, None, false).unwrap();
        }
        store.set("mlp.l0.w.0.0", 1.0).unwrap();
        store.set("mlp.l0.w.1.1", 1.0).unwrap();
        let y = model.forward(&[0.7, -1.9], &store);
        assert_eq!((y.cn, y.ad), (0.7, -1.9));
    }

    #[test]
    fn forward_matches_a_direct_matrix_oracle() {
        let model = MlpModel::new(vec![4, 5, 3, 2]);
        let mut store = ParameterStore::new();
        model.register_params(&mut store, 1337).unwrap();
        let x = [0.25, -1.5, 0.75, 2.0];

        // Independent evaluation straight off the store, one layer at a time.
        let mut h: Vec<f64> = x.to_vec();
        let dims = [4usize, 5, 3, 2];
        for l in 0..3 {
            let mut next = Vec::new();
            for r in 0..dims[l + 1] {
                let mut acc = store.value(&format!("mlp.l{l}.b.{r}"));
                for (c, hv) in h.iter().enumerate() {
                    acc += store.value(&format!("mlp.l{l}.w.{r}.{c}")) * hv;
                }
                next.push(if l < 2 { acc.max(0.0) } else { acc });
            }
            h = next;
        }

        let y = model.forward(&x, &store);
        assert!((y.cn - h[0]).abs() < 1e-12);
        assert!((y.ad - h[1]).abs() < 1e-12);
    }

    #[test]
    fn initialization_is_seed_deterministic_and_bounded() {
        let model = MlpModel::default_for_input(8);
        let mut a = ParameterStore::new();
        let mut b = ParameterStore::new();
        model.register_params(&mut a, 42).unwrap();
        model.register_params(&mut b, 42).unwrap();
        for name in model.param_names() {
            assert_eq!(a.value(name).to_bits(), b.value(name).to_bits());
        }
        let bound = (6.0f64 / (8 + 32) as f64).sqrt();
        for r in 0..32 {
            for c in 0..8 {
                let v = a.value(&format!("mlp.l0.w.{r}.{c}"));
                assert!(v.abs() <= bound);
            }
        }
        let mut other = ParameterStore::new();
        model.register_params(&mut other, 43).unwrap();
        assert_ne!(
            a.value("mlp.l0.w.0.0").to_bits(),
            other.value("mlp.l0.w.0.0").to_bits()
        );
    }

    #[test]
    fn softmax_basics() {
        let (p_cn, p_ad) = softmax(LogitPair { cn: 0.0, ad: 0.0 });
        assert_eq!((p_cn, p_ad), (0.5, 0.5));
        let (p_cn, p_ad) = softmax(LogitPair { cn: 3.7, ad: 3.7 });
        assert_eq!((p_cn, p_ad), (0.5, 0.5));
        // 1/(1 + e^{1.91}), evaluated independently beforehand.
        let (_, p_ad) = softmax(LogitPair { cn: 1.03, ad: -0.88 });
        assert!((p_ad - 0.12898085214623567).abs() < 1e-12, "{p_ad}");
    }

    #[test]
    fn softmax_is_stable_and_normalized_at_extremes() {
        for &(cn, ad) in &[(700.0, -700.0), (-700.0, 700.0), (700.0, 700.0), (0.0, -700.0)] {
            let (p_cn, p_ad) = softmax(LogitPair { cn, ad });
            assert!(p_cn.is_finite() && p_ad.is_finite());
            assert!(((p_cn + p_ad) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        assert_eq!(cross_entropy(&[((1.0, 0.0), 0)], (1.0, 1.0)), 0.0);
        let l = cross_entropy(&[((0.5, 0.5), 1)], (1.0, 1.0));
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        // -(ln 0.9 + ln 0.8)/2, evaluated independently beforehand.
        let l = cross_entropy(&[((0.9, 0.1), 0), ((0.2, 0.8), 1)], (1.0, 1.0));
        assert!((l - 0.164252033486018).abs() < 1e-15, "{l}");
    }

    #[test]
    fn cross_entropy_is_finite_on_confidently_wrong_predictions() {
        let l = cross_entropy(&[((1.0, 0.0), 1)], (1.0, 1.0));
        assert!(l.is_finite());
        assert!(l > 20.0);
    }

    #[test]
    fn class_weights_balance_and_normalize() {
        // 3 CN vs 1 AD: weights 0.5 and 1.5, mean 1.
        let (w_cn, w_ad) = class_weights([0, 0, 0, 1]);
        assert!((w_cn - 0.5).abs() < 1e-15);
        assert!((w_ad - 1.5).abs() < 1e-15);
        assert_eq!(class_weights([0, 0]), (1.0, 1.0));
        assert_eq!(class_weights([0, 1]), (1.0, 1.0));
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let y = LogitPair { cn: 0.4, ad: -1.1 };
        for label in [0u8, 1u8] {
            let w = 1.3;
            let (g_cn, g_ad) = ce_grad_logits(y, label, w);
            let h = 1e-6;
            let loss = |y: LogitPair| cross_entropy(&[((softmax(y)), label)], (w, w));
            let fd_cn = (loss(LogitPair { cn: y.cn + h, ad: y.ad })
                - loss(LogitPair { cn: y.cn - h, ad: y.ad }))
                / (2.0 * h);
            let fd_ad = (loss(LogitPair { cn: y.cn, ad: y.ad + h })
                - loss(LogitPair { cn: y.cn, ad: y.ad - h }))
                / (2.0 * h);
            assert!((g_cn - fd_cn).abs() < 1e-8, "label {label}: {g_cn} vs {fd_cn}");
            assert!((g_ad - fd_ad).abs() < 1e-8, "label {label}: {g_ad} vs {fd_ad}");
        }
    }

    #[test]
    fn backprop_matches_finite_differences_on_random_networks() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (trial, dims) in [vec![3, 2], vec![4, 8, 2], vec![5, 32, 16, 2]]
            .into_iter()
            .enumerate()
        {
            let model = MlpModel::new(dims.clone());
            let mut store = ParameterStore::new();
            model.register_params(&mut store, 100 + trial as u64).unwrap();
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let label = u8::from(trial % 2 == 1);

            let weights = model.snapshot(&store);
            let trace = model.forward_trace(&weights, &x);
            let out = &trace.pre[trace.pre.len() - 1];
            let d_logits = ce_grad_logits(LogitPair { cn: out[0], ad: out[1] }, label, 1.0);
            let mut dense = model.zero_grads();
            model.backward_trace(&weights, &trace, d_logits, &mut dense);
            let mut grads = BTreeMap::new();
            model.grads_to_map(&dense, &mut grads);

            let h = 1e-5;
            let loss = |store: &ParameterStore| {
                let y = model.forward(&x, store);
                cross_entropy(&[((softmax(y)), label)], (1.0, 1.0))
            };
            for name in model.param_names() {
                let base = store.value(name);
                let mut plus = store.clone();
                plus.set(name, base + h).unwrap();
                let mut minus = store.clone();
                minus.set(name, base - h).unwrap();
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let g = grads[name];
                let denom = fd.abs().max(1e-4);
                assert!(
                    ((g - fd) / denom).abs() <= 1e-4,
                    "{name}: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn external_logits_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.csv");

        std::fs::write(&path, "id,logit_cn,logit_ad\n").unwrap();
        assert!(load_external_logits(&path).unwrap().is_empty());

        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "id,logit_cn,logit_ad").unwrap();
        writeln!(f, "s001,1.03,-0.88").unwrap();
        drop(f);
        let map = load_external_logits(&path).unwrap();
        assert_eq!(map["s001"], LogitPair { cn: 1.03, ad: -0.88 });

        std::fs::write(&path, "id,logit_cn,logit_ad\ns1,0,0\ns1,1,1\n").unwrap();
        match load_external_logits(&path) {
            Err(LogitsFileError::DuplicateId(id)) => assert_eq!(id, "s1"),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }

        std::fs::write(&path, "id,logit_cn,logit_ad\ns1,abc,0\n").unwrap();
        assert!(matches!(
            load_external_logits(&path),
            Err(LogitsFileError::Malformed { row: 1, .. })
        ));

        std::fs::write(&path, "id,wrong,header\n").unwrap();
        assert!(matches!(
            load_external_logits(&path),
            Err(LogitsFileError::Malformed { row: 0, .. })
        ));
    }
}
