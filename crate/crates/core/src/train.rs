//! Adam optimization and the supervised training loop: iterate
//! image/mask pairs at batch size 1, track per-epoch loss and IoU on the
//! train and test splits.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ioutil::atomic_write;
use crate::metrics::{report_volume, MetricsError, MetricsReport};
use crate::tensor::{Element, SplitMix64, Tape, Tensor, TensorError};
use crate::unet::Model;
use crate::volume::{binarize, Mask, Volume, VolumeError};

/// Which loss drives the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BceWithLogits,
    SoftDice,
}

/// Training arithmetic width. f32 is the training default; f64 exists for
/// verification runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_kind: LossKind,
    /// Probability cut for IoU evaluation during training.
    pub threshold: f64,
    pub seed: u64,
    pub precision: Precision,
    pub lr: f64,
    /// Seeded per-epoch sample shuffling; off by default so runs are
    /// directly comparable.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            loss_kind: LossKind::BceWithLogits,
            threshold: 0.5,
            seed: 0,
            precision: Precision::F32,
            lr: 1e-2,
            shuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Validation("epochs must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(TrainError::Validation(format!(
                "batch size {} unsupported; the pipeline trains at batch size 1",
                self.batch_size
            )));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(TrainError::Validation(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Validation(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Ordered list of (id, volume, mask) sample triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    samples: Vec<(String, Volume, Mask)>,
}

impl Dataset {
    pub fn new(
        split: Split,
        samples: Vec<(String, Volume, Mask)>,
    ) -> Result<Self, TrainError> {
        for (id, v, m) in &samples {
            if v.dims != m.dims {
                return Err(TrainError::Validation(format!(
                    "sample {id}: volume dims {:?} vs mask dims {:?}",
                    v.dims, m.dims
                )));
            }
        }
        Ok(Self { split, samples })
    }

    /// Loads every `<stem>_vol.srv` / `<stem>_mask.srv` pair in a
    /// directory, sorted by stem.
    pub fn from_dir(dir: &Path, split: Split) -> Result<Self, TrainError> {
        let mut stems: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(VolumeError::Io)? {
            let entry = entry.map_err(VolumeError::Io)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix("_vol.srv") {
                stems.push(stem.to_string());
            }
        }
        stems.sort();
        if stems.is_empty() {
            return Err(TrainError::Validation(format!(
                "no *_vol.srv samples in {}",
                dir.display()
            )));
        }
        let mut samples = Vec::with_capacity(stems.len());
        for stem in stems {
            let vol = crate::volume::read_srv(&dir.join(format!("{stem}_vol.srv")))?
                .into_volume()?;
            let mask_path = dir.join(format!("{stem}_mask.srv"));
            if !mask_path.exists() {
                return Err(TrainError::Validation(format!(
                    "sample {stem} has no matching {stem}_mask.srv"
                )));
            }
            let mask = crate::volume::read_srv(&mask_path)?.into_mask()?;
            samples.push((stem, vol, mask));
        }
        Self::new(split, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Volume, Mask)> {
        self.samples.iter()
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_iou: f64,
    pub test_iou: f64,
}

/// Per-epoch records, one per completed epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History(pub Vec<EpochRecord>);

impl History {
    /// JSON lines, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.0 {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), std::io::Error> {
        let body = self.to_jsonl();
        atomic_write(path, |w| w.write_all(body.as_bytes()))
    }
}

#[derive(Debug)]
pub enum TrainError {
    Validation(String),
    Tensor(TensorError),
    Volume(VolumeError),
    Metrics(MetricsError),
    /// Loss became NaN/Inf, with the position that produced it.
    NonFiniteLoss { epoch: usize, sample: String },
    /// A gradient buffer went non-finite before the optimizer step.
    NonFiniteGrad { path: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(s) => write!(f, "invalid training setup: {s}"),
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Volume(e) => write!(f, "{e}"),
            Self::Metrics(e) => write!(f, "{e}"),
            Self::NonFiniteLoss { epoch, sample } => {
                write!(f, "non-finite loss at epoch {epoch}, sample {sample}")
            }
            Self::NonFiniteGrad { path } => {
                write!(f, "non-finite gradient for parameter {path}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}
impl From<VolumeError> for TrainError {
    fn from(e: VolumeError) -> Self {
        Self::Volume(e)
    }
}
impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        Self::Metrics(e)
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam state: first/second moment buffers per parameter plus the shared
/// step count. Moments are kept in f64 regardless of the training width.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    slots: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            slots: HashMap::new(),
        }
    }
}

/// One bias-corrected Adam update over named parameter/gradient pairs.
/// Zero gradients leave parameters untouched at any step count.
pub fn adam_step<E: Element>(
    params: &mut [(String, &mut Tensor<E>)],
    grads: &HashMap<String, Vec<E>>,
    state: &mut AdamState,
) -> Result<(), TrainError> {
    // Validate everything before touching any parameter, so a failed step
    // leaves the model unchanged.
    for (path, t) in params.iter() {
        let g = grads.get(path).ok_or_else(|| {
            TrainError::Validation(format!("no gradient recorded for parameter {path}"))
        })?;
        if g.len() != t.data.len() {
            return Err(TrainError::Validation(format!(
                "gradient length {} vs parameter length {} for {path}",
                g.len(),
                t.data.len()
            )));
        }
        if g.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(TrainError::NonFiniteGrad { path: path.clone() });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (path, tensor) in params.iter_mut() {
        let g = &grads[path.as_str()];
        let (m, v) = state
            .slots
            .entry(path.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for i in 0..g.len() {
            let gi = g[i].as_f64();
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let delta = state.lr * mhat / (vhat.sqrt() + state.epsilon);
            tensor.data[i] = E::from_f64(tensor.data[i].as_f64() - delta);
        }
    }
    Ok(())
}

// ── Training loop ───────────────────────────────────────────────────

/// Split evaluation: per-sample reports plus the macro-averaged IoU.
#[derive(Debug, Clone)]
pub struct SplitEval {
    pub mean_iou: f64,
    pub reports: Vec<MetricsReport>,
}

/// Forward → sigmoid → threshold → confusion counts, per sample.
pub fn evaluate_split<E: Element>(
    model: &Model<E>,
    ds: &Dataset,
    threshold: f64,
) -> Result<SplitEval, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::Validation("cannot evaluate an empty split".into()));
    }
    let mut reports = Vec::with_capacity(ds.len());
    for (id, vol, gt) in ds.iter() {
        let mut tape = Tape::new();
        let x = tape.constant(vol.to_tensor::<E>());
        let logits = model.forward_infer(&mut tape, x)?;
        let probs = tape.sigmoid(logits);
        let prob_vol = Volume::from_tensor(tape.data(probs), vol.dims, vol.spacing_mm)?;
        let pred = binarize(&prob_vol, threshold)?;
        reports.push(report_volume(&pred, gt, id)?);
    }
    let mean_iou = reports.iter().map(|r| r.iou).sum::<f64>() / reports.len() as f64;
    Ok(SplitEval { mean_iou, reports })
}

/// Trains in place for `cfg.epochs` passes over `train_set` at batch
/// size 1, recording mean loss and train/test IoU after every epoch.
pub fn train<E: Element>(
    model: &mut Model<E>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Validation("training set is empty".into()));
    }
    let need = model.cfg.divisibility();
    for (id, vol, _) in train_set.iter().chain(test_set.iter()) {
        let (x, y, z) = vol.dims;
        if x % need != 0 || y % need != 0 || z % need != 0 {
            return Err(TrainError::Validation(format!(
                "sample {id} dims {:?} not divisible by {need} as the model requires",
                vol.dims
            )));
        }
    }

    let mut adam = AdamState::new(cfg.lr);
    let mut history = History::default();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if cfg.shuffle {
            let mut rng = SplitMix64::derive(cfg.seed, epoch as u64);
            for i in (1..order.len()).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                order.swap(i, j);
            }
        }

        let mut loss_sum = 0.0f64;
        for &si in &order {
            let (id, vol, mask) = &train_set.samples[si];
            let mut tape: Tape<E> = Tape::new();
            let x = tape.constant(vol.to_tensor::<E>());
            let target = tape.constant(mask.to_tensor::<E>());
            let (logits, bindings) = model.forward_train(&mut tape, x)?;
            let loss = match cfg.loss_kind {
                LossKind::BceWithLogits => tape.bce_with_logits_loss(logits, target)?,
                LossKind::SoftDice => tape.soft_dice_loss(logits, target)?,
            };
            let loss_val = tape.value(loss).as_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    sample: id.clone(),
                });
            }
            tape.backward(loss)?;

            let mut grads: HashMap<String, Vec<E>> = HashMap::with_capacity(bindings.len());
            for (path, tid) in &bindings {
                let g = tape.grad(*tid).ok_or_else(|| {
                    TrainError::Validation(format!("parameter {path} has no gradient"))
                })?;
                grads.insert(path.clone(), g.to_vec());
            }
            let mut params = model.trainable_entries_mut();
            adam_step(&mut params, &grads, &mut adam)?;
            loss_sum += loss_val;
        }

        let train_eval = evaluate_split(model, train_set, cfg.threshold)?;
        let test_eval = evaluate_split(model, test_set, cfg.threshold)?;
        history.0.push(EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_iou: train_eval.mean_iou,
            test_iou: test_eval.mean_iou,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantoms, PhantomSpec};
    use crate::unet::{build_unet, UNetConfig};
    use crate::volume::fuse_masks;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![v], &[1]).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_a_fixpoint() {
        let mut p = scalar_param(1.25);
        let mut state = AdamState::new(0.01);
        let grads: HashMap<String, Vec<f64>> = [("p".to_string(), vec![0.0])].into();
        for step in 0..5 {
            let mut params = vec![("p".to_string(), &mut p)];
            adam_step(&mut params, &grads, &mut state).unwrap();
            assert_eq!(p.data[0], 1.25, "changed at step {step}");
            assert_eq!(state.step_count, step + 1);
        }
        let (m, v) = &state.slots["p"];
        assert_eq!((m[0], v[0]), (0.0, 0.0));
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // m̂ = 1, v̂ = 1 after one unit-gradient step, so Δ ≈ −lr.
        let mut p = scalar_param(0.0);
        let mut state = AdamState::new(0.01);
        let grads: HashMap<String, Vec<f64>> = [("p".to_string(), vec![1.0])].into();
        let mut params = vec![("p".to_string(), &mut p)];
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert!((p.data[0] + 0.01).abs() < 1e-6, "got {}", p.data[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_touching_params() {
        let mut p = scalar_param(3.0);
        let mut state = AdamState::new(0.01);
        let grads: HashMap<String, Vec<f64>> = [("p".to_string(), vec![f64::NAN])].into();
        let mut params = vec![("p".to_string(), &mut p)];
        let err = adam_step(&mut params, &grads, &mut state);
        assert!(matches!(err, Err(TrainError::NonFiniteGrad { .. })));
        assert_eq!(p.data[0], 3.0);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn adam_ten_steps_bitwise_reproducible() {
        let run = || {
            let mut p = Tensor::<f32>::randn(&[16], 3, 1.0).unwrap();
            let mut state = AdamState::new(0.01);
            for step in 0..10u64 {
                let g = Tensor::<f32>::randn(&[16], 100 + step, 0.5).unwrap();
                let grads: HashMap<String, Vec<f32>> = [("p".to_string(), g.data)].into();
                let mut params = vec![("p".to_string(), &mut p)];
                adam_step(&mut params, &grads, &mut state).unwrap();
            }
            p.data
        };
        assert_eq!(run(), run());
    }

    fn phantom_dataset(count: usize, size: usize, seed: u64, split: Split) -> Dataset {
        let mut spec = PhantomSpec::new(size, count, seed);
        // Small enough to fit the 16³ grids these tests use.
        spec.semi_axis_range = (2.0, 3.0);
        spec.center_jitter = 1.0;
        let samples = generate_phantoms(&spec)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let mask = fuse_masks(&s.left, &s.right).unwrap();
                (format!("s{i}"), s.volume, mask)
            })
            .collect();
        Dataset::new(split, samples).unwrap()
    }

    #[test]
    fn zero_epoch_config_rejected() {
        let ds = phantom_dataset(1, 16, 1, Split::Train);
        let mut model = build_unet::<f32>(&UNetConfig::desk(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &ds, &ds, &cfg),
            Err(TrainError::Validation(_))
        ));
    }

    #[test]
    fn divisibility_checked_upfront() {
        let mut spec = PhantomSpec::new(18, 1, 1); // 18 not divisible by 4
        spec.semi_axis_range = (2.0, 3.0);
        let s = generate_phantoms(&spec).unwrap().remove(0);
        let mask = fuse_masks(&s.left, &s.right).unwrap();
        let ds = Dataset::new(Split::Train, vec![("a".into(), s.volume, mask)]).unwrap();
        let mut model = build_unet::<f32>(&UNetConfig::desk(), 1).unwrap();
        let cfg = TrainConfig::default();
        match train(&mut model, &ds, &ds, &cfg) {
            Err(TrainError::Validation(msg)) => assert!(msg.contains("divisible"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_mismatched_pair() {
        let v = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), vec![0.0; 64]).unwrap();
        let m = Mask::empty((4, 4, 8)).unwrap();
        assert!(matches!(
            Dataset::new(Split::Train, vec![("x".into(), v, m)]),
            Err(TrainError::Validation(_))
        ));
    }

    #[test]
    fn overfit_single_phantom_cuts_loss_tenfold() {
        // One 16³ sample, 100 steps at lr 1e-2.
        let ds = phantom_dataset(1, 16, 7, Split::Train);
        let mut model = build_unet::<f32>(&UNetConfig::desk(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 100,
            seed: 7,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &ds, &ds, &cfg).unwrap();
        assert_eq!(history.0.len(), 100);
        let first = history.0.first().unwrap().loss;
        let last = history.0.last().unwrap().loss;
        assert!(
            last < first / 10.0,
            "loss {first} → {last} is not a 10× reduction"
        );
    }

    #[test]
    fn history_is_deterministic_across_runs() {
        let run = || {
            let train_ds = phantom_dataset(2, 16, 11, Split::Train);
            let test_ds = phantom_dataset(1, 16, 12, Split::Test);
            let mut model = build_unet::<f32>(&UNetConfig::desk(), 5).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                seed: 11,
                ..TrainConfig::default()
            };
            let h = train(&mut model, &train_ds, &test_ds, &cfg).unwrap();
            (h.to_jsonl(), model.named_buffers().iter().map(|(_, _, d)| d.to_vec()).collect::<Vec<_>>())
        };
        let (h1, w1) = run();
        let (h2, w2) = run();
        assert_eq!(h1, h2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn evaluate_split_extremes() {
        let ds = phantom_dataset(2, 16, 21, Split::Test);
        let mut model = build_unet::<f32>(&UNetConfig::desk(), 1).unwrap();
        for (_, t) in model.trainable_entries_mut() {
            for v in t.data.iter_mut() {
                *v = 0.0;
            }
        }
        // All-background prediction on non-empty masks: IoU 0.
        model_head_bias(&mut model, -50.0);
        let eval = evaluate_split(&model, &ds, 0.5).unwrap();
        assert_eq!(eval.mean_iou, 0.0);
        assert_eq!(eval.reports.len(), 2);

        // Forced all-foreground prediction against an all-ones mask: IoU 1.
        model_head_bias(&mut model, 50.0);
        let v = Volume::new((8, 8, 8), (1.0, 1.0, 1.0), vec![0.0; 512]).unwrap();
        let full = Mask::new((8, 8, 8), vec![1; 512]).unwrap();
        let ds_full = Dataset::new(Split::Test, vec![("f".into(), v, full)]).unwrap();
        let eval = evaluate_split(&model, &ds_full, 0.5).unwrap();
        assert_eq!(eval.mean_iou, 1.0);
    }

    fn model_head_bias(model: &mut Model<f32>, bias: f32) {
        for (path, t) in model.trainable_entries_mut() {
            if path == "head.bias" {
                t.data[0] = bias;
            }
        }
    }

    #[test]
    fn history_jsonl_schema() {
        let h = History(vec![EpochRecord {
            epoch: 1,
            loss: 0.5,
            train_iou: 0.25,
            test_iou: 0.125,
        }]);
        let line = h.to_jsonl();
        assert_eq!(
            line,
            "{\"epoch\":1,\"loss\":0.5,\"train_iou\":0.25,\"test_iou\":0.125}\n"
        );
    }
}
