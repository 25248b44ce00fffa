//! Configurable 3D U-Net: one conv block per level, max-pool downsampling,
//! transposed-convolution upsampling with optional skip concatenation, and
//! a (1,1,1) convolution head emitting logits. The sigmoid lives in the
//! loss and prediction paths, not in the network.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ioutil::atomic_write;
use crate::nn::{BatchNormParams, ConvParams, Mode, Padding};
use crate::tensor::{Element, SplitMix64, Tape, Tensor, TensorError, TensorId};

/// Network architecture description.
///
/// `channel_schedule[i]` is the width of encoder level `i`; the last entry
/// is the bottleneck. The decoder mirrors the encoder, and the head maps
/// the first-level width to `out_channels` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub channel_schedule: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub alpha: f64,
    pub final_kernel: [usize; 3],
    pub use_skips: bool,
}

impl UNetConfig {
    /// Full-scale preset: first level 10 filters, bottleneck 512.
    pub fn paper() -> Self {
        Self::from_schedule(vec![10, 32, 64, 128, 256, 512])
    }

    /// Small preset that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self::from_schedule(vec![8, 16, 32])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn from_schedule(channel_schedule: Vec<usize>) -> Self {
        Self {
            levels: channel_schedule.len(),
            channel_schedule,
            in_channels: 1,
            out_channels: 1,
            alpha: 0.3,
            final_kernel: [1, 1, 1],
            use_skips: true,
        }
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        if self.levels < 2 {
            return Err(UNetError::Config(format!(
                "levels {} must be at least 2",
                self.levels
            )));
        }
        if self.channel_schedule.len() != self.levels {
            return Err(UNetError::Config(format!(
                "schedule length {} does not match levels {}",
                self.channel_schedule.len(),
                self.levels
            )));
        }
        if self.channel_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(UNetError::Config(format!(
                "channel schedule {:?} must be strictly increasing",
                self.channel_schedule
            )));
        }
        if self.channel_schedule[0] == 0 {
            return Err(UNetError::Config("zero-width level".into()));
        }
        if self.in_channels != 1 || self.out_channels != 1 {
            return Err(UNetError::Config(format!(
                "single-channel input and output only, got in {} out {}",
                self.in_channels, self.out_channels
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(UNetError::Config(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if self.final_kernel != [1, 1, 1] {
            return Err(UNetError::Config(format!(
                "final kernel {:?} unsupported, only (1,1,1)",
                self.final_kernel
            )));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this for the pool/upsample
    /// chain to round-trip.
    pub fn divisibility(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug)]
pub enum UNetError {
    Config(String),
    Tensor(TensorError),
    /// Bad magic, bad version, truncated payload.
    Format(String),
    /// Manifest disagrees with the config it carries.
    Inconsistent(String),
    Io(io::Error),
}

impl fmt::Display for UNetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(s) => write!(f, "invalid network config: {s}"),
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Format(s) => write!(f, "model file format error: {s}"),
            Self::Inconsistent(s) => write!(f, "model file inconsistent: {s}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for UNetError {}

impl From<TensorError> for UNetError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<io::Error> for UNetError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

#[derive(Debug, Clone)]
struct EncLevel<E: Element> {
    conv: ConvParams<E>,
    bn: BatchNormParams<E>,
}

#[derive(Debug, Clone)]
struct DecLevel<E: Element> {
    up: ConvParams<E>,
    conv: ConvParams<E>,
    bn: BatchNormParams<E>,
}

/// A built network. Immutable during inference; training updates weights
/// and batch-norm running statistics through `&mut` access.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    pub cfg: UNetConfig,
    enc: Vec<EncLevel<E>>,
    /// Indexed by target encoder level; executed deepest-first.
    dec: Vec<DecLevel<E>>,
    head: ConvParams<E>,
}

/// Tape handles of the parameter leaves inserted by a forward pass,
/// keyed by the same paths the persistence layer uses.
pub type ParamBindings = Vec<(String, TensorId)>;

/// Builds a seeded network: He-initialized convolutions, identity-scaled
/// batch norm. The same `(cfg, seed)` always yields identical weights.
pub fn build_unet<E: Element>(cfg: &UNetConfig, seed: u64) -> Result<Model<E>, UNetError> {
    cfg.validate()?;
    let mut seeds = SplitMix64::new(seed);
    let sched = &cfg.channel_schedule;
    let alpha = cfg.alpha;

    let mut enc = Vec::with_capacity(cfg.levels);
    for i in 0..cfg.levels {
        let cin = if i == 0 { cfg.in_channels } else { sched[i - 1] };
        enc.push(EncLevel {
            conv: ConvParams::he_init(
                cin,
                sched[i],
                [3, 3, 3],
                1,
                Padding::Same,
                alpha,
                seeds.next_u64(),
            )?,
            bn: BatchNormParams::new(sched[i])?,
        });
    }

    let mut dec = Vec::with_capacity(cfg.levels - 1);
    for i in 0..cfg.levels - 1 {
        let conv_in = if cfg.use_skips { 2 * sched[i] } else { sched[i] };
        dec.push(DecLevel {
            up: ConvParams::he_init(
                sched[i + 1],
                sched[i],
                [2, 2, 2],
                2,
                Padding::Valid,
                alpha,
                seeds.next_u64(),
            )?,
            conv: ConvParams::he_init(
                conv_in,
                sched[i],
                [3, 3, 3],
                1,
                Padding::Same,
                alpha,
                seeds.next_u64(),
            )?,
            bn: BatchNormParams::new(sched[i])?,
        });
    }

    let head = ConvParams::he_init(
        sched[0],
        cfg.out_channels,
        cfg.final_kernel,
        1,
        Padding::Same,
        alpha,
        seeds.next_u64(),
    )?;

    Ok(Model {
        cfg: cfg.clone(),
        enc,
        dec,
        head,
    })
}

/// Trainable parameter element count implied by a config; matches the
/// built model exactly.
pub fn param_count(cfg: &UNetConfig) -> usize {
    let sched = &cfg.channel_schedule;
    let conv = |cin: usize, cout: usize, k: usize| k * k * k * cin * cout + cout;
    let bn = |c: usize| 2 * c;
    let mut total = 0;
    for i in 0..cfg.levels {
        let cin = if i == 0 { cfg.in_channels } else { sched[i - 1] };
        total += conv(cin, sched[i], 3) + bn(sched[i]);
    }
    for i in 0..cfg.levels - 1 {
        let conv_in = if cfg.use_skips { 2 * sched[i] } else { sched[i] };
        total += conv(sched[i + 1], sched[i], 2); // transposed conv
        total += conv(conv_in, sched[i], 3) + bn(sched[i]);
    }
    total + conv(sched[0], cfg.out_channels, 1)
}

impl<E: Element> Model<E> {
    /// Trainable parameter element count of the built model.
    pub fn count_params(&self) -> usize {
        self.trainable_entries().iter().map(|(_, t)| t.numel()).sum()
    }

    fn trainable_entries(&self) -> Vec<(String, &Tensor<E>)> {
        let mut v = Vec::new();
        for (i, lvl) in self.enc.iter().enumerate() {
            v.push((format!("enc.{i}.conv.weight"), &lvl.conv.weight));
            v.push((format!("enc.{i}.conv.bias"), &lvl.conv.bias));
            v.push((format!("enc.{i}.bn.gamma"), &lvl.bn.gamma));
            v.push((format!("enc.{i}.bn.beta"), &lvl.bn.beta));
        }
        for (i, lvl) in self.dec.iter().enumerate() {
            v.push((format!("dec.{i}.up.weight"), &lvl.up.weight));
            v.push((format!("dec.{i}.up.bias"), &lvl.up.bias));
            v.push((format!("dec.{i}.conv.weight"), &lvl.conv.weight));
            v.push((format!("dec.{i}.conv.bias"), &lvl.conv.bias));
            v.push((format!("dec.{i}.bn.gamma"), &lvl.bn.gamma));
            v.push((format!("dec.{i}.bn.beta"), &lvl.bn.beta));
        }
        v.push(("head.weight".into(), &self.head.weight));
        v.push(("head.bias".into(), &self.head.bias));
        v
    }

    /// Trainable parameter buffers in the canonical path order. The
    /// optimizer walks this; paths match forward-pass bindings.
    pub fn trainable_entries_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut v: Vec<(String, &mut Tensor<E>)> = Vec::new();
        for (i, lvl) in self.enc.iter_mut().enumerate() {
            v.push((format!("enc.{i}.conv.weight"), &mut lvl.conv.weight));
            v.push((format!("enc.{i}.conv.bias"), &mut lvl.conv.bias));
            v.push((format!("enc.{i}.bn.gamma"), &mut lvl.bn.gamma));
            v.push((format!("enc.{i}.bn.beta"), &mut lvl.bn.beta));
        }
        for (i, lvl) in self.dec.iter_mut().enumerate() {
            v.push((format!("dec.{i}.up.weight"), &mut lvl.up.weight));
            v.push((format!("dec.{i}.up.bias"), &mut lvl.up.bias));
            v.push((format!("dec.{i}.conv.weight"), &mut lvl.conv.weight));
            v.push((format!("dec.{i}.conv.bias"), &mut lvl.conv.bias));
            v.push((format!("dec.{i}.bn.gamma"), &mut lvl.bn.gamma));
            v.push((format!("dec.{i}.bn.beta"), &mut lvl.bn.beta));
        }
        v.push(("head.weight".into(), &mut self.head.weight));
        v.push(("head.bias".into(), &mut self.head.bias));
        v
    }

    /// Every persisted buffer (trainable parameters plus batch-norm
    /// running statistics) with its shape, in the canonical order the
    /// model file uses.
    pub fn named_buffers(&self) -> Vec<(String, Vec<usize>, &[E])> {
        let mut v: Vec<(String, Vec<usize>, &[E])> = Vec::new();
        for (i, lvl) in self.enc.iter().enumerate() {
            v.push((
                format!("enc.{i}.conv.weight"),
                lvl.conv.weight.shape.clone(),
                &lvl.conv.weight.data,
            ));
            v.push((
                format!("enc.{i}.conv.bias"),
                lvl.conv.bias.shape.clone(),
                &lvl.conv.bias.data,
            ));
            v.push((
                format!("enc.{i}.bn.gamma"),
                lvl.bn.gamma.shape.clone(),
                &lvl.bn.gamma.data,
            ));
            v.push((
                format!("enc.{i}.bn.beta"),
                lvl.bn.beta.shape.clone(),
                &lvl.bn.beta.data,
            ));
            v.push((
                format!("enc.{i}.bn.running_mean"),
                vec![lvl.bn.channels],
                &lvl.bn.running_mean,
            ));
            v.push((
                format!("enc.{i}.bn.running_var"),
                vec![lvl.bn.channels],
                &lvl.bn.running_var,
            ));
        }
        for (i, lvl) in self.dec.iter().enumerate() {
            v.push((
                format!("dec.{i}.up.weight"),
                lvl.up.weight.shape.clone(),
                &lvl.up.weight.data,
            ));
            v.push((
                format!("dec.{i}.up.bias"),
                lvl.up.bias.shape.clone(),
                &lvl.up.bias.data,
            ));
            v.push((
                format!("dec.{i}.conv.weight"),
                lvl.conv.weight.shape.clone(),
                &lvl.conv.weight.data,
            ));
            v.push((
                format!("dec.{i}.conv.bias"),
                lvl.conv.bias.shape.clone(),
                &lvl.conv.bias.data,
            ));
            v.push((
                format!("dec.{i}.bn.gamma"),
                lvl.bn.gamma.shape.clone(),
                &lvl.bn.gamma.data,
            ));
            v.push((
                format!("dec.{i}.bn.beta"),
                lvl.bn.beta.shape.clone(),
                &lvl.bn.beta.data,
            ));
            v.push((
                format!("dec.{i}.bn.running_mean"),
                vec![lvl.bn.channels],
                &lvl.bn.running_mean,
            ));
            v.push((
                format!("dec.{i}.bn.running_var"),
                vec![lvl.bn.channels],
                &lvl.bn.running_var,
            ));
        }
        v.push((
            "head.weight".into(),
            self.head.weight.shape.clone(),
            &self.head.weight.data,
        ));
        v.push((
            "head.bias".into(),
            self.head.bias.shape.clone(),
            &self.head.bias.data,
        ));
        v
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        let mut v: Vec<(String, &mut Vec<E>)> = Vec::new();
        for (i, lvl) in self.enc.iter_mut().enumerate() {
            v.push((format!("enc.{i}.conv.weight"), &mut lvl.conv.weight.data));
            v.push((format!("enc.{i}.conv.bias"), &mut lvl.conv.bias.data));
            v.push((format!("enc.{i}.bn.gamma"), &mut lvl.bn.gamma.data));
            v.push((format!("enc.{i}.bn.beta"), &mut lvl.bn.beta.data));
            v.push((format!("enc.{i}.bn.running_mean"), &mut lvl.bn.running_mean));
            v.push((format!("enc.{i}.bn.running_var"), &mut lvl.bn.running_var));
        }
        for (i, lvl) in self.dec.iter_mut().enumerate() {
            v.push((format!("dec.{i}.up.weight"), &mut lvl.up.weight.data));
            v.push((format!("dec.{i}.up.bias"), &mut lvl.up.bias.data));
            v.push((format!("dec.{i}.conv.weight"), &mut lvl.conv.weight.data));
            v.push((format!("dec.{i}.conv.bias"), &mut lvl.conv.bias.data));
            v.push((format!("dec.{i}.bn.gamma"), &mut lvl.bn.gamma.data));
            v.push((format!("dec.{i}.bn.beta"), &mut lvl.bn.beta.data));
            v.push((format!("dec.{i}.bn.running_mean"), &mut lvl.bn.running_mean));
            v.push((format!("dec.{i}.bn.running_var"), &mut lvl.bn.running_var));
        }
        v.push(("head.weight".into(), &mut self.head.weight.data));
        v.push(("head.bias".into(), &mut self.head.bias.data));
        v
    }

    /// Converts every buffer to another precision.
    pub fn cast<T: Element>(&self) -> Model<T> {
        let conv = |c: &ConvParams<E>| ConvParams::<T> {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let bn = |b: &BatchNormParams<E>| BatchNormParams::<T> {
            channels: b.channels,
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            running_var: b.running_var.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            epsilon: b.epsilon,
            momentum: b.momentum,
        };
        Model {
            cfg: self.cfg.clone(),
            enc: self
                .enc
                .iter()
                .map(|l| EncLevel {
                    conv: conv(&l.conv),
                    bn: bn(&l.bn),
                })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|l| DecLevel {
                    up: conv(&l.up),
                    conv: conv(&l.conv),
                    bn: bn(&l.bn),
                })
                .collect(),
            head: conv(&self.head),
        }
    }

    fn check_input(&self, tape: &Tape<E>, x: TensorId) -> Result<(), TensorError> {
        let xs = tape.shape(x);
        if xs.len() != 5 {
            return Err(TensorError::InvalidShape {
                op: "unet_forward",
                detail: format!("need 5-D input, got {xs:?}"),
            });
        }
        if xs[1] != self.cfg.in_channels {
            return Err(TensorError::ChannelMismatch {
                op: "unet_forward",
                expected: self.cfg.in_channels,
                got: xs[1],
            });
        }
        let need = self.cfg.divisibility();
        const AXES: [&str; 3] = ["depth", "height", "width"];
        for a in 0..3 {
            if xs[2 + a] % need != 0 {
                return Err(TensorError::NotDivisible {
                    axis: AXES[a],
                    extent: xs[2 + a],
                    required: need,
                });
            }
        }
        Ok(())
    }

    /// Pure forward pass. Records parameter leaves (tracked when `mode`
    /// is `Train`), returns the logits, the parameter bindings, and the
    /// batch statistics each norm layer used (train mode only), in
    /// binding path order.
    #[allow(clippy::type_complexity)]
    pub fn forward_with(
        &self,
        tape: &mut Tape<E>,
        x: TensorId,
        mode: Mode,
    ) -> Result<(TensorId, ParamBindings, Vec<(String, Vec<E>, Vec<E>)>), TensorError> {
        self.check_input(tape, x)?;
        let track = mode == Mode::Train;
        let alpha = E::from_f64(self.cfg.alpha);
        let mut bind: ParamBindings = Vec::new();
        let mut bn_stats: Vec<(String, Vec<E>, Vec<E>)> = Vec::new();

        let leaf = |tape: &mut Tape<E>, bind: &mut ParamBindings, path: String, t: &Tensor<E>| {
            let id = tape.leaf(t.clone().requires_grad(track));
            bind.push((path, id));
            id
        };

        let conv_block = |tape: &mut Tape<E>,
                          bind: &mut ParamBindings,
                          bn_stats: &mut Vec<(String, Vec<E>, Vec<E>)>,
                          prefix: &str,
                          conv: &ConvParams<E>,
                          bn: &BatchNormParams<E>,
                          input: TensorId|
         -> Result<TensorId, TensorError> {
            let w = tape.leaf(conv.weight.clone().requires_grad(track));
            bind.push((format!("{prefix}.conv.weight"), w));
            let b = tape.leaf(conv.bias.clone().requires_grad(track));
            bind.push((format!("{prefix}.conv.bias"), b));
            let y = tape.conv3d(input, w, b, conv.stride, conv.padding)?;
            let g = tape.leaf(bn.gamma.clone().requires_grad(track));
            bind.push((format!("{prefix}.bn.gamma"), g));
            let be = tape.leaf(bn.beta.clone().requires_grad(track));
            bind.push((format!("{prefix}.bn.beta"), be));
            let (mean, var) = if track {
                let (m, v) = tape.channel_stats(y);
                bn_stats.push((format!("{prefix}.bn"), m.clone(), v.clone()));
                (m, v)
            } else {
                (bn.running_mean.clone(), bn.running_var.clone())
            };
            let y = tape.batchnorm3d(y, g, be, &mean, &var, bn.epsilon, track)?;
            tape.leaky_relu(y, alpha)
        };

        let mut skips: Vec<TensorId> = Vec::new();
        let mut cur = x;
        for (i, lvl) in self.enc.iter().enumerate() {
            cur = conv_block(
                tape,
                &mut bind,
                &mut bn_stats,
                &format!("enc.{i}"),
                &lvl.conv,
                &lvl.bn,
                cur,
            )?;
            if i < self.cfg.levels - 1 {
                skips.push(cur);
                cur = tape.maxpool3d(cur)?;
            }
        }

        for i in (0..self.cfg.levels - 1).rev() {
            let lvl = &self.dec[i];
            let w = leaf(tape, &mut bind, format!("dec.{i}.up.weight"), &lvl.up.weight);
            let b = leaf(tape, &mut bind, format!("dec.{i}.up.bias"), &lvl.up.bias);
            cur = tape.conv_transpose3d(cur, w, b, 2)?;
            if self.cfg.use_skips {
                cur = tape.concat_channels(cur, skips[i])?;
            }
            cur = conv_block(
                tape,
                &mut bind,
                &mut bn_stats,
                &format!("dec.{i}"),
                &lvl.conv,
                &lvl.bn,
                cur,
            )?;
        }

        let w = leaf(tape, &mut bind, "head.weight".into(), &self.head.weight);
        let b = leaf(tape, &mut bind, "head.bias".into(), &self.head.bias);
        let logits = tape.conv3d(cur, w, b, 1, Padding::Same)?;
        Ok((logits, bind, bn_stats))
    }

    /// Training forward pass: batch-norm batch statistics, gradient
    /// tracking on every parameter, running statistics updated in place.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<E>,
        x: TensorId,
    ) -> Result<(TensorId, ParamBindings), TensorError> {
        let (logits, bind, stats) = self.forward_with(tape, x, Mode::Train)?;
        for (path, mean, var) in stats {
            let bn = self
                .bn_mut(&path)
                .expect("forward emitted an unknown batch-norm path");
            bn.update_running(&mean, &var);
        }
        Ok((logits, bind))
    }

    /// Inference forward pass: running statistics, no gradient tracking.
    pub fn forward_infer(&self, tape: &mut Tape<E>, x: TensorId) -> Result<TensorId, TensorError> {
        let (logits, _, _) = self.forward_with(tape, x, Mode::Infer)?;
        Ok(logits)
    }

    fn bn_mut(&mut self, path: &str) -> Option<&mut BatchNormParams<E>> {
        let rest = path.strip_prefix("enc.").or_else(|| path.strip_prefix("dec."))?;
        let idx: usize = rest.strip_suffix(".bn")?.parse().ok()?;
        if path.starts_with("enc.") {
            self.enc.get_mut(idx).map(|l| &mut l.bn)
        } else {
            self.dec.get_mut(idx).map(|l| &mut l.bn)
        }
    }
}

// ── Persistence ─────────────────────────────────────────────────────
// Layout: magic "VSEG" | version u32 LE | manifest length u64 LE |
// manifest JSON | little-endian f32 payload.

const MODEL_MAGIC: &[u8; 4] = b"VSEG";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ManifestTensor {
    path: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: UNetConfig,
    tensors: Vec<ManifestTensor>,
    payload_bytes: u64,
}

/// The buffer layout a config implies: canonical paths and shapes.
fn expected_layout(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let sched = &cfg.channel_schedule;
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    for i in 0..cfg.levels {
        let cin = if i == 0 { cfg.in_channels } else { sched[i - 1] };
        let c = sched[i];
        v.push((format!("enc.{i}.conv.weight"), vec![c, cin, 3, 3, 3]));
        v.push((format!("enc.{i}.conv.bias"), vec![c]));
        v.push((format!("enc.{i}.bn.gamma"), vec![c]));
        v.push((format!("enc.{i}.bn.beta"), vec![c]));
        v.push((format!("enc.{i}.bn.running_mean"), vec![c]));
        v.push((format!("enc.{i}.bn.running_var"), vec![c]));
    }
    for i in 0..cfg.levels - 1 {
        let c = sched[i];
        let conv_in = if cfg.use_skips { 2 * c } else { c };
        v.push((format!("dec.{i}.up.weight"), vec![c, sched[i + 1], 2, 2, 2]));
        v.push((format!("dec.{i}.up.bias"), vec![c]));
        v.push((format!("dec.{i}.conv.weight"), vec![c, conv_in, 3, 3, 3]));
        v.push((format!("dec.{i}.conv.bias"), vec![c]));
        v.push((format!("dec.{i}.bn.gamma"), vec![c]));
        v.push((format!("dec.{i}.bn.beta"), vec![c]));
        v.push((format!("dec.{i}.bn.running_mean"), vec![c]));
        v.push((format!("dec.{i}.bn.running_var"), vec![c]));
    }
    v.push(("head.weight".into(), vec![cfg.out_channels, sched[0], 1, 1, 1]));
    v.push(("head.bias".into(), vec![cfg.out_channels]));
    v
}

/// Serializes config and every buffer; bitwise round-trip with
/// [`load_model`].
pub fn save_model(model: &Model<f32>, path: &Path) -> Result<(), UNetError> {
    let buffers = model.named_buffers();
    let mut tensors = Vec::with_capacity(buffers.len());
    let mut offset = 0u64;
    for (p, shape, data) in &buffers {
        tensors.push(ManifestTensor {
            path: p.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += (data.len() * 4) as u64;
    }
    let manifest = Manifest {
        config: model.cfg.clone(),
        tensors,
        payload_bytes: offset,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    atomic_write(path, |w| {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_json)?;
        for (_, _, data) in &buffers {
            for &v in *data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

/// Loads and fully validates a model file: magic, version, manifest
/// consistency against the embedded config, and payload length.
pub fn load_model(path: &Path) -> Result<Model<f32>, UNetError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(UNetError::Format("file shorter than the fixed header".into()));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(UNetError::Format(format!(
            "bad magic {:?}, want \"VSEG\"",
            &bytes[..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(UNetError::Format(format!(
            "unsupported format version {version}, this build reads {MODEL_VERSION}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(UNetError::Format("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| UNetError::Format(format!("manifest JSON: {e}")))?;
    manifest.config.validate()?;

    let expected = expected_layout(&manifest.config);
    if manifest.tensors.len() != expected.len() {
        return Err(UNetError::Inconsistent(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    for (entry, (path, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.path != path {
            return Err(UNetError::Inconsistent(format!(
                "tensor {:?} out of place, expected {:?}",
                entry.path, path
            )));
        }
        if &entry.shape != shape {
            return Err(UNetError::Inconsistent(format!(
                "{}: manifest shape {:?} disagrees with config shape {:?}",
                entry.path, entry.shape, shape
            )));
        }
        if entry.offset != offset {
            return Err(UNetError::Inconsistent(format!(
                "{}: offset {} not contiguous (expected {offset})",
                entry.path, entry.offset
            )));
        }
        offset += (shape.iter().product::<usize>() * 4) as u64;
    }
    if manifest.payload_bytes != offset {
        return Err(UNetError::Inconsistent(format!(
            "manifest payload_bytes {} vs layout total {offset}",
            manifest.payload_bytes
        )));
    }
    let payload = &bytes[16 + mlen..];
    if payload.len() as u64 != offset {
        return Err(UNetError::Format(format!(
            "payload is {} bytes, manifest promises {offset}",
            payload.len()
        )));
    }

    let mut model: Model<f32> = build_unet(&manifest.config, 0)?;
    {
        let mut bufs = model.named_buffers_mut();
        for ((path, dst), (epath, shape)) in bufs.iter_mut().zip(&expected) {
            debug_assert_eq!(path, epath);
            let n: usize = shape.iter().product();
            let start = manifest
                .tensors
                .iter()
                .find(|t| &t.path == path)
                .expect("validated above")
                .offset as usize;
            let src = &payload[start..start + 4 * n];
            dst.clear();
            dst.extend(
                src.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }
    }
    Ok(model)
}
