//! The localization network and the trainable model around it.
//!
//! Three compositions of (MD-GRU, 1³ convolution, tanh) reduce the input by
//! the stride per composition on every axis. The result is flattened
//! channels-last, passed through two fully connected layers joined by a leaky
//! rectifier, split into one logit vector per axis, and normalised with a
//! softmax per axis. The loss is the sum of the three cross-entropies.
//!
//! Coarse-stage models additionally own a strided input convolution that
//! brings the padded volume down to the network's input extents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::mdgru::{self, DropConnect, MaskSet, MdGruLayer};
use crate::params::{Bound, ParamId, ParamKind, ParamStore, Role};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            other => Err(Error::config(format!("unknown stage {other:?} (expected coarse|fine)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocNetConfig {
    /// Network input extents `(N_x, N_y, N_z)`.
    pub input_extents: [usize; 3],
    pub input_channels: usize,
    pub mdgru_channels: Vec<usize>,
    pub pointwise_channels: Vec<usize>,
    /// Stride of every MD-GRU layer.
    pub stride: usize,
    /// Kernel extent of the C-GRU convolutions along each non-time axis.
    pub kernel: usize,
    /// Coordinate classes per axis.
    pub classes: [usize; 3],
    /// Classes per voxel along each axis.
    pub superres: usize,
    pub dropconnect_rate: Float,
}

impl LocNetConfig {
    /// Defaults from the reference architecture for the given window and superresolution.
    pub fn reference(input_extents: [usize; 3], input_channels: usize, superres: usize) -> Self {
        LocNetConfig {
            input_extents,
            input_channels,
            mdgru_channels: vec![32, 64, 128],
            pointwise_channels: vec![48, 96, 192],
            stride: 2,
            kernel: 3,
            classes: input_extents.map(|n| n * superres),
            superres,
            dropconnect_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.mdgru_channels.len();
        if depth == 0 || depth != self.pointwise_channels.len() {
            return Err(Error::config(format!(
                "need matching non-empty MD-GRU and pointwise channel lists, got {:?} and {:?}",
                self.mdgru_channels, self.pointwise_channels
            )));
        }
        if self
            .mdgru_channels
            .iter()
            .chain(&self.pointwise_channels)
            .any(|&c| c == 0)
            || self.input_channels == 0
        {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.stride == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "stride must be positive and kernel odd, got stride {} kernel {}",
                self.stride, self.kernel
            )));
        }
        if self.superres == 0 {
            return Err(Error::config("superresolution factor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dropconnect_rate) {
            return Err(Error::config("dropconnect rate must lie in [0, 1]"));
        }
        let reduction = self.stride.pow(depth as u32);
        for (a, &n) in self.input_extents.iter().enumerate() {
            if n == 0 || n % reduction != 0 {
                return Err(Error::config(format!(
                    "input extent {n} on axis {a} is not divisible by {reduction}"
                )));
            }
            if self.classes[a] != n * self.superres {
                return Err(Error::config(format!(
                    "axis {a} has {} classes but extent {n} times superresolution {} is {}",
                    self.classes[a],
                    self.superres,
                    n * self.superres
                )));
            }
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.classes.iter().sum()
    }

    /// Width of the first fully connected layer.
    pub fn hidden_units(&self) -> usize {
        4 * self.total_classes()
    }

    /// Shape `(channels, extents...)` of the block that is flattened.
    pub fn pre_flatten_shape(&self) -> Vec<usize> {
        let reduction = self.stride.pow(self.mdgru_channels.len() as u32);
        let mut s = vec![*self.pointwise_channels.last().expect("validated")];
        s.extend(self.input_extents.iter().map(|n| n / reduction));
        s
    }

    pub fn flatten_len(&self) -> usize {
        self.pre_flatten_shape().iter().product()
    }

    /// Closed-form scalar parameter count of the network (without any input convolution).
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let mut count = 0;
        let mut in_c = self.input_channels;
        for (&j, &pw) in self.mdgru_channels.iter().zip(&self.pointwise_channels) {
            let per_direction = 3 * (j * in_c * k2) + 3 * (j * j * k2) + 3 * j;
            count += 6 * per_direction;
            count += pw * j + pw;
            in_c = pw;
        }
        count + self.fc_parameter_count()
    }

    /// Weights and biases of the two fully connected layers.
    pub fn fc_parameter_count(&self) -> usize {
        let h = self.hidden_units();
        let c = self.total_classes();
        self.flatten_len() * h + h + h * c + c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl InputConvConfig {
    /// Kernel extent `2·stride + 1`.
    pub fn for_stride(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        InputConvConfig {
            in_channels,
            out_channels,
            stride,
            kernel: 2 * stride + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stage: Stage,
    #[serde(default)]
    pub input_conv: Option<InputConvConfig>,
    pub net: LocNetConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if let Some(ic) = &self.input_conv {
            if ic.out_channels != self.net.input_channels {
                return Err(Error::config(format!(
                    "input convolution produces {} channels but the network expects {}",
                    ic.out_channels, self.net.input_channels
                )));
            }
            if ic.stride == 0 || ic.kernel % 2 == 0 || ic.in_channels == 0 {
                return Err(Error::config("input convolution needs a positive stride, odd kernel and channels"));
            }
        }
        Ok(())
    }

    /// Channels of the tensor fed to the model.
    pub fn data_channels(&self) -> usize {
        self.input_conv
            .as_ref()
            .map_or(self.net.input_channels, |ic| ic.in_channels)
    }

    /// Spatial extents of the tensor fed to the model.
    pub fn data_extents(&self) -> [usize; 3] {
        let s = self.input_conv.as_ref().map_or(1, |ic| ic.stride);
        self.net.input_extents.map(|n| n * s)
    }
}

/// Per-axis class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateDistribution {
    pub axes: [Vec<Float>; 3],
}

impl CoordinateDistribution {
    pub fn uniform(classes: [usize; 3]) -> Self {
        CoordinateDistribution {
            axes: classes.map(|c| vec![1.0 / c as Float; c]),
        }
    }

    /// Checks each axis sums to one within `tol` with nonnegative entries.
    pub fn is_valid(&self, tol: Float) -> bool {
        self.axes.iter().all(|p| {
            p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<Float>() - 1.0).abs() <= tol
        })
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[Float]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_coordinate(dist: &CoordinateDistribution) -> [usize; 3] {
    [
        argmax(&dist.axes[0]),
        argmax(&dist.axes[1]),
        argmax(&dist.axes[2]),
    ]
}

/// Summed cross-entropy of the three axis distributions.
pub fn locnet_loss(dist: &CoordinateDistribution, target: [usize; 3]) -> Result<Float> {
    let mut total = 0.0;
    for (p, &t) in dist.axes.iter().zip(&target) {
        total += kernels::cross_entropy(p, t)?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct Composition {
    pub mdgru: MdGruLayer,
    pub pointwise_w: ParamId,
    pub pointwise_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct LocNet {
    pub config: LocNetConfig,
    pub compositions: Vec<Composition>,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl LocNet {
    /// Registers zero-valued parameters for `config` in `store`.
    pub fn build(store: &mut ParamStore, config: &LocNetConfig) -> Result<Self> {
        config.validate()?;
        let mut compositions = Vec::new();
        let mut in_c = config.input_channels;
        for (k, (&j, &pw)) in config
            .mdgru_channels
            .iter()
            .zip(&config.pointwise_channels)
            .enumerate()
        {
            let mdgru = MdGruLayer::new(
                store,
                &format!("comp{k}/mdgru"),
                3,
                in_c,
                j,
                config.stride,
                config.kernel,
                config.dropconnect_rate,
            )?;
            let pointwise_w = store.add(
                format!("comp{k}/pointwise/w"),
                Tensor::zeros(&[pw, j, 1, 1, 1]),
                ParamKind::ConvWeight {
                    fan_in: j,
                    fan_out: pw,
                },
                Role::Other,
            );
            let pointwise_b = store.add(
                format!("comp{k}/pointwise/b"),
                Tensor::zeros(&[pw]),
                ParamKind::Bias,
                Role::Other,
            );
            compositions.push(Composition {
                mdgru,
                pointwise_w,
                pointwise_b,
            });
            in_c = pw;
        }
        let f = config.flatten_len();
        let h = config.hidden_units();
        let c = config.total_classes();
        let fc1_w = store.add("fc1/w", Tensor::zeros(&[h, f]), ParamKind::FcWeight { n_in: f }, Role::Other);
        let fc1_b = store.add("fc1/b", Tensor::zeros(&[h]), ParamKind::Bias, Role::Other);
        let fc2_w = store.add("fc2/w", Tensor::zeros(&[c, h]), ParamKind::FcWeight { n_in: h }, Role::Other);
        let fc2_b = store.add("fc2/b", Tensor::zeros(&[c]), ParamKind::Bias, Role::Other);
        Ok(LocNet {
            config: config.clone(),
            compositions,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }

    /// Output of the last composition, before flattening.
    pub fn features(&self, tape: &mut Tape, bound: &Bound, input: Var, mode: &Mode<'_>) -> Result<Var> {
        let mut x = input;
        for (k, comp) in self.compositions.iter().enumerate() {
            let drop = mode.drop_for(k, comp.mdgru.keep_probability());
            let h = mdgru::mdgru_forward(tape, x, &comp.mdgru, bound, drop)?;
            let p = tape.conv(
                h,
                bound.var(comp.pointwise_w),
                Some(bound.var(comp.pointwise_b)),
                &[1, 1, 1],
            )?;
            x = tape.tanh(p)?;
        }
        Ok(x)
    }

    /// Per-axis probability vectors.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var, mode: &Mode<'_>) -> Result<[Var; 3]> {
        let mut expected = vec![self.config.input_channels];
        expected.extend(self.config.input_extents);
        if tape.shape(input) != expected.as_slice() {
            return Err(Error::shape(format!(
                "network expects input {expected:?}, got {:?}",
                tape.shape(input)
            )));
        }
        let feats = self.features(tape, bound, input, mode)?;
        let flat = tape.flatten_channels_last(feats)?;
        let a1 = tape.linear(flat, bound.var(self.fc1_w), Some(bound.var(self.fc1_b)))?;
        let hidden = tape.lrelu(a1)?;
        let logits = tape.linear(hidden, bound.var(self.fc2_w), Some(bound.var(self.fc2_b)))?;
        let [cx, cy, cz] = self.config.classes;
        let lx = tape.slice(logits, 0, cx)?;
        let ly = tape.slice(logits, cx, cy)?;
        let lz = tape.slice(logits, cx + cy, cz)?;
        Ok([tape.softmax(lx)?, tape.softmax(ly)?, tape.softmax(lz)?])
    }
}

/// Forward-pass behaviour of the DropConnect layers.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// No DropConnect at all.
    Plain,
    /// Training with one mask set per composition.
    Train(&'a [MaskSet]),
    /// Evaluation with keep-probability-scaled input kernels.
    Eval,
}

impl Mode<'_> {
    fn drop_for(&self, composition: usize, keep: Float) -> DropConnect<'_> {
        match self {
            Mode::Plain => DropConnect::Off,
            Mode::Train(masks) => DropConnect::Masks(&masks[composition]),
            Mode::Eval => DropConnect::Expectation { keep },
        }
    }
}

/// A localization network plus its optional input convolution and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub input_conv: Option<(ParamId, ParamId)>,
    pub net: LocNet,
}

impl Model {
    /// Builds the model with all parameters zero.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let input_conv = config.input_conv.as_ref().map(|ic| {
            let kvol = ic.kernel.pow(3);
            let w = store.add(
                "input_conv/w",
                Tensor::zeros(&[ic.out_channels, ic.in_channels, ic.kernel, ic.kernel, ic.kernel]),
                ParamKind::ConvWeight {
                    fan_in: ic.in_channels * kvol,
                    fan_out: ic.out_channels * kvol,
                },
                Role::Other,
            );
            let b = store.add("input_conv/b", Tensor::zeros(&[ic.out_channels]), ParamKind::Bias, Role::Other);
            (w, b)
        });
        let net = LocNet::build(&mut store, &config.net)?;
        Ok(Model {
            config,
            store,
            input_conv,
            net,
        })
    }

    pub fn stage(&self) -> Stage {
        self.config.stage
    }

    pub fn classes(&self) -> [usize; 3] {
        self.config.net.classes
    }

    pub fn superres(&self) -> usize {
        self.config.net.superres
    }

    /// Fresh DropConnect masks for one training example.
    pub fn sample_masks<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<MaskSet> {
        self.net
            .compositions
            .iter()
            .map(|c| c.mdgru.sample_masks(rng))
            .collect()
    }

    fn check_data(&self, shape: &[usize]) -> Result<()> {
        let mut expected = vec![self.config.data_channels()];
        expected.extend(self.config.data_extents());
        if shape != expected.as_slice() {
            return Err(Error::shape(format!(
                "{} model expects input {expected:?}, got {shape:?}",
                self.config.stage
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var, mode: &Mode<'_>) -> Result<[Var; 3]> {
        self.check_data(tape.shape(input))?;
        let x = match (&self.config.input_conv, self.input_conv) {
            (Some(ic), Some((w, b))) => {
                tape.conv(input, bound.var(w), Some(bound.var(b)), &[ic.stride; 3])?
            }
            _ => input,
        };
        self.net.forward(tape, bound, x, mode)
    }

    /// Summed cross-entropy of `probs` against per-axis target classes.
    pub fn loss(&self, tape: &mut Tape, probs: [Var; 3], target: [usize; 3]) -> Result<Var> {
        for (a, (&t, &c)) in target.iter().zip(&self.config.net.classes).enumerate() {
            if t >= c {
                return Err(Error::Contract(format!(
                    "target class {t} out of range for {c} classes on axis {a}"
                )));
            }
        }
        let ce: Vec<Var> = probs
            .iter()
            .zip(target)
            .map(|(&p, t)| tape.cross_entropy(p, t))
            .collect::<Result<_>>()?;
        tape.add_n(&ce)
    }

    /// Evaluation-mode distributions for one input tensor.
    pub fn predict(&self, input: &Tensor) -> Result<CoordinateDistribution> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let x = tape.constant(input.clone());
        let probs = self.forward(&mut tape, &bound, x, &Mode::Eval)?;
        Ok(CoordinateDistribution {
            axes: probs.map(|p| tape.value(p).data().to_vec()),
        })
    }
}
