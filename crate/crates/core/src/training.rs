//! Initialisation, DropConnect, AdaDelta, example sampling and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::locnet::{locnet_loss, Mode, Model, Stage};
use crate::mdgru::{CGruParams, MaskSet};
use crate::params::{ParamKind, ParamStore, Role};
use crate::pipeline::{coordinate_class, place, preprocess, Landmark, PipelineConfig, Space, Volume};
use crate::tape::Tape;
use crate::tensor::{Float, Tensor};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Masks,
    Sampling,
    Validation,
    Synthesis,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + 1);
    rng
}

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: Float, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> Float {
    (6.0 / (fan_in + fan_out) as Float).sqrt()
}

pub fn fc_bound(n_in: usize) -> Float {
    (3.0 as Float).sqrt() / n_in as Float
}

pub fn glorot_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    uniform_tensor(shape, glorot_bound(fan_in, fan_out), rng)
}

pub fn fc_init<R: Rng + ?Sized>(shape: &[usize], n_in: usize, rng: &mut R) -> Tensor {
    uniform_tensor(shape, fc_bound(n_in), rng)
}

/// Largest magnitude a freshly initialised parameter of this kind may have.
pub fn init_bound(kind: ParamKind) -> Float {
    match kind {
        ParamKind::ConvWeight { fan_in, fan_out } => glorot_bound(fan_in, fan_out),
        ParamKind::FcWeight { n_in } => fc_bound(n_in),
        ParamKind::Bias => 0.0,
    }
}

/// Draws every parameter in registration order.
pub fn initialize<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.param(id);
        let shape = p.value().shape().to_vec();
        let value = match p.kind {
            ParamKind::ConvWeight { fan_in, fan_out } => glorot_init(&shape, fan_in, fan_out, rng),
            ParamKind::FcWeight { n_in } => fc_init(&shape, n_in, rng),
            ParamKind::Bias => Tensor::zeros(&shape),
        };
        store.set(id, value).expect("shape preserved");
    }
}

/// Bernoulli keep-masks over the input kernels `w_r`, `w_z` and `w`.
pub fn dropconnect_sample<R: Rng + ?Sized>(params: &CGruParams, rate: Float, rng: &mut R) -> MaskSet {
    let shape = params.input_spec.weight_shape();
    let keep = 1.0 - rate;
    let mut draw = || Tensor::from_fn(&shape, |_| if rng.gen::<Float>() < keep { 1.0 } else { 0.0 });
    MaskSet {
        reset: draw(),
        update: draw(),
        proposal: draw(),
    }
}

/// Copy of `store` with the C-GRU input kernels scaled by the keep probability.
pub fn inference_weights(store: &ParamStore, rate: Float) -> ParamStore {
    let mut out = store.clone();
    let keep = 1.0 - rate;
    let ids: Vec<_> = out.ids().collect();
    for id in ids {
        if out.param(id).role == Role::GruInputKernel {
            let scaled = out.get(id).map(|v| v * keep);
            out.set(id, scaled).expect("shape preserved");
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaDeltaConfig {
    pub rho: Float,
    pub eps: Float,
    pub learning_rate: Float,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        AdaDeltaConfig {
            rho: 0.95,
            eps: 1e-8,
            learning_rate: 0.001,
        }
    }
}

/// Running averages of squared gradients and squared updates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    pub config: AdaDeltaConfig,
    pub sq_grad: Vec<Vec<Float>>,
    pub sq_delta: Vec<Vec<Float>>,
}

impl AdaDelta {
    pub fn new(store: &ParamStore, config: AdaDeltaConfig) -> Self {
        let zeros: Vec<Vec<Float>> = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
        AdaDelta {
            config,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }

    /// One update with `grads` in parameter order. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            p.value().expect_same_shape(g)?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        let AdaDeltaConfig { rho, eps, learning_rate } = self.config;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let x = store.get_mut(id).data_mut();
            let (eg, edx) = (&mut self.sq_grad[k], &mut self.sq_delta[k]);
            for (i, &g) in grads[k].data().iter().enumerate() {
                eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
                let delta = -((edx[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
                edx[i] = rho * edx[i] + (1.0 - rho) * delta * delta;
                x[i] += learning_rate * delta;
            }
        }
        Ok(())
    }
}

/// A subject ready for sampling: preprocessed channels plus ground truth.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub pre: Tensor,
    pub truth: Landmark,
    pub spacing: [Float; 3],
}

impl Prepared {
    pub fn new(id: impl Into<String>, volume: &Volume, truth: Landmark, highpass_sigma: Float) -> Result<Self> {
        truth.expect_space(Space::Original)?;
        Ok(Prepared {
            id: id.into(),
            pre: preprocess(volume, highpass_sigma)?,
            truth,
            spacing: volume.spacing,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.pre.shape()[1], self.pre.shape()[2], self.pre.shape()[3]]
    }
}

/// One training input with its target classes.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Tensor,
    pub target: [usize; 3],
    /// Source voxel `p` sits at `p + placement` in `input`.
    pub placement: [i64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub stage: Stage,
    pub window: [usize; 3],
    pub padded: [usize; 3],
    pub coarse_factor: usize,
    pub superres: usize,
    /// Largest shift of the coarse crop from the padded centre, per axis.
    pub coarse_offset: usize,
}

const MAX_RETRIES: usize = 100;

impl SamplerConfig {
    pub fn new(stage: Stage, pipe: &PipelineConfig, coarse_offset: usize) -> Self {
        SamplerConfig {
            stage,
            window: pipe.window,
            padded: pipe.padded,
            coarse_factor: pipe.coarse_factor,
            superres: pipe.superres,
            coarse_offset,
        }
    }

    pub fn classes(&self) -> [usize; 3] {
        match self.stage {
            Stage::Coarse => self.window,
            Stage::Fine => self.window.map(|w| w * self.superres),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &Prepared, rng: &mut R) -> Result<Example> {
        match self.stage {
            Stage::Coarse => sample_coarse_example(&s.pre, s.truth, self, rng),
            Stage::Fine => sample_fine_example(&s.pre, s.truth, self, rng),
        }
    }
}

/// Offset that centres `extents` inside `padded`, as in [`crate::pipeline::pad_center`].
fn centre_offset(extents: [usize; 3], padded: [usize; 3]) -> [i64; 3] {
    [0, 1, 2].map(|a| {
        let (n, p) = (extents[a] as i64, padded[a] as i64);
        if n <= p {
            (p - n) / 2
        } else {
            -((n - p) / 2)
        }
    })
}

/// Coarse classes of a source-space coordinate placed at `placement`.
pub fn coarse_classes(truth: Landmark, placement: [i64; 3], factor: usize, classes: [usize; 3]) -> [usize; 3] {
    let f = factor as Float;
    [0, 1, 2].map(|a| {
        let q = truth.coords[a] + placement[a] as Float;
        coordinate_class((q - (f - 1.0) / 2.0) / f, 1, classes[a])
    })
}

/// A padded-size crop whose centre is shifted from the padded centre by a
/// uniform integer offset; the truth must stay inside the crop.
pub fn sample_coarse_example<R: Rng + ?Sized>(
    pre: &Tensor,
    truth: Landmark,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Example> {
    truth.expect_space(Space::Original)?;
    let extents = [pre.shape()[1], pre.shape()[2], pre.shape()[3]];
    let offset = centre_offset(extents, cfg.padded);
    let r = cfg.coarse_offset as i64;
    let inside = |placement: [i64; 3]| {
        (0..3).all(|a| {
            let q = truth.coords[a] + placement[a] as Float;
            q >= -0.5 && q < cfg.padded[a] as Float - 0.5
        })
    };
    let mut placement = offset;
    for attempt in 0..=MAX_RETRIES {
        if attempt == MAX_RETRIES {
            placement = offset;
            break;
        }
        let shift: [i64; 3] = [0, 1, 2].map(|a| {
            let half = (cfg.padded[a] / 2) as i64;
            rng.gen_range(-r..=r).clamp(-half, half)
        });
        placement = [0, 1, 2].map(|a| offset[a] - shift[a]);
        if inside(placement) {
            break;
        }
    }
    Ok(Example {
        input: place(pre, cfg.padded, placement),
        target: coarse_classes(truth, placement, cfg.coarse_factor, cfg.window),
        placement,
    })
}

/// Range of window origins along one axis that keep `t` inside the window
/// and the window inside the volume.
pub fn fine_origin_range(t: Float, extent: usize, window: usize) -> Option<(usize, usize)> {
    if window > extent {
        return None;
    }
    let lo = ((t - (window - 1) as Float).ceil() as i64).max(0);
    let hi = (t.floor() as i64).min((extent - window) as i64);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Window target classes of a source coordinate for a window at `origin`.
pub fn fine_classes(truth: Landmark, origin: [usize; 3], superres: usize, classes: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| coordinate_class(truth.coords[a] - origin[a] as Float, superres, classes[a]))
}

/// A window with a uniformly drawn origin among those containing the truth.
pub fn sample_fine_example<R: Rng + ?Sized>(
    pre: &Tensor,
    truth: Landmark,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Example> {
    truth.expect_space(Space::Original)?;
    let extents = [pre.shape()[1], pre.shape()[2], pre.shape()[3]];
    let mut origin = [0usize; 3];
    for a in 0..3 {
        let (lo, hi) = fine_origin_range(truth.coords[a], extents[a], cfg.window[a]).ok_or_else(|| {
            Error::Contract(format!(
                "no {}-voxel window on axis {a} of extent {} contains {}",
                cfg.window[a], extents[a], truth.coords[a]
            ))
        })?;
        origin[a] = rng.gen_range(lo..=hi);
    }
    let placement = origin.map(|o| -(o as i64));
    Ok(Example {
        input: place(pre, cfg.window, placement),
        target: fine_classes(truth, origin, cfg.superres, cfg.classes()),
        placement,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdaDeltaConfig,
    /// Coarse crop offset range in voxels.
    pub coarse_offset: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub train_loss: Float,
    pub val_loss: Option<Float>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub iterations: usize,
    pub checkpoints: Vec<PathBuf>,
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("iteration,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{val}", r.iteration, r.train_loss);
    }
    s
}

/// One forward/backward pass and optimizer step; returns the example loss.
pub fn train_step<R: Rng + ?Sized>(model: &mut Model, opt: &mut AdaDelta, ex: &Example, mask_rng: &mut R) -> Result<Float> {
    let masks = model.sample_masks(mask_rng);
    let grads = {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let x = tape.constant(ex.input.clone());
        let probs = model.forward(&mut tape, &bound, x, &Mode::Train(&masks))?;
        let loss = model.loss(&mut tape, probs, ex.target)?;
        let value = tape.value(loss).item()?;
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = model.store.ids().map(|id| g.take(bound.var(id))).collect();
        (value, grads)
    };
    opt.step(&mut model.store, &grads.1)?;
    Ok(grads.0)
}

/// Evaluation-mode loss on a fixed example.
pub fn eval_loss(model: &Model, ex: &Example) -> Result<Float> {
    locnet_loss(&model.predict(&ex.input)?, ex.target)
}

fn check_split(train: &[Prepared], val: &[Prepared]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::config("the training set is empty"));
    }
    if let Some(s) = val.iter().find(|v| train.iter().any(|t| t.id == v.id)) {
        return Err(Error::config(format!("subject {} is in both training and validation sets", s.id)));
    }
    Ok(())
}

/// Initialises `model` from the seed and trains it for `cfg.epochs` epochs of
/// one freshly sampled example per training subject, in shuffled order.
///
/// With `out`, the loss curve is rewritten after every epoch and checkpoints
/// are kept, so an aborted run leaves its last good state behind.
pub fn train(
    model: &mut Model,
    train_set: &[Prepared],
    val_set: &[Prepared],
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    out: Option<&Path>,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    check_split(train_set, val_set)?;
    if sampler.stage != model.stage() {
        return Err(Error::config(format!(
            "sampler is for the {} stage, model is {}",
            sampler.stage,
            model.stage()
        )));
    }
    initialize(&mut model.store, &mut stream_rng(cfg.seed, Stream::Init));
    let mut sample_rng = stream_rng(cfg.seed, Stream::Sampling);
    let mut mask_rng = stream_rng(cfg.seed, Stream::Masks);
    let mut val_rng = stream_rng(cfg.seed, Stream::Validation);
    let val_examples = val_set
        .iter()
        .map(|s| sampler.sample(s, &mut val_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdaDelta::new(&model.store, cfg.optimizer);
    let mut report = TrainReport {
        history: Vec::new(),
        iterations: 0,
        checkpoints: Vec::new(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut sample_rng);
        let mut total = 0.0;
        for &i in &order {
            let ex = sampler.sample(&train_set[i], &mut sample_rng)?;
            let loss = train_step(model, &mut opt, &ex, &mut mask_rng).map_err(|e| {
                Error::State(format!(
                    "training aborted at iteration {} (subject {}): {e}",
                    report.iterations + 1,
                    train_set[i].id
                ))
            })?;
            total += loss;
            report.iterations += 1;
        }
        let val_loss = if val_examples.is_empty() {
            None
        } else {
            let sum = val_examples
                .iter()
                .map(|ex| eval_loss(model, ex))
                .sum::<Result<Float>>()?;
            Some(sum / val_examples.len() as Float)
        };
        let record = EpochRecord {
            epoch,
            iteration: report.iterations,
            train_loss: total / train_set.len() as Float,
            val_loss,
        };
        observe(&record);
        report.history.push(record);
        if let Some(dir) = out {
            let csv = dir.join("loss.csv");
            fs::write(&csv, loss_csv(&report.history)).map_err(Error::file(&csv))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint-epoch{epoch:04}.mdgc"));
                save_model(model, &path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out {
        let path = dir.join("model.mdgc");
        save_model(model, &path)?;
        if cfg.epochs == 0 {
            fs::write(dir.join("loss.csv"), loss_csv(&[])).map_err(Error::file(dir.join("loss.csv")))?;
        }
        report.checkpoints.push(path);
    }
    Ok(report)
}
