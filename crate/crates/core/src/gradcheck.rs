//! Finite-difference verification of the reverse-mode gradients.
//!
//! Every check builds a scalar from a function of trainable leaves (a fixed
//! random projection when the function is not scalar-valued), differentiates
//! it on the tape and compares a sample of entries against central differences.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::locnet::{InputConvConfig, LocNetConfig, Mode, Model, ModelConfig, Stage};
use crate::mdgru::{cgru_sequence, cgru_step, directions, mdgru_forward, CGruParams, CGruVars, DropConnect, MdGruLayer};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};
use crate::training::{initialize, stream_rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: Float,
    pub tolerance: Float,
    /// Entries checked per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Test hook: negate every analytic gradient, which must make checks fail.
    pub flip_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 12,
            seed: 7,
            flip_sign: false,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-5)`.
///
/// Below the floor the comparison is absolute: a central difference with
/// step 1e-5 on an O(1) loss carries about 1e-10 of rounding noise.
pub fn relative_error(analytic: Float, numeric: Float) -> Float {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: Float,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_rel_error(&self) -> Float {
        self.results.iter().fold(0.0, |m, r| m.max(r.max_rel_error))
    }

    pub fn format(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "check={} status={} max_rel_error={:.3e} entries={}",
                r.name,
                if r.passed { "pass" } else { "FAIL" },
                r.max_rel_error,
                r.checked
            );
        }
        s
    }
}

fn scalarize(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return tape.sum(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let proj = Tensor::from_fn(tape.shape(out), |_| rng.gen_range(-1.0..1.0));
    let p = tape.constant(proj);
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

/// Checks `f` with respect to every tensor in `inputs`.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, cfg: &GradcheckConfig) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], trainable: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = scalarize(&mut tape, out, cfg.seed)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs, true)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = inputs.to_vec();
    let mut worst: Float = 0.0;
    let mut checked = 0;
    for k in 0..inputs.len() {
        let n = inputs[k].len();
        let picks: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_tensor).into_vec()
        };
        for i in picks {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + cfg.step;
            let (t, _, l) = eval(&values, false)?;
            let plus = t.value(l).item()?;
            values[k].data_mut()[i] = orig - cfg.step;
            let (t, _, l) = eval(&values, false)?;
            let minus = t.value(l).item()?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let mut a = analytic[k].data()[i];
            if cfg.flip_sign {
                a = -a;
            }
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
        passed: worst < cfg.tolerance,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for the kink of the leaky rectifier.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

/// One check per differentiable tape operation.
pub fn op_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = &mut rng;
    let cases: Vec<OpCase> = vec![
        ("add", vec![random(r, &[3, 4]), random(r, &[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![random(r, &[3, 4]), random(r, &[3, 4])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![random(r, &[3, 4]), random(r, &[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![random(r, &[5])], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("sigmoid", vec![random(r, &[2, 5])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("tanh", vec![random(r, &[2, 5])], Box::new(|t, v| t.tanh(v[0]))),
        ("lrelu", vec![off_zero(r, &[2, 5])], Box::new(|t, v| t.lrelu(v[0]))),
        (
            "gru_blend",
            vec![random(r, &[2, 3]), random(r, &[2, 3]), random(r, &[2, 3])],
            Box::new(|t, v| t.gru_blend(v[0], v[1], v[2])),
        ),
        (
            "conv1d_stride2",
            vec![random(r, &[2, 8]), random(r, &[3, 2, 3]), random(r, &[3])],
            Box::new(|t, v| t.conv(v[0], v[1], Some(v[2]), &[2])),
        ),
        (
            "conv2d_stride1",
            vec![random(r, &[2, 5, 4]), random(r, &[2, 2, 3, 3]), random(r, &[2])],
            Box::new(|t, v| t.conv(v[0], v[1], Some(v[2]), &[1, 1])),
        ),
        (
            "conv3d_stride2",
            vec![random(r, &[2, 4, 4, 4]), random(r, &[2, 2, 3, 3, 3])],
            Box::new(|t, v| t.conv(v[0], v[1], None, &[2, 2, 2])),
        ),
        (
            "conv3d_mixed_stride",
            vec![random(r, &[1, 4, 4, 6]), random(r, &[2, 1, 1, 3, 5]), random(r, &[2])],
            Box::new(|t, v| t.conv(v[0], v[1], Some(v[2]), &[1, 2, 3])),
        ),
        ("avg_pool", vec![random(r, &[2, 6, 3])], Box::new(|t, v| t.avg_pool(v[0], 1, 2))),
        ("select", vec![random(r, &[2, 3, 4])], Box::new(|t, v| t.select(v[0], 2, 1))),
        (
            "stack",
            vec![random(r, &[2, 3]), random(r, &[2, 3]), random(r, &[2, 3])],
            Box::new(|t, v| t.stack(&[v[0], v[1], v[2]], 1)),
        ),
        ("reshape", vec![random(r, &[2, 6])], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        (
            "flatten_channels_last",
            vec![random(r, &[3, 2, 2, 2])],
            Box::new(|t, v| t.flatten_channels_last(v[0])),
        ),
        (
            "linear",
            vec![random(r, &[6]), random(r, &[4, 6]), random(r, &[4])],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        ("slice", vec![random(r, &[9])], Box::new(|t, v| t.slice(v[0], 2, 5))),
        ("softmax", vec![random(r, &[7])], Box::new(|t, v| t.softmax(v[0]))),
        (
            "cross_entropy",
            vec![random(r, &[6])],
            Box::new(|t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, 4)
            }),
        ),
        ("sum", vec![random(r, &[3, 3])], Box::new(|t, v| t.sum(v[0]))),
        (
            "add_n",
            vec![random(r, &[4]), random(r, &[4]), random(r, &[4])],
            Box::new(|t, v| t.add_n(&[v[0], v[1], v[2]])),
        ),
        (
            "fork",
            vec![random(r, &[3]), random(r, &[3])],
            Box::new(|t, v| {
                t.fork(&[v[0], v[1]], 3, |k, c, ins| {
                    let m = c.mul(ins[0], ins[1])?;
                    let s = c.scale(m, k as Float + 1.0)?;
                    c.tanh(s)
                })
            }),
        ),
    ];
    let mut report = GradcheckReport::default();
    for (name, inputs, f) in cases {
        report.results.push(check(name, &inputs, f, cfg)?);
    }
    Ok(report)
}

fn store_values(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value().clone()).collect()
}

/// C-GRU and MD-GRU checks on a one-channel 4³ volume with kernel 3 and stride 2,
/// plus the miniature coarse network.
pub fn mdgru_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let mut rng = stream_rng(cfg.seed, Stream::Init);

    let mut store = ParamStore::new();
    let p = CGruParams::new(&mut store, "step", 3, 2, 2, 2, 3)?;
    initialize(&mut store, &mut rng);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    let mut inputs = store_values(&store);
    let n_params = inputs.len();
    inputs.push(random(&mut data_rng, &[2, 4, 4]));
    inputs.push(random(&mut data_rng, &[2, 2, 2]));
    let stride = p.stride();
    report.results.push(check(
        "cgru_step",
        &inputs,
        |t, v| {
            let vars = CGruVars::bind(t, &p, &Bound::from_vars(v[..n_params].to_vec()), DropConnect::Off)?;
            cgru_step(t, v[n_params], v[n_params + 1], &vars, stride)
        },
        cfg,
    )?);

    let mut store = ParamStore::new();
    let p = CGruParams::new(&mut store, "seq", 3, 1, 1, 2, 3)?;
    initialize(&mut store, &mut rng);
    let mut inputs = store_values(&store);
    let n_params = inputs.len();
    inputs.push(random(&mut data_rng, &[1, 4, 4, 4]));
    for dir in directions(3) {
        report.results.push(check(
            &format!("cgru_sequence_{}", dir.name()),
            &inputs,
            |t, v| {
                let vars = CGruVars::bind(t, &p, &Bound::from_vars(v[..n_params].to_vec()), DropConnect::Off)?;
                cgru_sequence(t, v[n_params], &vars, dir, 2)
            },
            cfg,
        )?);
    }

    let mut store = ParamStore::new();
    let layer = MdGruLayer::new(&mut store, "layer", 3, 1, 2, 2, 3, 0.5)?;
    initialize(&mut store, &mut rng);
    let masks = layer.sample_masks(&mut stream_rng(cfg.seed, Stream::Masks));
    let mut inputs = store_values(&store);
    let n_params = inputs.len();
    inputs.push(random(&mut data_rng, &[1, 4, 4, 4]));
    report.results.push(check(
        "mdgru_layer_dropconnect",
        &inputs,
        |t, v| {
            let bound = Bound::from_vars(v[..n_params].to_vec());
            mdgru_forward(t, v[n_params], &layer, &bound, DropConnect::Masks(&masks))
        },
        cfg,
    )?);

    report.results.push(miniature_network(cfg)?);
    Ok(report)
}

/// The miniature coarse model: 16³ two-channel input, a stride-2 input
/// convolution down to 8³, MD-GRU widths 2/2/2 and 8 classes per axis.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        stage: Stage::Coarse,
        input_conv: Some(InputConvConfig::for_stride(2, 2, 2)),
        net: LocNetConfig {
            input_extents: [8, 8, 8],
            input_channels: 2,
            mdgru_channels: vec![2, 2, 2],
            pointwise_channels: vec![2, 2, 2],
            stride: 2,
            kernel: 3,
            classes: [8, 8, 8],
            superres: 1,
            dropconnect_rate: 0.5,
        },
    }
}

fn miniature_network(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut model = Model::build(miniature_config())?;
    // A generic point rather than the initialisation: the small FC init leaves
    // upstream gradients near the finite-difference rounding floor.
    let mut init_rng = stream_rng(cfg.seed, Stream::Init);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, random(&mut init_rng, &shape).map(|v| 0.5 * v))?;
    }
    let masks = model.sample_masks(&mut stream_rng(cfg.seed, Stream::Masks));
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
    let input = random(&mut data_rng, &[2, 16, 16, 16]);
    let target = [3, 5, 1];
    let inputs = store_values(&model.store);
    check(
        "coarse_network_mini",
        &inputs,
        |t, v| {
            let bound = Bound::from_vars(v.to_vec());
            let x = t.constant(input.clone());
            let probs = model.forward(t, &bound, x, &Mode::Train(&masks))?;
            model.loss(t, probs, target)
        },
        cfg,
    )
}

/// Both suites.
pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut report = op_suite(cfg)?;
    report.results.extend(mdgru_suite(cfg)?.results);
    Ok(report)
}
