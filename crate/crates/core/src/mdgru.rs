//! Subsampling convolutional GRUs and the multi-dimensional GRU layer.
//!
//! A C-GRU walks one spatial axis ("time") of a `(channels, spatial...)` volume.
//! At every step the input slice is convolved with strided kernels, so the
//! state lives at the reduced resolution of the remaining axes:
//!
//! ```text
//! f(w, b) = x_t ⋆ w + b            (strided)
//! g(u)    = h_{t-1} * u            (unstrided)
//! r  = σ(f(w_r, b_r) + g(u_r))
//! z  = σ(f(w_z, b_z) + g(u_z))
//! h~ = tanh(f(w, b) + r ⊙ g(u))
//! h  = z ⊙ h_{t-1} + (1 - z) ⊙ h~
//! ```
//!
//! The full-resolution sequence of states is average-pooled along time by the
//! stride, and the MD-GRU output is the sum of the pooled results of every
//! axis in both orientations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{Bound, ParamId, ParamKind, ParamStore, Role};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Direction {
    /// Spatial axis walked as time (0-based, excluding the channel axis).
    pub time_axis: usize,
    pub orientation: Orientation,
}

impl Direction {
    pub fn name(&self) -> String {
        let axis = ["x", "y", "z"].get(self.time_axis).copied().unwrap_or("w");
        let sign = match self.orientation {
            Orientation::Forward => '+',
            Orientation::Backward => '-',
        };
        format!("{axis}{sign}")
    }
}

/// Every direction of a volume with `rank` spatial axes, in summation order.
pub fn directions(rank: usize) -> Vec<Direction> {
    (0..rank)
        .flat_map(|time_axis| {
            [Orientation::Forward, Orientation::Backward]
                .into_iter()
                .map(move |orientation| Direction {
                    time_axis,
                    orientation,
                })
        })
        .collect()
}

/// Parameters of one directional C-GRU.
#[derive(Clone, Debug)]
pub struct CGruParams {
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub w: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub u: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b: ParamId,
    /// Strided input convolution over the non-time axes.
    pub input_spec: ConvSpec,
    /// Unstrided state convolution over the non-time axes.
    pub state_spec: ConvSpec,
}

impl CGruParams {
    /// Registers zero-valued parameters under `prefix/…`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spatial_rank: usize,
        in_channels: usize,
        channels: usize,
        stride: usize,
        kernel: usize,
    ) -> Result<Self> {
        if spatial_rank < 2 {
            return Err(Error::shape("a C-GRU needs at least two spatial axes"));
        }
        let rank = spatial_rank - 1;
        let input_spec = ConvSpec::uniform(rank, stride, kernel, in_channels, channels)?;
        let state_spec = ConvSpec::uniform(rank, 1, kernel, channels, channels)?;
        let kvol = input_spec.kernel_volume();
        let w_kind = ParamKind::ConvWeight {
            fan_in: in_channels * kvol,
            fan_out: channels * kvol,
        };
        let u_kind = ParamKind::ConvWeight {
            fan_in: channels * kvol,
            fan_out: channels * kvol,
        };
        let w_shape = input_spec.weight_shape();
        let u_shape = state_spec.weight_shape();
        let mut add = |name: &str, shape: &[usize], kind, role| {
            store.add(format!("{prefix}/{name}"), Tensor::zeros(shape), kind, role)
        };
        Ok(CGruParams {
            w_r: add("w_r", &w_shape, w_kind, Role::GruInputKernel),
            w_z: add("w_z", &w_shape, w_kind, Role::GruInputKernel),
            w: add("w", &w_shape, w_kind, Role::GruInputKernel),
            u_r: add("u_r", &u_shape, u_kind, Role::Other),
            u_z: add("u_z", &u_shape, u_kind, Role::Other),
            u: add("u", &u_shape, u_kind, Role::Other),
            b_r: add("b_r", &[channels], ParamKind::Bias, Role::Other),
            b_z: add("b_z", &[channels], ParamKind::Bias, Role::Other),
            b: add("b", &[channels], ParamKind::Bias, Role::Other),
            input_spec,
            state_spec,
        })
    }

    pub fn channels(&self) -> usize {
        self.input_spec.out_channels
    }

    pub fn stride(&self) -> usize {
        self.input_spec.strides[0]
    }

    /// `[w_r, w_z, w, u_r, u_z, u, b_r, b_z, b]`
    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.w_z, self.w, self.u_r, self.u_z, self.u, self.b_r, self.b_z, self.b,
        ]
    }
}

/// DropConnect masks over the input kernels of the reset gate, update gate and proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub reset: Tensor,
    pub update: Tensor,
    pub proposal: Tensor,
}

/// How the input kernels are treated during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum DropConnect<'a> {
    Off,
    /// Training: multiply by the given 0/1 masks.
    Masks(&'a MaskSet),
    /// Evaluation: scale by the keep probability.
    Expectation { keep: Float },
}

/// Tape variables of one C-GRU, with DropConnect already applied to the input kernels.
#[derive(Clone, Copy, Debug)]
pub struct CGruVars {
    pub w_r: Var,
    pub w_z: Var,
    pub w: Var,
    pub u_r: Var,
    pub u_z: Var,
    pub u: Var,
    pub b_r: Var,
    pub b_z: Var,
    pub b: Var,
}

impl CGruVars {
    /// `raw` in the order of [`CGruParams::ids`].
    pub fn new(tape: &mut Tape, raw: [Var; 9], drop: DropConnect<'_>) -> Result<Self> {
        let [w_r, w_z, w, u_r, u_z, u, b_r, b_z, b] = raw;
        let (w_r, w_z, w) = match drop {
            DropConnect::Off => (w_r, w_z, w),
            DropConnect::Masks(m) => {
                let mr = tape.constant(m.reset.clone());
                let mz = tape.constant(m.update.clone());
                let mh = tape.constant(m.proposal.clone());
                (tape.mul(w_r, mr)?, tape.mul(w_z, mz)?, tape.mul(w, mh)?)
            }
            DropConnect::Expectation { keep } if keep == 1.0 => (w_r, w_z, w),
            DropConnect::Expectation { keep } => {
                (tape.scale(w_r, keep)?, tape.scale(w_z, keep)?, tape.scale(w, keep)?)
            }
        };
        Ok(CGruVars {
            w_r,
            w_z,
            w,
            u_r,
            u_z,
            u,
            b_r,
            b_z,
            b,
        })
    }

    pub fn bind(tape: &mut Tape, params: &CGruParams, bound: &Bound, drop: DropConnect<'_>) -> Result<Self> {
        Self::new(tape, params.ids().map(|id| bound.var(id)), drop)
    }
}

/// Gate and state update given the precomputed input terms `f_r, f_z, f_h`.
pub fn cgru_update(
    tape: &mut Tape,
    f_r: Var,
    f_z: Var,
    f_h: Var,
    h_prev: Var,
    vars: &CGruVars,
) -> Result<Var> {
    let rank = tape.shape(h_prev).len() - 1;
    let ones = vec![1; rank];
    let g_r = tape.conv(h_prev, vars.u_r, None, &ones)?;
    let g_z = tape.conv(h_prev, vars.u_z, None, &ones)?;
    let g_h = tape.conv(h_prev, vars.u, None, &ones)?;
    let a_r = tape.add(f_r, g_r)?;
    let r = tape.sigmoid(a_r)?;
    let a_z = tape.add(f_z, g_z)?;
    let z = tape.sigmoid(a_z)?;
    let rg = tape.mul(r, g_h)?;
    let a_h = tape.add(f_h, rg)?;
    let proposal = tape.tanh(a_h)?;
    tape.gru_blend(z, h_prev, proposal)
}

/// Reduced-resolution state shape for an input slice `(I, extents...)`.
fn state_shape(slice_extents: &[usize], channels: usize, stride: usize) -> Result<Vec<usize>> {
    let mut shape = vec![channels];
    for &d in slice_extents {
        if d % stride != 0 {
            return Err(Error::dimension(format!(
                "extent {d} is not divisible by stride {stride}"
            )));
        }
        shape.push(d / stride);
    }
    Ok(shape)
}

/// One C-GRU step on an input slice `x_t` of shape `(I, non-time extents...)`.
pub fn cgru_step(tape: &mut Tape, x_t: Var, h_prev: Var, vars: &CGruVars, stride: usize) -> Result<Var> {
    let extents = tape.shape(x_t)[1..].to_vec();
    let channels = tape.shape(vars.w_r)[0];
    let expected = state_shape(&extents, channels, stride)?;
    if tape.shape(h_prev) != expected.as_slice() {
        return Err(Error::shape(format!(
            "state {:?} does not match the reduced slice shape {expected:?}",
            tape.shape(h_prev)
        )));
    }
    let strides = vec![stride; extents.len()];
    let f_r = tape.conv(x_t, vars.w_r, Some(vars.b_r), &strides)?;
    let f_z = tape.conv(x_t, vars.w_z, Some(vars.b_z), &strides)?;
    let f_h = tape.conv(x_t, vars.w, Some(vars.b), &strides)?;
    cgru_update(tape, f_r, f_z, f_h, h_prev, vars)
}

/// Input terms for every time step at once: the slice kernel gets a unit extent
/// along the time axis and stride 1 there.
fn precompute_input(tape: &mut Tape, volume: Var, w: Var, b: Var, time_axis: usize, stride: usize) -> Result<Var> {
    let mut shape = tape.shape(w).to_vec();
    shape.insert(2 + time_axis, 1);
    let w3 = tape.reshape(w, &shape)?;
    let rank = tape.shape(volume).len() - 1;
    let mut strides = vec![stride; rank];
    strides[time_axis] = 1;
    tape.conv(volume, w3, Some(b), &strides)
}

/// Runs one C-GRU over `volume` along `dir` and returns the time-pooled states,
/// indexed by ascending volume coordinate along every axis.
pub fn cgru_sequence(tape: &mut Tape, volume: Var, vars: &CGruVars, dir: Direction, stride: usize) -> Result<Var> {
    let shape = tape.shape(volume).to_vec();
    let rank = shape.len() - 1;
    if dir.time_axis >= rank {
        return Err(Error::shape(format!(
            "time axis {} out of range for {shape:?}",
            dir.time_axis
        )));
    }
    let t_len = shape[1 + dir.time_axis];
    if t_len % stride != 0 {
        return Err(Error::dimension(format!(
            "time extent {t_len} is not divisible by stride {stride}"
        )));
    }
    let channels = tape.shape(vars.w_r)[0];
    let mut slice_extents = shape[1..].to_vec();
    slice_extents.remove(dir.time_axis);
    let h0_shape = state_shape(&slice_extents, channels, stride)?;

    let axis = 1 + dir.time_axis;
    let f_r = precompute_input(tape, volume, vars.w_r, vars.b_r, dir.time_axis, stride)?;
    let f_z = precompute_input(tape, volume, vars.w_z, vars.b_z, dir.time_axis, stride)?;
    let f_h = precompute_input(tape, volume, vars.w, vars.b, dir.time_axis, stride)?;

    let mut h = tape.constant(Tensor::zeros(&h0_shape));
    let mut states: Vec<Option<Var>> = vec![None; t_len];
    let order: Box<dyn Iterator<Item = usize>> = match dir.orientation {
        Orientation::Forward => Box::new(0..t_len),
        Orientation::Backward => Box::new((0..t_len).rev()),
    };
    for t in order {
        let fr = tape.select(f_r, axis, t)?;
        let fz = tape.select(f_z, axis, t)?;
        let fh = tape.select(f_h, axis, t)?;
        h = cgru_update(tape, fr, fz, fh, h, vars)?;
        states[t] = Some(h);
    }
    let states: Vec<Var> = states.into_iter().flatten().collect();
    let seq = tape.stack(&states, axis)?;
    tape.avg_pool(seq, axis, stride)
}

/// A subsampling MD-GRU layer: one C-GRU per direction, outputs summed.
#[derive(Clone, Debug)]
pub struct MdGruLayer {
    pub directions: Vec<(Direction, CGruParams)>,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropconnect_rate: Float,
}

impl MdGruLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spatial_rank: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        kernel: usize,
        dropconnect_rate: Float,
    ) -> Result<Self> {
        let directions = directions(spatial_rank)
            .into_iter()
            .map(|d| {
                let p = CGruParams::new(
                    store,
                    &format!("{prefix}/{}", d.name()),
                    spatial_rank,
                    in_channels,
                    out_channels,
                    stride,
                    kernel,
                )?;
                Ok((d, p))
            })
            .collect::<Result<_>>()?;
        Ok(MdGruLayer {
            directions,
            stride,
            in_channels,
            out_channels,
            dropconnect_rate,
        })
    }

    pub fn keep_probability(&self) -> Float {
        1.0 - self.dropconnect_rate
    }

    /// Independent Bernoulli keep-masks for the input kernels, shared by every
    /// direction and time step of one example.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> MaskSet {
        crate::training::dropconnect_sample(&self.directions[0].1, self.dropconnect_rate, rng)
    }
}

/// MD-GRU forward: the sum over directions (in fixed order) of the pooled C-GRU outputs.
pub fn mdgru_forward(
    tape: &mut Tape,
    volume: Var,
    layer: &MdGruLayer,
    bound: &Bound,
    drop: DropConnect<'_>,
) -> Result<Var> {
    let shape = tape.shape(volume);
    if shape.len() != layer.directions.len() / 2 + 1 {
        return Err(Error::shape(format!(
            "layer with {} directions cannot take input {shape:?}",
            layer.directions.len()
        )));
    }
    if shape[0] != layer.in_channels {
        return Err(Error::shape(format!(
            "layer expects {} channels, input has shape {shape:?}",
            layer.in_channels
        )));
    }
    let mut inputs = vec![volume];
    for (_, p) in &layer.directions {
        inputs.extend(p.ids().map(|id| bound.var(id)));
    }
    let stride = layer.stride;
    tape.fork(&inputs, layer.directions.len(), |d, child, ins| {
        let raw: [Var; 9] = ins[1 + 9 * d..1 + 9 * (d + 1)].try_into().expect("nine parameters");
        let vars = CGruVars::new(child, raw, drop)?;
        cgru_sequence(child, ins[0], &vars, layer.directions[d].0, stride)
    })
}
