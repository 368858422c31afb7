//! Conditional flow matching on the optimal-transport path.
//!
//! The conditional path is `p_t(x | x1) = N(t x1, (1 - (1 - sigma_min) t)^2 I)`
//! with target field `u_t(x | x1) = (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)`.
//! Training regresses a network onto `u_t` on masked frames only; sampling
//! integrates the learned field from `t = 0` to `t = 1` with a fixed step.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardTape, Layout, NetworkParams};
use crate::icl::MaskSpec;
use crate::real::all_finite;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Midpoint,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            other => Err(Error::invalid(format!("unknown solver {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub ode_steps: usize,
    pub solver: Solver,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-5,
            ode_steps: 32,
            solver: Solver::Euler,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::invalid(format!(
                "sigma_min must lie in (0, 1), got {}",
                self.sigma_min
            )));
        }
        if self.ode_steps == 0 {
            return Err(Error::invalid("ode_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Standard deviation of the OT path at time `t`; never below `sigma_min`.
pub fn path_std(t: f64, sigma_min: f64) -> f64 {
    1.0 - (1.0 - sigma_min) * t
}

/// Closed-form conditional vector field `u_t(x | x1)`.
pub fn conditional_vector_field(x: f64, x1: f64, t: f64, sigma_min: f64) -> f64 {
    (x1 - (1.0 - sigma_min) * x) / path_std(t, sigma_min)
}

#[derive(Debug, Clone)]
pub struct PathSample<F> {
    pub t: f64,
    pub x_t: Array2<F>,
    pub u_target: Array2<F>,
}

/// Draws `x_t = t x1 + (1 - (1 - sigma_min) t) noise` and evaluates the
/// conditional field there. Arithmetic is done in `f64`.
pub fn sample_path<F: Real>(
    x1: &Array2<F>,
    t: f64,
    noise: &Array2<F>,
    cfg: &FlowConfig,
) -> Result<PathSample<F>> {
    if x1.dim() != noise.dim() {
        return Err(Error::shape(
            "path noise",
            format!("{:?}", x1.dim()),
            format!("{:?}", noise.dim()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    if !all_finite(x1) || !all_finite(noise) {
        return Err(Error::NonFinite("path sample inputs".into()));
    }
    let std = path_std(t, cfg.sigma_min);
    let mut x_t = Array2::zeros(x1.dim());
    let mut u = Array2::zeros(x1.dim());
    ndarray::Zip::from(&mut x_t)
        .and(&mut u)
        .and(x1)
        .and(noise)
        .for_each(|xt, ut, &a, &n| {
            let x = t * a.f64() + std * n.f64();
            *xt = F::of(x);
            *ut = F::of(conditional_vector_field(x, a.f64(), t, cfg.sigma_min));
        });
    Ok(PathSample {
        t,
        x_t,
        u_target: u,
    })
}

/// A (possibly batched) differentiable vector field.
///
/// Inputs are per-frame conditioning rows `[semantic | mel state | prosody]`;
/// outputs are mel-dimensional velocities for the same rows.
pub trait VectorField<F: Real> {
    type Grads;
    type Tape;

    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn eval(&self, input: &Array2<F>, layout: &Layout) -> Result<Array2<F>>;

    fn eval_taped(&self, input: &Array2<F>, layout: &Layout) -> Result<(Array2<F>, Self::Tape)>;

    /// Returns parameter gradients and the input gradient.
    fn pullback(
        &self,
        tape: Self::Tape,
        output_grad: &Array2<F>,
    ) -> Result<(Self::Grads, Array2<F>)>;
}

impl<F: Real> VectorField<F> for NetworkParams<F> {
    type Grads = NetworkParams<F>;
    type Tape = ForwardTape<F>;

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn eval(&self, input: &Array2<F>, layout: &Layout) -> Result<Array2<F>> {
        self.forward_layout(input, layout)
    }

    fn eval_taped(&self, input: &Array2<F>, layout: &Layout) -> Result<(Array2<F>, Self::Tape)> {
        self.forward_taped(input, layout)
    }

    fn pullback(
        &self,
        tape: Self::Tape,
        output_grad: &Array2<F>,
    ) -> Result<(Self::Grads, Array2<F>)> {
        self.backward_tape(tape, output_grad)
    }
}

/// Stacks `[s | state | p]` column-wise.
pub fn assemble_input<F: Real>(
    s_embed: Option<&Array2<F>>,
    state: &Array2<F>,
    p_embed: Option<&Array2<F>>,
) -> Result<Array2<F>> {
    let rows = state.nrows();
    let mut parts = Vec::with_capacity(3);
    if let Some(s) = s_embed {
        if s.nrows() != rows {
            return Err(Error::shape("semantic rows", rows, s.nrows()));
        }
        parts.push(s.view());
    }
    parts.push(state.view());
    if let Some(p) = p_embed {
        if p.nrows() != rows {
            return Err(Error::shape("prosody rows", rows, p.nrows()));
        }
        parts.push(p.view());
    }
    Ok(concatenate(Axis(1), &parts).expect("row counts checked"))
}

/// What to do with an example whose mask selects no frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Reject it: there is no training signal.
    Strict,
    /// Let it contribute zero loss.
    Lenient,
}

/// One training example: clean mel, conditioning channels and mask.
#[derive(Debug, Clone, Copy)]
pub struct CfmExample<'a, F> {
    pub x1: &'a Array2<F>,
    pub s_embed: Option<&'a Array2<F>>,
    pub p_embed: Option<&'a Array2<F>>,
    pub mask: &'a MaskSpec,
}

/// Random draws that define one path sample.
#[derive(Debug, Clone)]
pub struct PathDraw<F> {
    pub t: f64,
    pub noise: Array2<F>,
}

impl<F: Real> PathDraw<F> {
    /// `t ~ U[0, 1]`, noise standard normal.
    pub fn sample(rows: usize, cols: usize, rng: &mut crate::Rng) -> Self {
        let t = rng.random_range(0.0..=1.0);
        let noise =
            Array2::from_shape_simple_fn((rows, cols), || F::of(rng.sample(StandardNormal)));
        Self { t, noise }
    }
}

#[derive(Debug, Clone)]
pub struct CfmOutput<G, F> {
    /// Mean over examples of the per-example masked mean squared error.
    pub loss: f64,
    pub per_example: Vec<f64>,
    pub grads: G,
    pub d_s_embed: Vec<Option<Array2<F>>>,
    pub d_p_embed: Vec<Option<Array2<F>>>,
}

/// Masked CFM loss and gradients for a batch with explicit path draws.
///
/// The network sees the clean mel on unmasked frames and `x_t` on masked
/// frames; only masked frames enter the loss, so unmasked-frame outputs get an
/// exactly zero output gradient.
pub fn cfm_loss_with_draws<F: Real, M: VectorField<F>>(
    model: &M,
    examples: &[CfmExample<'_, F>],
    draws: &[PathDraw<F>],
    cfg: &FlowConfig,
    policy: MaskPolicy,
) -> Result<CfmOutput<M::Grads, F>> {
    cfg.validate()?;
    if examples.is_empty() || examples.len() != draws.len() {
        return Err(Error::invalid("need one path draw per example"));
    }
    let f = model.output_dim();
    let mut inputs = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for (ex, dr) in examples.iter().zip(draws) {
        let rows = ex.x1.nrows();
        if ex.x1.ncols() != f {
            return Err(Error::shape("mel dim", f, ex.x1.ncols()));
        }
        if ex.mask.len() != rows {
            return Err(Error::shape("mask length", rows, ex.mask.len()));
        }
        if policy == MaskPolicy::Strict && ex.mask.masked_count() == 0 {
            return Err(Error::invalid("mask selects no frame: no training signal"));
        }
        let path = sample_path(ex.x1, dr.t, &dr.noise, cfg)?;
        let mut state = ex.x1.clone();
        for (i, &m) in ex.mask.flags().iter().enumerate() {
            if m {
                state.row_mut(i).assign(&path.x_t.row(i));
            }
        }
        inputs.push(assemble_input(ex.s_embed, &state, ex.p_embed)?);
        targets.push(path.u_target);
    }
    let lengths: Vec<usize> = examples.iter().map(|e| e.x1.nrows()).collect();
    let times: Vec<f64> = draws.iter().map(|d| d.t).collect();
    let layout = Layout::new(&lengths, &times)?;
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let input = concatenate(Axis(0), &views)
        .map_err(|_| Error::invalid("examples disagree on conditioning columns"))?;
    if input.ncols() != model.input_dim() {
        return Err(Error::shape(
            "conditioning columns",
            model.input_dim(),
            input.ncols(),
        ));
    }

    let (out, tape) = model.eval_taped(&input, &layout)?;
    let batch = examples.len() as f64;
    let mut dout = Array2::<F>::zeros(out.dim());
    let mut per_example = Vec::with_capacity(examples.len());
    for ((seg, ex), u) in layout.segments().iter().zip(examples).zip(&targets) {
        let n = ex.mask.masked_count();
        if n == 0 {
            per_example.push(0.0);
            continue;
        }
        let denom = (n * f) as f64;
        let mut sse = 0.0;
        for (i, &m) in ex.mask.flags().iter().enumerate() {
            if !m {
                continue;
            }
            let r = seg.start + i;
            for j in 0..f {
                let diff = out[[r, j]].f64() - u[[i, j]].f64();
                sse += diff * diff;
                dout[[r, j]] = F::of(2.0 * diff / (denom * batch));
            }
        }
        per_example.push(sse / denom);
    }
    let loss = per_example.iter().sum::<f64>() / batch;
    let (grads, dinput) = model.pullback(tape, &dout)?;

    let mut d_s_embed = Vec::with_capacity(examples.len());
    let mut d_p_embed = Vec::with_capacity(examples.len());
    for (seg, ex) in layout.segments().iter().zip(examples) {
        let rows = dinput.slice(s![seg.start..seg.start + seg.len, ..]);
        let sd = ex.s_embed.map_or(0, |s| s.ncols());
        d_s_embed.push(ex.s_embed.map(|_| rows.slice(s![.., ..sd]).to_owned()));
        d_p_embed.push(ex.p_embed.map(|_| rows.slice(s![.., sd + f..]).to_owned()));
    }
    Ok(CfmOutput {
        loss,
        per_example,
        grads,
        d_s_embed,
        d_p_embed,
    })
}

/// Masked CFM loss for one example; draws `t` and the noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn cfm_loss<F: Real, M: VectorField<F>>(
    model: &M,
    x1: &Array2<F>,
    s_embed: Option<&Array2<F>>,
    p_embed: Option<&Array2<F>>,
    mask: &MaskSpec,
    cfg: &FlowConfig,
    policy: MaskPolicy,
    rng: &mut crate::Rng,
) -> Result<CfmOutput<M::Grads, F>> {
    let draw = PathDraw::sample(x1.nrows(), x1.ncols(), rng);
    let ex = CfmExample {
        x1,
        s_embed,
        p_embed,
        mask,
    };
    cfm_loss_with_draws(model, &[ex], &[draw], cfg, policy)
}

/// Integrates `dx/dt = v_t(x)` from 0 to 1 for one sequence. Rows whose mask
/// flag is `false` are held at `frozen_values` throughout.
#[allow(clippy::too_many_arguments)]
pub fn integrate<F: Real, M: VectorField<F>>(
    model: &M,
    x0: &Array2<F>,
    s_embed: Option<&Array2<F>>,
    p_embed: Option<&Array2<F>>,
    mask: &MaskSpec,
    frozen_values: &Array2<F>,
    cfg: &FlowConfig,
) -> Result<Array2<F>> {
    integrate_segments(
        model,
        x0,
        s_embed,
        p_embed,
        mask,
        frozen_values,
        &[x0.nrows()],
        cfg,
    )
}

/// Batched [`integrate`]: rows are split into independent segments.
#[allow(clippy::too_many_arguments)]
pub fn integrate_segments<F: Real, M: VectorField<F>>(
    model: &M,
    x0: &Array2<F>,
    s_embed: Option<&Array2<F>>,
    p_embed: Option<&Array2<F>>,
    mask: &MaskSpec,
    frozen_values: &Array2<F>,
    lengths: &[usize],
    cfg: &FlowConfig,
) -> Result<Array2<F>> {
    cfg.validate()?;
    if mask.len() != x0.nrows() {
        return Err(Error::shape("integration mask", x0.nrows(), mask.len()));
    }
    if frozen_values.dim() != x0.dim() {
        return Err(Error::shape(
            "frozen values",
            format!("{:?}", x0.dim()),
            format!("{:?}", frozen_values.dim()),
        ));
    }
    if x0.ncols() != model.output_dim() {
        return Err(Error::shape("state dim", model.output_dim(), x0.ncols()));
    }
    let layout = Layout::new(lengths, &vec![0.0; lengths.len()])?;
    if layout.rows() != x0.nrows() {
        return Err(Error::shape("segment rows", x0.nrows(), layout.rows()));
    }
    let free: Vec<usize> = (0..mask.len()).filter(|&i| mask.is_masked(i)).collect();
    let mut x = x0.clone();
    for (i, &m) in mask.flags().iter().enumerate() {
        if !m {
            x.row_mut(i).assign(&frozen_values.row(i));
        }
    }
    let n = cfg.ode_steps;
    let dt = 1.0 / n as f64;
    let field = |state: &Array2<F>, t: f64| -> Result<Array2<F>> {
        let input = assemble_input(s_embed, state, p_embed)?;
        model.eval(&input, &layout.at_time(t.min(1.0)))
    };
    let step = |x: &mut Array2<F>, v: &Array2<F>, h: f64| {
        let h = F::of(h);
        for &i in &free {
            let mut row = x.row_mut(i);
            row.scaled_add(h, &v.row(i));
        }
    };
    for k in 0..n {
        let t = k as f64 * dt;
        match cfg.solver {
            Solver::Euler => {
                let v = field(&x, t)?;
                step(&mut x, &v, dt);
            }
            Solver::Midpoint => {
                let v1 = field(&x, t)?;
                let mut mid = x.clone();
                step(&mut mid, &v1, dt / 2.0);
                let v2 = field(&mid, t + dt / 2.0)?;
                step(&mut x, &v2, dt);
            }
        }
        if !all_finite(&x) {
            return Err(Error::Diverged { step: k + 1 });
        }
    }
    Ok(x)
}
