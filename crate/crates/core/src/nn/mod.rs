//! Layer stacks built on the tape: {Conv-PReLU-BN} and {Linear-PReLU-Linear}
//! blocks, residual stacks of them, and the parameter registry they share.
//!
//! Layers are descriptors that only hold names and sizes. Parameter values
//! live in a [`ParamRegistry`]; a [`Session`] binds them onto a tape for one
//! forward (and possibly backward) pass.

mod layers;
mod registry;

pub use layers::{BatchNorm, BnConfig, Conv, ConvBlock, Linear, LinearBlock, ResidualGroup, ResidualStack, Skip, Unit};
pub use registry::{ParamEntry, ParamKind, ParamRegistry, PRELU_INIT};

use std::collections::BTreeMap;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One pass over a tape with registry parameters bound as leaves.
///
/// Trainable entries become gradient-tracked leaves; frozen entries and
/// buffers become constants. Train-mode batch norms queue their running
/// statistic updates here instead of mutating the registry mid-pass.
pub struct Session<'r> {
    pub tape: Tape,
    registry: &'r ParamRegistry,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    stat_updates: Vec<(String, Tensor)>,
}

impl<'r> Session<'r> {
    pub fn new(registry: &'r ParamRegistry, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            registry,
            bound: BTreeMap::new(),
            mode,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn registry(&self) -> &ParamRegistry {
        self.registry
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self
            .registry
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        let v = if entry.trainable {
            self.tape.param(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn queue_update(&mut self, name: String, value: Tensor) {
        self.stat_updates.push((name, value));
    }

    /// Gradients of `loss` for every trainable parameter used in this pass.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if self.tape.requires_grad(v) {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    /// Running-statistic updates produced by train-mode batch norms.
    pub fn stat_updates(&self) -> &[(String, Tensor)] {
        &self.stat_updates
    }

    pub fn into_stat_updates(self) -> Vec<(String, Tensor)> {
        self.stat_updates
    }
}

/// Writes queued running statistics back into the registry.
pub fn apply_stat_updates(registry: &mut ParamRegistry, updates: Vec<(String, Tensor)>) -> Result<()> {
    for (name, value) in updates {
        registry.set_value(&name, value)?;
    }
    Ok(())
}

/// Finite-difference check of `build`'s gradient with respect to the named
/// registry entries. The numeric side perturbs registry copies and reruns the
/// forward pass, so it never touches the backward rules.
pub fn check_param_gradients(
    registry: &ParamRegistry,
    names: &[&str],
    mode: Mode,
    step: f64,
    build: &dyn Fn(&mut Session) -> Result<Var>,
) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::tensor::gradcheck::{rel_error, GradCheckReport};

    let mut s = Session::new(registry, mode);
    let loss = build(&mut s)?;
    let grads = s.gradients(loss)?;
    let eval = |reg: &ParamRegistry| -> Result<f64> {
        let mut s = Session::new(reg, mode);
        let l = build(&mut s)?;
        Ok(s.value(l).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = registry.clone();
    for (k, name) in names.iter().enumerate() {
        let base = registry.value(name)?.clone();
        let analytic = grads.get(*name).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        for i in 0..base.len() {
            let mut up = base.clone();
            up.data_mut()[i] += step;
            work.set_value(name, up)?;
            let fu = eval(&work)?;
            let mut down = base.clone();
            down.data_mut()[i] -= step;
            work.set_value(name, down)?;
            let fd = eval(&work)?;
            work.set_value(name, base.clone())?;
            let numeric = (fu - fd) / (2.0 * step);
            let e = rel_error(analytic.data()[i], numeric);
            if e > report.max_rel_error || !e.is_finite() {
                report = GradCheckReport {
                    max_rel_error: if e.is_finite() { e } else { f64::INFINITY },
                    worst: (k, i),
                    analytic: analytic.data()[i],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Finite-difference check of `build`'s gradient with respect to its
/// tensor inputs, which are bound as tracked leaves.
pub fn check_input_gradients(
    registry: &ParamRegistry,
    inputs: &[Tensor],
    mode: Mode,
    step: f64,
    build: &dyn Fn(&mut Session, &[Var]) -> Result<Var>,
) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::tensor::gradcheck::{numeric_gradient, rel_error, GradCheckReport};

    let mut s = Session::new(registry, mode);
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.param(t.clone())).collect();
    let loss = build(&mut s, &vars)?;
    let grads = s.tape.backward(loss)?;
    let mut failure = None;
    let numeric = numeric_gradient(inputs, step, &mut |xs| {
        let mut s = Session::new(registry, mode);
        let vs: Vec<Var> = xs.iter().map(|t| s.input(t.clone())).collect();
        match build(&mut s, &vs) {
            Ok(l) => Ok(s.value(l).item()),
            Err(e) => {
                failure = Some(e);
                Ok(f64::NAN)
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (k, (v, num)) in vars.iter().zip(&numeric).enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let ana = grads.get(*v).unwrap_or(&zeros);
        for i in 0..num.len() {
            let e = rel_error(ana.data()[i], num.data()[i]);
            if e > report.max_rel_error || !e.is_finite() {
                report = GradCheckReport {
                    max_rel_error: if e.is_finite() { e } else { f64::INFINITY },
                    worst: (k, i),
                    analytic: ana.data()[i],
                    numeric: num.data()[i],
                };
            }
        }
    }
    Ok(report)
}
