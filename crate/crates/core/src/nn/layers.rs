use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, Var};

use super::{Mode, NnError, ParamKind, ParamRegistry, Result, Session};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Plain convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Stride 1 with "same" padding.
    pub fn same(name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            name: name.to_string(),
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        let fan_in = self.c_in * self.kernel * self.kernel;
        reg.insert(
            &format!("{}.w", self.name),
            &[self.c_out, self.c_in, self.kernel, self.kernel],
            ParamKind::Weight { fan_in },
        )?;
        reg.insert(&format!("{}.b", self.name), &[self.c_out], ParamKind::Bias)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&format!("{}.w", self.name))?;
        let b = s.param(&format!("{}.b", self.name))?;
        let y = s.tape.conv2d(x, w, self.stride, self.padding)?;
        let b = s.tape.reshape(b, &[1, self.c_out, 1, 1])?;
        Ok(s.tape.add(y, b)?)
    }
}

/// Batch normalization over every axis except axis 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub config: BnConfig,
}

impl BatchNorm {
    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        let c = [self.channels];
        reg.insert(&format!("{}.scale", self.name), &c, ParamKind::BnScale)?;
        reg.insert(&format!("{}.shift", self.name), &c, ParamKind::BnShift)?;
        reg.insert(&format!("{}.rmean", self.name), &c, ParamKind::RunningMean)?;
        reg.insert(&format!("{}.rvar", self.name), &c, ParamKind::RunningVar)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(NnError::Tensor(crate::tensor::TensorError::Shape {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![self.channels],
            }));
        }
        let mut bshape = vec![1; shape.len()];
        bshape[1] = self.channels;
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let scale = s.param(&format!("{}.scale", self.name))?;
        let shift = s.param(&format!("{}.shift", self.name))?;
        let scale = s.tape.reshape(scale, &bshape)?;
        let shift = s.tape.reshape(shift, &bshape)?;
        let normalized = match s.mode() {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(NnError::Usage(format!(
                        "{}: train-mode batch norm needs a batch of at least 2",
                        self.name
                    )));
                }
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let mean = s.tape.mean(x, &axes, true)?;
                let centered = s.tape.sub(x, mean)?;
                let sq = s.tape.square(centered);
                let var = s.tape.mean(sq, &axes, true)?;
                let var_eps = s.tape.add_scalar(var, self.config.eps);
                let std = s.tape.sqrt(var_eps)?;
                let out = s.tape.div(centered, std)?;

                let mom = self.config.momentum;
                let unbias = count as f64 / (count - 1) as f64;
                let rm = s.registry().value(&format!("{}.rmean", self.name))?;
                let rv = s.registry().value(&format!("{}.rvar", self.name))?;
                let bm = s.tape.value(mean).data();
                let bv = s.tape.value(var).data();
                let new_rm = Tensor::from_fn(&[self.channels], |c| (1.0 - mom) * rm.data()[c] + mom * bm[c]);
                let new_rv = Tensor::from_fn(&[self.channels], |c| (1.0 - mom) * rv.data()[c] + mom * bv[c] * unbias);
                s.queue_update(format!("{}.rmean", self.name), new_rm);
                s.queue_update(format!("{}.rvar", self.name), new_rv);
                out
            }
            Mode::Eval => {
                let rm = s.param(&format!("{}.rmean", self.name))?;
                let rv = s.registry().value(&format!("{}.rvar", self.name))?;
                let std = Tensor::new(
                    &bshape,
                    rv.data().iter().map(|v| (v + self.config.eps).sqrt()).collect(),
                )?;
                let std = s.input(std);
                let rm = s.tape.reshape(rm, &bshape)?;
                let centered = s.tape.sub(x, rm)?;
                s.tape.div(centered, std)?
            }
        };
        let scaled = s.tape.mul(normalized, scale)?;
        Ok(s.tape.add(scaled, shift)?)
    }
}

/// Conv → PReLU (per-channel slope) → BatchNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, bn: BnConfig) -> Self {
        Self {
            name: name.to_string(),
            conv: Conv {
                name: format!("{name}.conv"),
                c_in,
                c_out,
                kernel,
                stride,
                padding: (kernel - 1) / 2,
            },
            bn: BatchNorm {
                name: format!("{name}.bn"),
                channels: c_out,
                config: bn,
            },
        }
    }

    pub fn c_in(&self) -> usize {
        self.conv.c_in
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out
    }

    fn alpha_name(&self) -> String {
        format!("{}.alpha", self.name)
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        self.conv.register(reg)?;
        reg.insert(&self.alpha_name(), &[self.conv.c_out], ParamKind::Slope)?;
        self.bn.register(reg)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.conv.c_in {
            return Err(NnError::Tensor(crate::tensor::TensorError::Shape {
                op: "conv_block",
                lhs: shape.to_vec(),
                rhs: vec![self.conv.c_in],
            }));
        }
        let y = self.conv.forward(s, x)?;
        let alpha = s.param(&self.alpha_name())?;
        let y = s.tape.prelu(y, alpha)?;
        self.bn.forward(s, y)
    }
}

/// Affine map `x·W + b` on `N×d_in` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.to_string(),
            d_in,
            d_out,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        reg.insert(
            &format!("{}.w", self.name),
            &[self.d_in, self.d_out],
            ParamKind::Weight { fan_in: self.d_in },
        )?;
        reg.insert(&format!("{}.b", self.name), &[self.d_out], ParamKind::Bias)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&format!("{}.w", self.name))?;
        let b = s.param(&format!("{}.b", self.name))?;
        let y = s.tape.matmul(x, w)?;
        Ok(s.tape.add(y, b)?)
    }
}

/// `W₂·prelu(W₁x + b₁) + b₂` with a single shared slope.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBlock {
    pub name: String,
    pub first: Linear,
    pub second: Linear,
}

impl LinearBlock {
    pub fn new(name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            name: name.to_string(),
            first: Linear::new(&format!("{name}.l1"), d_in, d_hidden),
            second: Linear::new(&format!("{name}.l2"), d_hidden, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.first.d_in
    }

    pub fn d_out(&self) -> usize {
        self.second.d_out
    }

    fn alpha_name(&self) -> String {
        format!("{}.alpha", self.name)
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        if self.first.d_out == 0 {
            return Err(NnError::Config(format!("{}: inner width must be positive", self.name)));
        }
        self.first.register(reg)?;
        reg.insert(&self.alpha_name(), &[1], ParamKind::Slope)?;
        self.second.register(reg)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.first.d_in {
            return Err(NnError::Tensor(crate::tensor::TensorError::Shape {
                op: "linear_block",
                lhs: shape.to_vec(),
                rhs: vec![self.first.d_in],
            }));
        }
        let h = self.first.forward(s, x)?;
        let alpha = s.param(&self.alpha_name())?;
        let h = s.tape.prelu(h, alpha)?;
        self.second.forward(s, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    Conv(ConvBlock),
    Linear(LinearBlock),
}

impl Unit {
    fn widths(&self) -> (usize, usize) {
        match self {
            Unit::Conv(b) => (b.c_in(), b.c_out()),
            Unit::Linear(b) => (b.d_in(), b.d_out()),
        }
    }

    fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        match self {
            Unit::Conv(b) => b.register(reg),
            Unit::Linear(b) => b.register(reg),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Unit::Conv(b) => b.forward(s, x),
            Unit::Linear(b) => b.forward(s, x),
        }
    }
}

/// Skip path of a residual group: identity when widths match, otherwise a
/// 1×1 convolution or a linear projection.
#[derive(Debug, Clone, PartialEq)]
pub enum Skip {
    Identity,
    Conv(Conv),
    Linear(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGroup {
    pub units: Vec<Unit>,
    pub skip: Skip,
}

impl ResidualGroup {
    fn widths(&self) -> Option<(usize, usize)> {
        Some((self.units.first()?.widths().0, self.units.last()?.widths().1))
    }
}

/// Residual groups applied in sequence, each `units(x) + skip(x)`, with an
/// optional sigmoid at the very end.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    pub groups: Vec<ResidualGroup>,
    pub final_sigmoid: bool,
}

#[derive(Clone, Copy)]
enum Kind {
    Conv { kernel: usize, bn: BnConfig },
    Linear,
}

impl ResidualStack {
    /// Checks that unit widths chain and skips match their groups.
    pub fn new(groups: Vec<ResidualGroup>, final_sigmoid: bool) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (gi, g) in groups.iter().enumerate() {
            let (gin, gout) = g
                .widths()
                .ok_or_else(|| NnError::Config(format!("residual group {gi} is empty")))?;
            let mut w = gin;
            for u in &g.units {
                let (a, b) = u.widths();
                if a != w {
                    return Err(NnError::Config(format!(
                        "residual group {gi}: unit expects width {a}, receives {w}"
                    )));
                }
                w = b;
            }
            let skip_ok = match &g.skip {
                Skip::Identity => gin == gout,
                Skip::Conv(c) => c.c_in == gin && c.c_out == gout,
                Skip::Linear(l) => l.d_in == gin && l.d_out == gout,
            };
            if !skip_ok {
                return Err(NnError::Config(format!(
                    "residual group {gi}: skip path does not match {gin}->{gout}"
                )));
            }
            if let Some(prev) = width {
                if prev != gin {
                    return Err(NnError::Config(format!(
                        "residual group {gi} expects width {gin}, previous group emits {prev}"
                    )));
                }
            }
            width = Some(gout);
        }
        Ok(Self { groups, final_sigmoid })
    }

    /// Conv stack of `groups × per_group` {Conv-PReLU-BN} units.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        groups: usize,
        per_group: usize,
        kernel: usize,
        bn: BnConfig,
    ) -> Result<Self> {
        Self::build(name, c_in, hidden, c_out, groups, per_group, Kind::Conv { kernel, bn })
    }

    /// Linear stack of `groups × per_group` {Linear-PReLU-Linear} units.
    pub fn linear(
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        groups: usize,
        per_group: usize,
    ) -> Result<Self> {
        Self::build(name, d_in, hidden, d_out, groups, per_group, Kind::Linear)
    }

    fn build(
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        groups: usize,
        per_group: usize,
        kind: Kind,
    ) -> Result<Self> {
        if groups == 0 || per_group == 0 || hidden == 0 {
            return Err(NnError::Config(format!(
                "{name}: groups, units and width must be positive"
            )));
        }
        let mut out = Vec::with_capacity(groups);
        for g in 0..groups {
            let gin = if g == 0 { d_in } else { hidden };
            let gout = if g + 1 == groups { d_out } else { hidden };
            let units = (0..per_group)
                .map(|u| {
                    let uin = if u == 0 { gin } else { hidden };
                    let uout = if u + 1 == per_group { gout } else { hidden };
                    let uname = format!("{name}.g{g}.u{u}");
                    match kind {
                        Kind::Conv { kernel, bn } => Unit::Conv(ConvBlock::new(&uname, uin, uout, kernel, 1, bn)),
                        Kind::Linear => Unit::Linear(LinearBlock::new(&uname, uin, hidden, uout)),
                    }
                })
                .collect();
            let skip = if gin == gout {
                Skip::Identity
            } else {
                let sname = format!("{name}.g{g}.skip");
                match kind {
                    Kind::Conv { .. } => Skip::Conv(Conv::same(&sname, gin, gout, 1)),
                    Kind::Linear => Skip::Linear(Linear::new(&sname, gin, gout)),
                }
            };
            out.push(ResidualGroup { units, skip });
        }
        Self::new(out, true)
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        for g in &self.groups {
            for u in &g.units {
                u.register(reg)?;
            }
            match g.units.last() {
                Some(Unit::Conv(b)) => reg.set_kind(&format!("{}.scale", b.bn.name), ParamKind::Zeroed)?,
                Some(Unit::Linear(b)) => reg.set_kind(&format!("{}.w", b.second.name), ParamKind::Zeroed)?,
                None => {}
            }
            match &g.skip {
                Skip::Identity => {}
                Skip::Conv(c) => c.register(reg)?,
                Skip::Linear(l) => l.register(reg)?,
            }
        }
        Ok(())
    }

    /// Output before the final sigmoid.
    pub fn forward_logits(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for g in &self.groups {
            let mut y = h;
            for u in &g.units {
                y = u.forward(s, y)?;
            }
            let skip = match &g.skip {
                Skip::Identity => h,
                Skip::Conv(c) => c.forward(s, h)?,
                Skip::Linear(l) => l.forward(s, h)?,
            };
            h = s.tape.add(y, skip)?;
        }
        Ok(h)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.forward_logits(s, x)?;
        Ok(if self.final_sigmoid { s.tape.sigmoid(h) } else { h })
    }
}
