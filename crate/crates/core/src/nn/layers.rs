use super::{join, Ctx, Module, Param, ParamBuilder, ParamKind};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_ch == 0 || out_ch == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv {in_ch}->{out_ch} k{kernel} s{stride} is degenerate"
            )));
        }
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.fan_in_uniform(ParamKind::ConvWeight, &[out_ch, in_ch, kernel, kernel], fan_in);
        let bias = bias.then(|| pb.fan_in_uniform(ParamKind::ConvBias, &[out_ch], fan_in));
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
            bias,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-3;
    pub const MOMENTUM: f64 = 0.03;

    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        Self {
            gamma: pb.constant(ParamKind::BnGamma, &[channels], 1.0),
            beta: pb.constant(ParamKind::BnBeta, &[channels], 0.0),
            running_mean: pb.constant(ParamKind::RunningMean, &[channels], 0.0),
            running_var: pb.constant(ParamKind::RunningVar, &[channels], 1.0),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    /// In training mode, normalizes with batch statistics and schedules the
    /// running estimates to move toward them by `momentum` (the variance
    /// estimate uses the unbiased batch variance).
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        let running = (self.running_mean.value.data(), self.running_var.value.data());
        let training = ctx.training;
        let (y, stats) = ctx.graph.batchnorm2d(x, g, b, running, self.eps, training)?;
        if let Some(s) = stats {
            let m = self.momentum;
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let mean = running
                .0
                .iter()
                .zip(&s.mean)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            let var = running
                .1
                .iter()
                .zip(&s.var)
                .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                .collect();
            ctx.push_stat_update(self.running_mean.id(), mean);
            ctx.push_stat_update(self.running_var.id(), var);
        }
        Ok(y)
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Bias-free fully connected layer, `out×in` weight.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_f: usize, out_f: usize) -> Self {
        Self {
            weight: pb.fan_in_uniform(ParamKind::FcWeight, &[out_f, in_f], in_f),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        ctx.graph.fully_connected(x, w, None)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}
