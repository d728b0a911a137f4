use super::{join, BatchNorm2d, Conv2d, Ctx, Linear, Module, Param, ParamBuilder};
use crate::autodiff::Var;
use crate::error::{Error, Result};

fn check_channels(ctx: &Ctx, x: Var, want: usize, block: &'static str) -> Result<()> {
    let shape = ctx.graph.shape(x);
    if shape.len() != 4 || shape[1] != want {
        return Err(Error::ShapeMismatch {
            op: block,
            lhs: shape.to_vec(),
            rhs: vec![want],
        });
    }
    Ok(())
}

/// Convolution, batch normalization, SiLU.
#[derive(Debug, Clone)]
pub struct Cbs {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Cbs {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(pb, in_ch, out_ch, kernel, stride, false)?;
        let bn = BatchNorm2d::new(pb, out_ch);
        Ok(Self { conv, bn })
    }

    pub fn in_ch(&self) -> usize {
        self.conv.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.conv.out_ch
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.conv.in_ch, "cbs")?;
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.silu(y))
    }
}

impl Module for Cbs {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// A 1×1 CBS followed by a 3×3 CBS at constant width, with an optional
/// residual connection.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, shortcut: bool) -> Result<Self> {
        if shortcut && in_ch != out_ch {
            return Err(Error::InvalidConfig(format!(
                "bottleneck shortcut needs equal channels, got {in_ch}->{out_ch}"
            )));
        }
        Ok(Self {
            cv1: Cbs::new(pb, in_ch, out_ch, 1, 1)?,
            cv2: Cbs::new(pb, out_ch, out_ch, 3, 1)?,
            shortcut,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let y = self.cv2.forward(ctx, y)?;
        if self.shortcut {
            ctx.graph.add(x, y)
        } else {
            Ok(y)
        }
    }
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
    }
}

/// Cross-stage partial block: one 1×1 branch runs through a bottleneck chain,
/// a second 1×1 branch bypasses it, and a final 1×1 CBS merges their
/// concatenation.
#[derive(Debug, Clone)]
pub struct Csp {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub chain: Vec<Bottleneck>,
    pub cv3: Cbs,
}

impl Csp {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        depth: usize,
        shortcut: bool,
    ) -> Result<Self> {
        let hidden = (out_ch / 2).max(1);
        let cv1 = Cbs::new(pb, in_ch, hidden, 1, 1)?;
        let cv2 = Cbs::new(pb, in_ch, hidden, 1, 1)?;
        let chain = (0..depth)
            .map(|_| Bottleneck::new(pb, hidden, hidden, shortcut))
            .collect::<Result<_>>()?;
        let cv3 = Cbs::new(pb, 2 * hidden, out_ch, 1, 1)?;
        Ok(Self {
            cv1,
            cv2,
            chain,
            cv3,
        })
    }

    pub fn out_ch(&self) -> usize {
        self.cv3.out_ch()
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.cv1.in_ch(), "csp")?;
        let mut a = self.cv1.forward(ctx, x)?;
        for b in &self.chain {
            a = b.forward(ctx, a)?;
        }
        let b = self.cv2.forward(ctx, x)?;
        let cat = ctx.graph.concat_channels(&[a, b])?;
        self.cv3.forward(ctx, cat)
    }
}

impl Module for Csp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
        for (i, b) in self.chain.iter().enumerate() {
            b.visit(&join(prefix, &format!("m{i}")), f);
        }
        self.cv3.visit(&join(prefix, "cv3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
        for (i, b) in self.chain.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("m{i}")), f);
        }
        self.cv3.visit_mut(&join(prefix, "cv3"), f);
    }
}

/// Spatial pyramid pooling, fast form: three stacked stride-1 max-pools whose
/// outputs are concatenated with their input.
#[derive(Debug, Clone)]
pub struct Sppf {
    pub cv1: Cbs,
    pub kernel: usize,
    pub cv2: Cbs,
}

impl Sppf {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "sppf kernel must be odd, got {kernel}"
            )));
        }
        let hidden = (in_ch / 2).max(1);
        Ok(Self {
            cv1: Cbs::new(pb, in_ch, hidden, 1, 1)?,
            kernel,
            cv2: Cbs::new(pb, 4 * hidden, out_ch, 1, 1)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let pad = self.kernel / 2;
        let y0 = self.cv1.forward(ctx, x)?;
        let y1 = ctx.graph.maxpool2d(y0, self.kernel, 1, pad)?;
        let y2 = ctx.graph.maxpool2d(y1, self.kernel, 1, pad)?;
        let y3 = ctx.graph.maxpool2d(y2, self.kernel, 1, pad)?;
        let cat = ctx.graph.concat_channels(&[y0, y1, y2, y3])?;
        self.cv2.forward(ctx, cat)
    }
}

impl Module for Sppf {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
    }
}

/// Squeeze-and-excitation channel attention: per-channel means pass through
/// `relu(W1·z)` then `sigmoid(W2·h)` to produce gates that rescale each
/// channel of the input.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeBlock {
    pub const DEFAULT_REDUCTION: usize = 16;

    pub fn new(pb: &mut ParamBuilder, channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::InvalidConfig(format!(
                "se block needs channels and reduction >= 1, got {channels}/{reduction}"
            )));
        }
        let hidden = Self::hidden_width(channels, reduction);
        Ok(Self {
            channels,
            reduction,
            fc1: Linear::new(pb, channels, hidden),
            fc2: Linear::new(pb, hidden, channels),
        })
    }

    /// `C / r`, never below one.
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction).max(1)
    }

    /// Channel gates `s`, shaped `N×C`.
    pub fn excitation(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, "se")?;
        let z = ctx.graph.global_avg_pool(x)?;
        let h = self.fc1.forward(ctx, z)?;
        let h = ctx.graph.relu(h);
        let s = self.fc2.forward(ctx, h)?;
        Ok(ctx.graph.sigmoid(s))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = self.excitation(ctx, x)?;
        ctx.graph.scale_channels(x, s)
    }
}

impl Module for SeBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
