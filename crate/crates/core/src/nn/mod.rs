//! Parameterized layers and the composite blocks of the detector.
//!
//! Parameters live in [`Param`]s owned by the blocks. A forward pass runs
//! against a [`Ctx`], which records the computation and maps each parameter to
//! its graph leaf so gradients and batch-norm statistics can be written back
//! after the pass.

mod blocks;
mod layers;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use blocks::{Bottleneck, Cbs, Csp, SeBlock, Sppf};
pub use layers::{BatchNorm2d, Conv2d, Linear};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    FcWeight,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Whether weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::FcWeight)
    }

    pub fn block_type(self) -> &'static str {
        match self {
            ParamKind::ConvWeight | ParamKind::ConvBias => "conv",
            ParamKind::FcWeight => "fc",
            ParamKind::BnGamma | ParamKind::BnBeta => "bn",
            ParamKind::RunningMean | ParamKind::RunningVar => "bn_stat",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    id: usize,
    pub kind: ParamKind,
    pub value: Tensor,
}

impl Param {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Hands out parameter ids and seeded initial values.
#[derive(Debug)]
pub struct ParamBuilder {
    next_id: usize,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            next_id: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn make(&mut self, kind: ParamKind, value: Tensor) -> Param {
        let id = self.next_id;
        self.next_id += 1;
        let trainable = kind.trainable();
        Param {
            id,
            kind,
            value: value.with_requires_grad(trainable),
        }
    }

    /// Uniform in ±1/√fan_in.
    pub fn fan_in_uniform(&mut self, kind: ParamKind, shape: &[usize], fan_in: usize) -> Param {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.make(kind, t)
    }

    pub fn constant(&mut self, kind: ParamKind, shape: &[usize], value: f64) -> Param {
        self.make(kind, Tensor::full(shape, value))
    }

    pub fn count(&self) -> usize {
        self.next_id
    }
}

/// Anything holding parameters. Visiting order is the stable parameter order
/// used for checkpoints and optimizer state.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.kind.trainable() {
                n += p.value.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// One forward pass: the recorded graph, the train/inference switch, the
/// parameter-to-leaf map and pending running-statistic updates.
#[derive(Debug)]
pub struct Ctx {
    pub graph: Graph,
    pub training: bool,
    vars: BTreeMap<usize, Var>,
    stat_updates: Vec<(usize, Vec<f64>)>,
}

impl Ctx {
    pub fn new(training: bool) -> Self {
        Self {
            graph: Graph::new(),
            training,
            vars: BTreeMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn training() -> Self {
        Self::new(true)
    }

    pub fn inference() -> Self {
        Self::new(false)
    }

    /// Graph leaf for `p`, created on first use. Parameters track gradients
    /// only in training mode.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.vars.get(&p.id) {
            return v;
        }
        let v = if self.training && p.kind.trainable() {
            self.graph.leaf(&p.value)
        } else {
            self.graph.constant(p.value.clone())
        };
        self.vars.insert(p.id, v);
        v
    }

    pub fn var_of(&self, p: &Param) -> Option<Var> {
        self.vars.get(&p.id).copied()
    }

    pub(crate) fn push_stat_update(&mut self, id: usize, value: Vec<f64>) {
        self.stat_updates.push((id, value));
    }

    /// Copies leaf gradients into the parameters' gradient buffers
    /// (accumulating) and applies running-statistic updates.
    pub fn write_back(&self, module: &mut dyn Module) -> Result<()> {
        let updates: BTreeMap<usize, &Vec<f64>> =
            self.stat_updates.iter().map(|(id, v)| (*id, v)).collect();
        let mut err = None;
        module.visit_mut("", &mut |_, p| {
            if let Some(v) = self.vars.get(&p.id) {
                if let Some(g) = self.graph.grad(*v) {
                    if let Err(e) = p.value.accumulate_grad(g) {
                        err.get_or_insert(e);
                    }
                }
            }
            if let Some(new) = updates.get(&p.id) {
                p.value.data_mut().copy_from_slice(new);
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Writes every parameter as `<name>.bin` plus a `manifest.txt` with one line
/// per tensor: block type, name, shape (`AxBxC`) and file name, in visiting
/// order.
pub fn save_params(module: &dyn Module, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::new();
    let mut err = None;
    module.visit("", &mut |name, p| {
        let file = format!("{name}.bin");
        let shape = p
            .value
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(manifest, "{} {} {} {}", p.kind.block_type(), name, shape, file)
            .expect("write to Vec");
        if let Err(e) = p.value.save(&dir.join(&file)) {
            err.get_or_insert(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Loads parameters written by [`save_params`] into a module of identical
/// architecture. Names and shapes must match the manifest exactly.
pub fn load_params(module: &mut dyn Module, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<(String, String)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            match parts.as_slice() {
                [_, name, _, file] => Ok((name.to_string(), file.to_string())),
                _ => Err(Error::BadTensorFile(format!("bad manifest line `{l}`"))),
            }
        })
        .collect::<Result<_>>()?;
    let mut idx = 0;
    let mut err: Option<Error> = None;
    module.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some((want, file)) = entries.get(idx) else {
            err = Some(Error::BadTensorFile(format!("manifest ends before `{name}`")));
            return;
        };
        idx += 1;
        if want != name {
            err = Some(Error::BadTensorFile(format!(
                "manifest lists `{want}` where the model expects `{name}`"
            )));
            return;
        }
        match Tensor::load(&dir.join(file)) {
            Ok(t) if t.shape() == p.value.shape() => {
                let rg = p.value.requires_grad();
                p.value = t.with_requires_grad(rg);
            }
            Ok(t) => {
                err = Some(Error::ShapeMismatch {
                    op: "load_params",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                })
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != entries.len() {
        return Err(Error::BadTensorFile(format!(
            "manifest has {} entries, model has {idx}",
            entries.len()
        )));
    }
    Ok(())
}
