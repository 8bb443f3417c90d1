//! Model kinds behind one interface.

pub mod backbone;
pub mod baselines;
pub mod controlnet;

use std::fmt;
use std::str::FromStr;

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::rng_for;
use crate::tensor::{Real, TensorError};

pub use backbone::{backbone_census, Backbone, BackboneConfig, BackboneOutput, ConvLayer, Dense, StageSpec};
pub use baselines::{with_task_planes, ChannelMod, MultiBranch};
pub use controlnet::{control_loss, extract_map, map_argmax, pgm_bytes, write_pgm, ControlNet, ControlOutput, ForwardOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Single,
    MultiBranch,
    ChMod,
    ChModExt,
    ControlNet,
    TdOnly,
    BuOnly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Single,
        ModelKind::MultiBranch,
        ModelKind::ChMod,
        ModelKind::ChModExt,
        ModelKind::ControlNet,
        ModelKind::TdOnly,
        ModelKind::BuOnly,
    ];

    /// Checkpoint code.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Single => "single",
            ModelKind::MultiBranch => "multibranch",
            ModelKind::ChMod => "chmod",
            ModelKind::ChModExt => "chmod-ext",
            ModelKind::ControlNet => "controlnet",
            ModelKind::TdOnly => "td-only",
            ModelKind::BuOnly => "bu-only",
        }
    }

    /// Whether the model has a TD stream and localisation head.
    pub fn has_td(self) -> bool {
        matches!(self, ModelKind::ControlNet | ModelKind::TdOnly)
    }

    pub fn default_channels(self) -> Vec<usize> {
        match self {
            ModelKind::ChModExt => vec![15, 25],
            _ => vec![10, 20],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                format!("unknown model kind '{s}' (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub tasks: usize,
    /// Input dims after padding.
    pub height: usize,
    pub width: usize,
    pub stage_channels: Vec<usize>,
    pub fc_hidden: usize,
    /// TD width per stage; equal to `stage_channels` unless reduced.
    pub td_channels: Vec<usize>,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, tasks: usize, height: usize, width: usize) -> Self {
        let stage_channels = kind.default_channels();
        ModelConfig {
            kind,
            tasks,
            height,
            width,
            td_channels: stage_channels.clone(),
            stage_channels,
            fc_hidden: 50,
        }
    }

    /// Same TD width `c` at every stage.
    pub fn with_td_width(mut self, c: usize) -> Self {
        self.td_channels = vec![c; self.stage_channels.len()];
        self
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut cfg = BackboneConfig::with_channels(&self.stage_channels, self.height, self.width);
        cfg.fc_hidden = self.fc_hidden;
        if self.kind == ModelKind::BuOnly {
            cfg.stages[0].in_channels = 1 + self.tasks;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    /// One independent backbone per task.
    Single(Vec<Backbone>),
    MultiBranch(MultiBranch),
    ChMod(ChannelMod),
    Control(ControlNet),
    BuOnly(Backbone),
}

/// Outputs of a single-task forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub logits: Var,
    /// Final pre-logit representation (post-relu hidden layer).
    pub features: Var,
    pub loc_logits: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub arch: Arch,
}

impl Model {
    /// Deterministic initialisation. The backbone draws from stream 0 of
    /// `seed`, so every kind built from one seed starts from the same
    /// backbone weights where shapes agree.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self, TensorError> {
        if cfg.tasks == 0 {
            return Err(TensorError::arg("model", "task count must be positive"));
        }
        let bcfg = cfg.backbone();
        let mut params = ParamStore::new();
        let mut bb_rng = rng_for(seed, 0);
        let mut extra_rng = rng_for(seed, 1);
        let arch = match cfg.kind {
            ModelKind::Single => {
                let mut nets = Vec::with_capacity(cfg.tasks);
                for t in 0..cfg.tasks {
                    let mut r = rng_for(seed, 100 + t as u64);
                    nets.push(Backbone::build(&bcfg, &mut params, &format!("task{t}."), &mut r)?);
                }
                Arch::Single(nets)
            }
            ModelKind::MultiBranch => {
                let bb = Backbone::build(&bcfg, &mut params, "", &mut bb_rng)?;
                Arch::MultiBranch(MultiBranch::build(bb, cfg.tasks, &mut params, &mut extra_rng))
            }
            ModelKind::ChMod | ModelKind::ChModExt => {
                let bb = Backbone::build(&bcfg, &mut params, "", &mut bb_rng)?;
                Arch::ChMod(ChannelMod::build(bb, cfg.tasks, &mut params))
            }
            ModelKind::ControlNet | ModelKind::TdOnly => {
                let bb = Backbone::build(&bcfg, &mut params, "", &mut bb_rng)?;
                Arch::Control(ControlNet::build(
                    bb,
                    cfg.tasks,
                    &cfg.td_channels,
                    cfg.kind == ModelKind::ControlNet,
                    &mut params,
                    &mut extra_rng,
                )?)
            }
            ModelKind::BuOnly => Arch::BuOnly(Backbone::build(&bcfg, &mut params, "", &mut bb_rng)?),
        };
        Ok(Model {
            cfg: cfg.clone(),
            params,
            arch,
        })
    }

    pub fn census(&self) -> usize {
        self.params.census()
    }

    /// Parameter indices updated by an optimizer step after a batch of
    /// `task`: the task's own network for the single-task kind, everything
    /// otherwise.
    pub fn trainable_for(&self, task: usize) -> Vec<usize> {
        match &self.arch {
            Arch::Single(_) => {
                let prefix = format!("task{task}.");
                (0..self.params.len())
                    .filter(|&i| self.params.name(crate::params::ParamId(i)).starts_with(&prefix))
                    .collect()
            }
            _ => (0..self.params.len()).collect(),
        }
    }

    /// Number of independent optimizer groups (one per task network for the
    /// single-task kind).
    pub fn optimizer_groups(&self) -> usize {
        match &self.arch {
            Arch::Single(nets) => nets.len(),
            _ => 1,
        }
    }

    pub fn optimizer_group(&self, task: usize) -> usize {
        match &self.arch {
            Arch::Single(_) => task,
            _ => 0,
        }
    }

    fn check_task(&self, task: usize) -> Result<(), TensorError> {
        if task >= self.cfg.tasks {
            return Err(TensorError::arg(
                "forward",
                format!("task {task} out of range for {} tasks", self.cfg.tasks),
            ));
        }
        Ok(())
    }

    /// One forward pass with `task` selected. `images` is `(N, 1, H, W)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        task: usize,
        opts: ForwardOptions,
    ) -> Result<Output, TensorError> {
        self.check_task(task)?;
        let plain = |o: BackboneOutput| Output {
            logits: o.logits,
            features: o.hidden,
            loc_logits: None,
        };
        match &self.arch {
            Arch::Single(nets) => Ok(plain(nets[task].forward(g, p, images)?)),
            Arch::MultiBranch(mb) => {
                let (features, logits) = mb.forward(g, p, images, task)?;
                Ok(Output {
                    logits,
                    features,
                    loc_logits: None,
                })
            }
            Arch::ChMod(cm) => Ok(plain(cm.forward(g, p, images, task)?)),
            Arch::Control(cn) => {
                let o = cn.forward(g, p, images, task, opts)?;
                Ok(Output {
                    logits: o.logits,
                    features: o.hidden,
                    loc_logits: Some(o.loc_logits),
                })
            }
            Arch::BuOnly(bb) => {
                let x = with_task_planes(g.value(images), task, self.cfg.tasks)?;
                let x = g.constant(x);
                Ok(plain(bb.forward(g, p, x)?))
            }
        }
    }

    /// The shared backbone (task 0's network for the single-task kind).
    pub fn backbone(&self) -> &Backbone {
        match &self.arch {
            Arch::Single(nets) => &nets[0],
            Arch::MultiBranch(mb) => &mb.backbone,
            Arch::ChMod(cm) => &cm.backbone,
            Arch::Control(cn) => &cn.backbone,
            Arch::BuOnly(bb) => bb,
        }
    }
}
