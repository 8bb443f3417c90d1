//! Stage-split LeNet-style bottom-up network.

use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::rng::Xoshiro;
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
}

impl StageSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        StageSpec {
            in_channels,
            out_channels,
            kernel: 5,
            padding: 2,
            pool: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: Vec<StageSpec>,
    pub fc_hidden: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl BackboneConfig {
    /// Two stages (1->10, 10->20), 50 hidden units, 10 classes.
    pub fn lenet(height: usize, width: usize) -> Self {
        Self::with_channels(&[10, 20], height, width)
    }

    pub fn with_channels(channels: &[usize], height: usize, width: usize) -> Self {
        let mut stages = Vec::with_capacity(channels.len());
        let mut cin = 1;
        for &c in channels {
            stages.push(StageSpec::new(cin, c));
            cin = c;
        }
        BackboneConfig {
            stages,
            fc_hidden: 50,
            num_classes: 10,
            height,
            width,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].in_channels
    }

    /// `(C, H, W)` after each stage.
    pub fn stage_dims(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.stages
            .iter()
            .map(|s| {
                h /= s.pool;
                w /= s.pool;
                (s.out_channels, h, w)
            })
            .collect()
    }

    pub fn flatten_size(&self) -> usize {
        let (c, h, w) = *self.stage_dims().last().expect("at least one stage");
        c * h * w
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |d: String| Err(TensorError::arg("backbone config", d));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        if self.fc_hidden == 0 || self.num_classes == 0 {
            return bad("fc_hidden and num_classes must be positive".into());
        }
        let (mut h, mut w) = (self.height, self.width);
        let mut cin = self.stages[0].in_channels;
        for (k, s) in self.stages.iter().enumerate() {
            if s.in_channels == 0 || s.out_channels == 0 || s.kernel == 0 || s.pool == 0 {
                return bad(format!("stage {k}: channels, kernel and pool must be positive"));
            }
            if s.in_channels != cin {
                return bad(format!(
                    "stage {k} expects {} input channels but the previous stage gives {cin}",
                    s.in_channels
                ));
            }
            if 2 * s.padding + 1 != s.kernel {
                return bad(format!("stage {k}: padding {} is not 'same' for kernel {}", s.padding, s.kernel));
            }
            if h == 0 || w == 0 || h % s.pool != 0 || w % s.pool != 0 {
                return bad(format!("stage {k}: {h}x{w} not divisible by pool {}", s.pool));
            }
            h /= s.pool;
            w /= s.pool;
            cin = s.out_channels;
        }
        Ok(())
    }
}

/// Parameter census of a backbone, in closed form.
pub fn backbone_census(cfg: &BackboneConfig) -> usize {
    let convs: usize = cfg
        .stages
        .iter()
        .map(|s| s.out_channels * s.in_channels * s.kernel * s.kernel + s.out_channels)
        .sum();
    convs + cfg.flatten_size() * cfg.fc_hidden + cfg.fc_hidden + cfg.fc_hidden * cfg.num_classes + cfg.num_classes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl ConvLayer {
    /// Kaiming-uniform weights scaled by `gain`, zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        rng: &mut Xoshiro,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        ConvLayer {
            weight: store.push(
                format!("{name}.weight"),
                kaiming_uniform(vec![cout, cin, kernel, kernel], fan_in, gain, rng),
            ),
            bias: store.push(format!("{name}.bias"), Tensor::zeros(vec![cout])),
            pad: kernel / 2,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), 1, self.pad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, rng: &mut Xoshiro) -> Self {
        Dense {
            weight: store.push(
                format!("{name}.weight"),
                kaiming_uniform(vec![out, fan_in], fan_in, 1.0, rng),
            ),
            bias: store.push(format!("{name}.bias"), Tensor::zeros(vec![out])),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Parameter layout of one backbone inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub convs: Vec<ConvLayer>,
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// Post-relu, post-pool output of each stage (after modulation, if any).
    pub stages: Vec<Var>,
    /// Post-relu hidden layer, the final pre-logit representation.
    pub hidden: Var,
    pub logits: Var,
}

impl Backbone {
    /// Add a backbone's parameters to `store` under `prefix`.
    pub fn build(
        cfg: &BackboneConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut Xoshiro,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let convs = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(k, s)| {
                ConvLayer::init(
                    store,
                    &format!("{prefix}conv{}", k + 1),
                    s.in_channels,
                    s.out_channels,
                    s.kernel,
                    1.0,
                    rng,
                )
            })
            .collect();
        let fc1 = Dense::init(store, &format!("{prefix}fc1"), cfg.flatten_size(), cfg.fc_hidden, rng);
        let fc2 = Dense::init(store, &format!("{prefix}fc2"), cfg.fc_hidden, cfg.num_classes, rng);
        Ok(Backbone {
            cfg: cfg.clone(),
            convs,
            fc1,
            fc2,
        })
    }

    /// One stage: conv, relu, max-pool.
    pub fn stage<T: Real>(&self, g: &mut Graph<T>, p: &Bound, k: usize, x: Var) -> Result<Var, TensorError> {
        let y = self.convs[k].apply(g, p, x)?;
        let y = g.relu(y);
        g.maxpool2d(y, self.cfg.stages[k].pool)
    }

    /// Stages only, with `modulate(g, k, a_k)` applied to every stage output
    /// before the next stage consumes it.
    pub fn trunk<T, F>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mut modulate: F) -> Result<Vec<Var>, TensorError>
    where
        T: Real,
        F: FnMut(&mut Graph<T>, usize, Var) -> Result<Var, TensorError>,
    {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut a = x;
        for k in 0..self.convs.len() {
            a = self.stage(g, p, k, a)?;
            a = modulate(g, k, a)?;
            out.push(a);
        }
        Ok(out)
    }

    /// Flatten, hidden layer with relu.
    pub fn hidden<T: Real>(&self, g: &mut Graph<T>, p: &Bound, top: Var) -> Result<Var, TensorError> {
        let f = g.flatten(top)?;
        let h = self.fc1.apply(g, p, f)?;
        Ok(g.relu(h))
    }

    pub fn forward_modulated<T, F>(&self, g: &mut Graph<T>, p: &Bound, x: Var, modulate: F) -> Result<BackboneOutput, TensorError>
    where
        T: Real,
        F: FnMut(&mut Graph<T>, usize, Var) -> Result<Var, TensorError>,
    {
        let stages = self.trunk(g, p, x, modulate)?;
        let hidden = self.hidden(g, p, *stages.last().expect("at least one stage"))?;
        let logits = self.fc2.apply(g, p, hidden)?;
        Ok(BackboneOutput { stages, hidden, logits })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<BackboneOutput, TensorError> {
        self.forward_modulated(g, p, x, |_, _, a| Ok(a))
    }
}
