use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};

use super::config::{enumerate_projections, ModelConfig, ProjectionSpec};
use crate::error::{Error, Result};
use crate::kernels::{BatchNormState, BnMode, ConvParams, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal over the fan-in.
    HeNormal,
    /// Uniform on ±1/√fan_in.
    Uniform {
        fan_in: usize,
    },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Every parameter of the network described by `config`, in forward order,
/// and the name prefixes of its batch-norm layers with their channel counts.
pub fn layout(
    config: &ModelConfig,
) -> Result<(IndexMap<String, ParamSpec>, IndexMap<String, usize>)> {
    config.validate()?;
    let mut params = IndexMap::new();
    let mut bns = IndexMap::new();
    let conv = |params: &mut IndexMap<String, ParamSpec>,
                name: String,
                cout: usize,
                cin_g: usize,
                k: usize| {
        params.insert(
            format!("{name}.weight"),
            ParamSpec {
                shape: vec![cout, cin_g, k, k],
                init: Init::HeNormal,
            },
        );
    };
    let bn = |params: &mut IndexMap<String, ParamSpec>,
              bns: &mut IndexMap<String, usize>,
              name: String,
              c: usize| {
        params.insert(
            format!("{name}.gamma"),
            ParamSpec {
                shape: vec![c],
                init: Init::Ones,
            },
        );
        params.insert(
            format!("{name}.beta"),
            ParamSpec {
                shape: vec![c],
                init: Init::Zeros,
            },
        );
        bns.insert(name, c);
    };

    let [cin, _, _] = config.input_shape;
    conv(
        &mut params,
        "stem.conv".into(),
        config.stem_channels,
        cin,
        3,
    );
    bn(
        &mut params,
        &mut bns,
        "stem.bn".into(),
        config.stem_channels,
    );
    let g = config.groups();
    for (i, stage) in config.stages.iter().enumerate() {
        let level = i + 1;
        for b in 0..stage.num_blocks {
            let p = format!("stage{level}.block{b}");
            let c_in = if b == 0 {
                config.channels(level - 1)
            } else {
                stage.channels
            };
            let c = stage.channels;
            conv(&mut params, format!("{p}.conv1"), c, c_in / g, 3);
            bn(&mut params, &mut bns, format!("{p}.bn1"), c);
            conv(&mut params, format!("{p}.conv2"), c, c / g, 3);
            bn(&mut params, &mut bns, format!("{p}.bn2"), c);
            if needs_shortcut_conv(config, level, b) {
                conv(&mut params, format!("{p}.shortcut.conv"), c, c_in, 1);
                bn(&mut params, &mut bns, format!("{p}.shortcut.bn"), c);
            }
        }
    }
    for spec in enumerate_projections(config, &config.mask)? {
        let p = spec.prefix();
        conv(&mut params, format!("{p}.conv"), spec.c_dst, spec.c_src, 1);
        bn(&mut params, &mut bns, format!("{p}.bn"), spec.c_dst);
    }
    let d = config.channels(config.levels());
    let k = config.num_classes;
    params.insert(
        "fc.weight".into(),
        ParamSpec {
            shape: vec![d, k],
            init: Init::Uniform { fan_in: d },
        },
    );
    params.insert(
        "fc.bias".into(),
        ParamSpec {
            shape: vec![k],
            init: Init::Uniform { fan_in: d },
        },
    );
    Ok((params, bns))
}

/// A block's shortcut is a strided 1×1 conv + BN when its input and output
/// shapes differ, the identity otherwise; plain networks have none.
fn needs_shortcut_conv(config: &ModelConfig, level: usize, block: usize) -> bool {
    let stage = &config.stages[level - 1];
    config.baseline.has_shortcuts()
        && block == 0
        && (stage.downsample != 1 || config.channels(level - 1) != stage.channels)
}

/// Seed of one parameter: the model seed mixed with an FNV-1a hash of the
/// name, so a parameter's initial value does not depend on which other
/// parameters exist.
fn param_seed(seed: u64, name: &str) -> u64 {
    let hash = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    seed ^ hash
}

fn initialize(name: &str, spec: &ParamSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    match spec.init {
        Init::Ones => Tensor::full(&spec.shape, 1.0),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::HeNormal => {
            let fan_in: usize = spec.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&spec.shape, |_| rng.sample::<f64, _>(normal) as f32)
        }
        Init::Uniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(&spec.shape, |_| rng.sample(uniform) as f32)
        }
    }
}

/// A HiResNet (or baseline) with its parameters and batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    projections: Vec<ProjectionSpec>,
    params: IndexMap<String, Tensor>,
    bn: IndexMap<String, BatchNormState>,
}

/// Tape variables of one forward pass.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    /// One variable per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Stem output followed by every stage output.
    pub levels: Vec<Var>,
    /// Per stage: the last block's branch plus its shortcut, before any
    /// projection is added.
    pub residuals: Vec<Var>,
    /// One output per entry of [`Model::projections`].
    pub projections: Vec<Var>,
    pub logits: Var,
}

/// Values of one forward pass. For every stage `ℓ`,
/// `levels[ℓ] == relu(residuals[ℓ-1] + Σ projections)` with the projections
/// into `ℓ` added in [`Model::projections`] order.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub levels: Vec<Tensor>,
    pub residuals: Vec<Tensor>,
    pub projections: Vec<(ProjectionSpec, Tensor)>,
    pub logits: Tensor,
}

impl ForwardTrace {
    /// Projection outputs arriving at stage `dst`, in summation order.
    pub fn projections_into(&self, dst: usize) -> impl Iterator<Item = &(ProjectionSpec, Tensor)> {
        self.projections.iter().filter(move |(s, _)| s.dst == dst)
    }
}

enum StatsAccess<'a> {
    Train(&'a mut IndexMap<String, BatchNormState>),
    Eval(&'a IndexMap<String, BatchNormState>),
}

struct Graph<'a, 't, T: Scalar> {
    tape: &'t mut Tape<T>,
    vars: IndexMap<&'a str, Var>,
    stats: StatsAccess<'a>,
}

impl<T: Scalar> Graph<'_, '_, T> {
    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv(&mut self, name: &str, x: Var, params: ConvParams) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"));
        self.tape.conv2d(x, w, None, params)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"));
        let beta = self.var(&format!("{name}.beta"));
        let mode = match &mut self.stats {
            StatsAccess::Train(map) => {
                BnMode::Train(map.get_mut(name).expect("layout lists every bn"))
            }
            StatsAccess::Eval(map) => BnMode::Eval(&map[name]),
        };
        self.tape.batchnorm2d(x, gamma, beta, mode)
    }
}

impl Model {
    /// Builds and initializes the network deterministically from
    /// `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let (layout, bns) = layout(config)?;
        let params = layout
            .iter()
            .map(|(name, spec)| (name.clone(), initialize(name, spec, config.seed)))
            .collect();
        let bn = bns
            .into_iter()
            .map(|(name, c)| (name, BatchNormState::new(c)))
            .collect();
        Ok(Model {
            config: config.clone(),
            projections: enumerate_projections(config, &config.mask)?,
            params,
            bn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn projections(&self) -> &[ProjectionSpec] {
        &self.projections
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn bn_states(&self) -> &IndexMap<String, BatchNormState> {
        &self.bn
    }

    pub fn bn_state_mut(&mut self, name: &str) -> Option<&mut BatchNormState> {
        self.bn.get_mut(name)
    }

    /// Parameters in store order, for optimizers that update them in place.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    /// Sets every projection's batch-norm scale and shift to zero, which
    /// makes each projection output exactly zero. At initialization the
    /// shift is already zero, so only the scale changes.
    pub fn zero_projections(&mut self) {
        for spec in &self.projections {
            for part in ["gamma", "beta"] {
                let name = format!("{}.bn.{part}", spec.prefix());
                self.params[&name].data_mut().fill(0.0);
            }
        }
    }

    /// Copies every parameter and statistic of `other` whose name also
    /// exists here.
    pub fn copy_shared_from(&mut self, other: &Model) {
        for (name, t) in &mut self.params {
            if let Some(src) = other.params.get(name).filter(|s| s.shape() == t.shape()) {
                *t = src.clone();
            }
        }
        for (name, s) in &mut self.bn {
            if let Some(src) = other.bn.get(name).filter(|o| o.channels() == s.channels()) {
                *s = src.clone();
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "input {shape:?}, expected [N, {:?}]",
                    self.config.input_shape
                ),
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Train mode updates the batch-norm
    /// running statistics. Parameters become gradient leaves when
    /// `grad` is set and constants otherwise.
    pub fn forward_on<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        grad: bool,
    ) -> Result<TapeTrace> {
        let stats = match mode {
            Mode::Train => StatsAccess::Train(&mut self.bn),
            Mode::Eval => StatsAccess::Eval(&self.bn),
        };
        let source = if grad {
            ParamSource::Leaves
        } else {
            ParamSource::Constants
        };
        record(
            &self.config,
            &self.projections,
            &self.params,
            stats,
            tape,
            x,
            source,
        )
    }

    /// Records a forward pass that reads parameters from `params`, one
    /// variable per entry of [`Model::params`] in order. The stored
    /// parameter values are ignored.
    pub fn forward_with<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<TapeTrace> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter variables for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let stats = match mode {
            Mode::Train => StatsAccess::Train(&mut self.bn),
            Mode::Eval => StatsAccess::Eval(&self.bn),
        };
        record(
            &self.config,
            &self.projections,
            &self.params,
            stats,
            tape,
            x,
            ParamSource::Given(params),
        )
    }

    /// Eval-mode pass on a shared model.
    pub fn forward_eval_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        grad: bool,
    ) -> Result<TapeTrace> {
        let source = if grad {
            ParamSource::Leaves
        } else {
            ParamSource::Constants
        };
        record(
            &self.config,
            &self.projections,
            &self.params,
            StatsAccess::Eval(&self.bn),
            tape,
            x,
            source,
        )
    }

    /// Runs the network on `x` and returns every cached contribution.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let trace = self.forward_on(&mut tape, xv, mode, false)?;
        self.collect(&tape, &trace)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let trace = self.forward_eval_on(&mut tape, xv, false)?;
        Ok(tape.value(trace.logits)?.clone())
    }

    /// Eval-mode pass returning every cached contribution.
    pub fn trace_eval(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let trace = self.forward_eval_on(&mut tape, xv, false)?;
        self.collect(&tape, &trace)
    }

    fn collect(&self, tape: &Tape, trace: &TapeTrace) -> Result<ForwardTrace> {
        let value = |v: Var| tape.value(v).cloned();
        Ok(ForwardTrace {
            levels: trace
                .levels
                .iter()
                .map(|&v| value(v))
                .collect::<Result<_>>()?,
            residuals: trace
                .residuals
                .iter()
                .map(|&v| value(v))
                .collect::<Result<_>>()?,
            projections: self
                .projections
                .iter()
                .zip(&trace.projections)
                .map(|(s, &v)| Ok((*s, value(v)?)))
                .collect::<Result<_>>()?,
            logits: value(trace.logits)?,
        })
    }
}

/// Average pooling to the destination resolution (skipped for factor 1),
/// a bias-free 1×1 convolution to the destination width, then batch norm.
pub fn projection_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &ProjectionSpec,
    weight: Var,
    gamma: Var,
    beta: Var,
    mode: BnMode<'_>,
) -> Result<Var> {
    let shape = tape.value(x)?.shape().to_vec();
    let f = spec.pool_factor;
    if shape.len() != 4
        || shape[1] != spec.c_src
        || f == 0
        || shape[2] % f != 0
        || shape[3] % f != 0
    {
        return Err(Error::shape(
            "projection_forward",
            format!(
                "input {shape:?} for projection {}->{} with pool factor {f}",
                spec.src, spec.dst
            ),
        ));
    }
    let pooled = if f == 1 { x } else { tape.avgpool2d(x, f, f)? };
    let y = tape.conv2d(pooled, weight, None, ConvParams::default())?;
    tape.batchnorm2d(y, gamma, beta, mode)
}

enum ParamSource<'v> {
    Leaves,
    Constants,
    Given(&'v [Var]),
}

fn record<'a, T: Scalar>(
    config: &ModelConfig,
    projections: &[ProjectionSpec],
    params: &'a IndexMap<String, Tensor>,
    stats: StatsAccess<'a>,
    tape: &mut Tape<T>,
    x: Var,
    source: ParamSource<'_>,
) -> Result<TapeTrace> {
    let mut vars = IndexMap::with_capacity(params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        let v = match source {
            ParamSource::Leaves => tape.param(t.cast()),
            ParamSource::Constants => tape.constant(t.cast()),
            ParamSource::Given(given) => given[i],
        };
        vars.insert(name.as_str(), v);
    }
    let param_vars: Vec<Var> = vars.values().copied().collect();
    let mut g = Graph { tape, vars, stats };

    let same = ConvParams::new(1, 1, 1);
    let h = g.conv("stem.conv", x, same)?;
    let h = g.bn("stem.bn", h)?;
    let mut levels = vec![g.tape.relu(h)?];
    let mut residuals = Vec::with_capacity(config.levels());
    let mut proj_out = Vec::with_capacity(projections.len());
    let groups = config.groups();

    for (i, stage) in config.stages.iter().enumerate() {
        let level = i + 1;
        let mut h = levels[i];
        for b in 0..stage.num_blocks {
            let p = format!("stage{level}.block{b}");
            let stride = if b == 0 { stage.downsample } else { 1 };
            let y = g.conv(&format!("{p}.conv1"), h, ConvParams::new(stride, 1, groups))?;
            let y = g.bn(&format!("{p}.bn1"), y)?;
            let y = g.tape.relu(y)?;
            let y = g.conv(&format!("{p}.conv2"), y, ConvParams::new(1, 1, groups))?;
            let mut sum = g.bn(&format!("{p}.bn2"), y)?;
            if config.baseline.has_shortcuts() {
                let short = if needs_shortcut_conv(config, level, b) {
                    let s = g.conv(
                        &format!("{p}.shortcut.conv"),
                        h,
                        ConvParams::new(stride, 0, 1),
                    )?;
                    g.bn(&format!("{p}.shortcut.bn"), s)?
                } else {
                    h
                };
                sum = g.tape.add(sum, short)?;
            }
            if b + 1 == stage.num_blocks {
                residuals.push(sum);
                for spec in projections.iter().filter(|s| s.dst == level) {
                    let prefix = spec.prefix();
                    let w = g.var(&format!("{prefix}.conv.weight"));
                    let gamma = g.var(&format!("{prefix}.bn.gamma"));
                    let beta = g.var(&format!("{prefix}.bn.beta"));
                    let name = format!("{prefix}.bn");
                    let mode = match &mut g.stats {
                        StatsAccess::Train(map) => {
                            BnMode::Train(map.get_mut(&name).expect("layout lists every bn"))
                        }
                        StatsAccess::Eval(map) => BnMode::Eval(&map[&name]),
                    };
                    let pv =
                        projection_forward(g.tape, levels[spec.src], spec, w, gamma, beta, mode)?;
                    proj_out.push(pv);
                    sum = g.tape.add(sum, pv)?;
                }
            }
            h = g.tape.relu(sum)?;
        }
        levels.push(h);
    }
    let pooled = g.tape.global_avg_pool(levels[config.levels()])?;
    let logits = g
        .tape
        .linear(pooled, g.var("fc.weight"), g.var("fc.bias"))?;
    Ok(TapeTrace {
        params: param_vars,
        levels,
        residuals,
        projections: proj_out,
        logits,
    })
}
