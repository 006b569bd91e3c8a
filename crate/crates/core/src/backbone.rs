//! Convolutional feature extractor built from PRPE blocks.
//!
//! A PRPE block projects its input with a pointwise conv, replicates the
//! projection into parallel 3×3 depthwise branches, projects the concatenated
//! branches back down and expands to the output width, then adds a residual.
//! The strided variant (PRPE-S) downsamples in the depthwise branches and
//! uses a strided pointwise conv on the residual path. Hubs carry early
//! stage outputs forward: average-pool to the target resolution, pointwise
//! projection, add.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrpeBlockConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default = "default_branches")]
    pub branches: usize,
}

fn default_branches() -> usize {
    2
}

impl PrpeBlockConfig {
    pub fn new(in_channels: usize, mid_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            mid_channels,
            out_channels,
            stride,
            branches: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            return Err(BackboneError::Config("channel counts must be positive".into()));
        }
        if self.branches == 0 {
            return Err(BackboneError::Config("a block needs at least one branch".into()));
        }
        match self.stride {
            1 if self.in_channels != self.out_channels => Err(BackboneError::Config(format!(
                "unstrided block {} -> {} cannot use an identity residual",
                self.in_channels, self.out_channels
            ))),
            1 | 2 => Ok(()),
            s => Err(BackboneError::Config(format!("stride {s} is not 1 or 2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Expected (height, width) of the single-channel input.
    pub input_size: (usize, usize),
    pub stem: ConvSpec,
    pub stages: Vec<PrpeBlockConfig>,
    /// (source stage, target stage) pairs; the source output is injected
    /// into the target output.
    pub hub_taps: Vec<(usize, usize)>,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk((256, 256))
    }
}

impl BackboneConfig {
    /// The default four-block layout at a given input size.
    pub fn desk(input_size: (usize, usize)) -> Self {
        Self {
            input_size,
            stem: ConvSpec {
                out_channels: 8,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            stages: vec![
                PrpeBlockConfig::new(8, 8, 8, 1),
                PrpeBlockConfig::new(8, 8, 16, 2),
                PrpeBlockConfig::new(16, 16, 16, 1),
                PrpeBlockConfig::new(16, 16, 32, 2),
            ],
            hub_taps: vec![(0, 2), (1, 3)],
            feature_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(BackboneError::Config(m));
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return err("input size must be positive".into());
        }
        if self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return err("stem spec must be positive".into());
        }
        let mut channels = self.stem.out_channels;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if s.in_channels != channels {
                return err(format!(
                    "stage {i} expects {} channels, receives {channels}",
                    s.in_channels
                ));
            }
            channels = s.out_channels;
        }
        if channels != self.feature_dim {
            return err(format!(
                "final width {channels} differs from feature_dim {}",
                self.feature_dim
            ));
        }
        for &(src, dst) in &self.hub_taps {
            if src >= dst || dst >= self.stages.len() {
                return err(format!("hub tap ({src}, {dst}) must satisfy source < target < stages"));
            }
        }
        // Spatial compatibility of every hub.
        let dims = self.stage_dims()?;
        for &(src, dst) in &self.hub_taps {
            hub_factor(dims[src], dims[dst]).ok_or_else(|| {
                BackboneError::Config(format!(
                    "hub ({src}, {dst}): {:?} does not pool down to {:?}",
                    dims[src], dims[dst]
                ))
            })?;
        }
        Ok(())
    }

    /// Spatial size after each stage.
    pub fn stage_dims(&self) -> Result<Vec<(usize, usize)>> {
        use crate::tensor::ops::conv_out_len;
        let fit = |n: usize, k: usize, s: usize, p: usize| {
            conv_out_len(n, k, s, p)
                .ok_or_else(|| BackboneError::Config(format!("input {n} too small for the layout")))
        };
        let mut h = fit(self.input_size.0, self.stem.kernel, self.stem.stride, self.stem.pad)?;
        let mut w = fit(self.input_size.1, self.stem.kernel, self.stem.stride, self.stem.pad)?;
        let mut dims = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = fit(h, 3, s.stride, 1)?;
            w = fit(w, 3, s.stride, 1)?;
            dims.push((h, w));
        }
        Ok(dims)
    }

    /// Shapes of every parameter, by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (
                "stem.w".to_string(),
                vec![self.stem.out_channels, 1, self.stem.kernel, self.stem.kernel],
            ),
            ("stem.b".to_string(), vec![self.stem.out_channels]),
        ];
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stage{i}");
            out.push((format!("{p}.p1.w"), vec![s.mid_channels, s.in_channels, 1, 1]));
            out.push((format!("{p}.p1.b"), vec![s.mid_channels]));
            for b in 0..s.branches {
                out.push((format!("{p}.dw{b}.w"), vec![s.mid_channels, 1, 3, 3]));
                out.push((format!("{p}.dw{b}.b"), vec![s.mid_channels]));
            }
            out.push((
                format!("{p}.p2.w"),
                vec![s.mid_channels, s.mid_channels * s.branches, 1, 1],
            ));
            out.push((format!("{p}.p2.b"), vec![s.mid_channels]));
            out.push((format!("{p}.e.w"), vec![s.out_channels, s.mid_channels, 1, 1]));
            if s.stride != 1 {
                out.push((format!("{p}.skip.w"), vec![s.out_channels, s.in_channels, 1, 1]));
            }
        }
        for (j, &(src, dst)) in self.hub_taps.iter().enumerate() {
            out.push((
                format!("hub{j}.w"),
                vec![self.stages[dst].out_channels, self.stages[src].out_channels, 1, 1],
            ));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            store.insert(name.clone(), init_tensor(&name, &shape, rng));
        }
        store
    }
}

pub(crate) fn init_tensor<R: Rng>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<f32> {
    if name.ends_with(".b") {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Pooling factor that maps `early` onto `late`, if it is a power of two.
fn hub_factor(early: (usize, usize), late: (usize, usize)) -> Option<usize> {
    if late.0 == 0 || !early.0.is_multiple_of(late.0) {
        return None;
    }
    let f = early.0 / late.0;
    (f.is_power_of_two() && early.1 == late.1 * f).then_some(f)
}

/// Parameters placed on a graph as leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect();
        Self { vars }
    }

    /// Binds names to leaves that already exist on the graph.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()).into())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Records one PRPE / PRPE-S block on the graph.
pub fn prpe_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    block: &PrpeBlockConfig,
    p: &Bound,
    prefix: &str,
) -> Result<Var> {
    let c = g.value(x).shape()[1];
    if c != block.in_channels {
        return Err(TensorError::ShapeMismatch(format!(
            "{prefix}: input has {c} channels, block expects {}",
            block.in_channels
        ))
        .into());
    }
    let w = |n: &str| p.var(&format!("{prefix}.{n}"));
    let proj = g.pointwise_conv(x, w("p1.w")?)?;
    let proj = g.bias_add(proj, w("p1.b")?)?;
    let proj = g.relu(proj);
    let mut branches = Vec::with_capacity(block.branches);
    for b in 0..block.branches {
        let d = g.depthwise_conv2d(proj, w(&format!("dw{b}.w"))?, block.stride, 1)?;
        let d = g.bias_add(d, w(&format!("dw{b}.b"))?)?;
        branches.push(g.relu(d));
    }
    let cat = if branches.len() == 1 {
        branches[0]
    } else {
        g.concat(&branches, 1)?
    };
    let proj2 = g.pointwise_conv(cat, w("p2.w")?)?;
    let proj2 = g.bias_add(proj2, w("p2.b")?)?;
    let proj2 = g.relu(proj2);
    let expanded = g.pointwise_conv(proj2, w("e.w")?)?;
    let residual = if block.stride == 1 {
        x
    } else {
        g.conv2d(x, w("skip.w")?, block.stride, 0)?
    };
    Ok(g.add(residual, expanded)?)
}

/// `late + PW(avgpool(early))`, pooling by the power-of-two factor that
/// matches the spatial dims.
pub fn hub_inject<T: Scalar>(g: &mut Graph<T>, early: Var, late: Var, w: Var) -> Result<Var> {
    let es = g.value(early).shape().to_vec();
    let ls = g.value(late).shape().to_vec();
    let f = hub_factor((es[2], es[3]), (ls[2], ls[3])).ok_or_else(|| {
        TensorError::ShapeMismatch(format!("hub cannot pool {es:?} onto {ls:?}"))
    })?;
    let pooled = if f == 1 { early } else { g.avg_pool(early, f)? };
    let projected = g.pointwise_conv(pooled, w)?;
    Ok(g.add(late, projected)?)
}

/// Records the full backbone on `g`; `x` is N×1×H×W, the result N×feature_dim.
pub fn backbone_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &BackboneConfig,
    p: &Bound,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || (shape[2], shape[3]) != cfg.input_size {
        return Err(TensorError::ShapeMismatch(format!(
            "backbone expects N x 1 x {} x {}, got {shape:?}",
            cfg.input_size.0, cfg.input_size.1
        ))
        .into());
    }
    let stem = g.conv2d(x, p.var("stem.w")?, cfg.stem.stride, cfg.stem.pad)?;
    let stem = g.bias_add(stem, p.var("stem.b")?)?;
    let mut h = g.relu(stem);
    let mut outputs: Vec<Var> = Vec::with_capacity(cfg.stages.len());
    for (i, block) in cfg.stages.iter().enumerate() {
        h = prpe_block(g, h, block, p, &format!("stage{i}"))?;
        for (j, &(src, dst)) in cfg.hub_taps.iter().enumerate() {
            if dst == i {
                h = hub_inject(g, outputs[src], h, p.var(&format!("hub{j}.w"))?)?;
            }
        }
        outputs.push(h);
    }
    Ok(g.global_avg_pool(h)?)
}

/// Feature vectors for a batch of N×1×H×W inputs, one row per input.
pub fn backbone_forward<T: Scalar>(
    input: &Tensor<T>,
    cfg: &BackboneConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params);
    let x = g.leaf(input.clone());
    let out = backbone_graph(&mut g, x, cfg, &p)?;
    Ok(g.value(out).clone())
}

/// Stand-alone evaluation of one block.
pub fn prpe_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &PrpeBlockConfig,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params);
    let xv = g.leaf(x.clone());
    let y = prpe_block(&mut g, xv, block, &p, prefix)?;
    Ok(g.value(y).clone())
}
