//! Parameter keys, their tensor layouts, and the named tensor store.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nnops::kernels::separable_param_count;
use crate::tensor::{Scalar, Tensor};

/// Kernel size of every bottom-up (and Method A top-down) convolution.
pub const CONN_KERNEL: usize = 5;

/// One tied parameter group. Edges of the same stage-pair class resolve to
/// the same key, and every unrolled block reuses the same keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Encoder,
    Bottleneck,
    /// Depthwise-separable stride-2 conv from `stage` to `stage + 1`.
    Down { stage: usize },
    /// Method A: depthwise-separable conv to `2C` then pixel shuffle, `stage + 1` to `stage`.
    Up { stage: usize },
    /// Method A: 1x1 conv within `stage`.
    Lateral { stage: usize },
    Fusion { stage: usize, fan_in: usize, phase: usize },
    StageTransform { stage: usize, phase: usize },
    /// Multi-output schemes: fuse every stage's final output at stage 1.
    OutputFusion,
    MacroPhi,
    MaskHead,
    Decoder,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::Encoder => write!(f, "encoder"),
            ParamKey::Bottleneck => write!(f, "bottleneck"),
            ParamKey::Down { stage } => write!(f, "block.down.{stage}"),
            ParamKey::Up { stage } => write!(f, "block.up.{stage}"),
            ParamKey::Lateral { stage } => write!(f, "block.lateral.{stage}"),
            ParamKey::Fusion { stage, fan_in, phase } => write!(f, "block.fuse.s{stage}.p{phase}.k{fan_in}"),
            ParamKey::StageTransform { stage, phase } => write!(f, "block.act.s{stage}.p{phase}"),
            ParamKey::OutputFusion => write!(f, "output_fusion"),
            ParamKey::MacroPhi => write!(f, "macro_phi"),
            ParamKey::MaskHead => write!(f, "mask_head"),
            ParamKey::Decoder => write!(f, "decoder"),
        }
    }
}

/// Shape of one named tensor and its initialization rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Const(ConstVal),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstVal {
    Zero,
    One,
    /// PReLU slope at initialization.
    Quarter,
}

impl TensorSpec {
    fn new(key: ParamKey, suffix: &str, shape: &[usize], init: Init) -> Self {
        TensorSpec {
            name: format!("{key}.{suffix}"),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Geometry needed to lay out the tensors of a key.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub channels: usize,
    pub enc_channels: usize,
    pub kernel: usize,
    pub speakers: usize,
    pub stages: usize,
    /// Macro integration concatenates (CC) instead of summing or passing through.
    pub phi_concat: bool,
}

impl ParamKey {
    pub fn specs(&self, d: &Dims) -> Vec<TensorSpec> {
        let c = d.channels;
        let k = *self;
        let separable = |cout: usize| {
            vec![
                TensorSpec::new(k, "dw_w", &[c, 1, CONN_KERNEL], Init::FanIn(CONN_KERNEL)),
                TensorSpec::new(k, "dw_b", &[c], Init::FanIn(CONN_KERNEL)),
                TensorSpec::new(k, "pw_w", &[cout, c, 1], Init::FanIn(c)),
                TensorSpec::new(k, "pw_b", &[cout], Init::FanIn(c)),
            ]
        };
        let pointwise = |cin: usize, cout: usize| {
            vec![
                TensorSpec::new(k, "w", &[cout, cin, 1], Init::FanIn(cin)),
                TensorSpec::new(k, "b", &[cout], Init::FanIn(cin)),
            ]
        };
        match self {
            ParamKey::Encoder => vec![TensorSpec::new(k, "w", &[d.enc_channels, 1, d.kernel], Init::FanIn(d.kernel))],
            ParamKey::Decoder => vec![TensorSpec::new(k, "w", &[d.enc_channels, 1, d.kernel], Init::FanIn(d.kernel))],
            ParamKey::Bottleneck => pointwise(d.enc_channels, c),
            ParamKey::Down { .. } => separable(c),
            ParamKey::Up { .. } => separable(2 * c),
            ParamKey::Lateral { .. } => pointwise(c, c),
            ParamKey::Fusion { fan_in, .. } => pointwise(fan_in * c, c),
            ParamKey::OutputFusion => pointwise(d.stages * c, c),
            ParamKey::StageTransform { .. } => vec![
                TensorSpec::new(k, "prelu", &[1], Init::Const(ConstVal::Quarter)),
                TensorSpec::new(k, "gain", &[c], Init::Const(ConstVal::One)),
                TensorSpec::new(k, "bias", &[c], Init::Const(ConstVal::Zero)),
            ],
            ParamKey::MacroPhi if d.phi_concat => pointwise(2 * c, c),
            // Depthwise 1x1: one scale and one offset per channel.
            ParamKey::MacroPhi => vec![
                TensorSpec::new(k, "w", &[c, 1, 1], Init::Const(ConstVal::One)),
                TensorSpec::new(k, "b", &[c], Init::Const(ConstVal::Zero)),
            ],
            ParamKey::MaskHead => pointwise(c, d.speakers * d.enc_channels),
        }
    }

    /// Closed-form parameter count, kept separate from [`ParamKey::specs`] so
    /// the two can be checked against each other.
    pub fn param_count(&self, d: &Dims) -> usize {
        let c = d.channels;
        match self {
            ParamKey::Encoder | ParamKey::Decoder => d.kernel * d.enc_channels,
            ParamKey::Bottleneck => d.enc_channels * c + c,
            ParamKey::Down { .. } => separable_param_count(c, CONN_KERNEL, c),
            ParamKey::Up { .. } => separable_param_count(c, CONN_KERNEL, 2 * c),
            ParamKey::Lateral { .. } => c * c + c,
            ParamKey::Fusion { fan_in, .. } => fan_in * c * c + c,
            ParamKey::OutputFusion => d.stages * c * c + c,
            ParamKey::StageTransform { .. } => 1 + 2 * c,
            ParamKey::MacroPhi if d.phi_concat => 2 * c * c + c,
            ParamKey::MacroPhi => 2 * c,
            ParamKey::MaskHead => c * d.speakers * d.enc_channels + d.speakers * d.enc_channels,
        }
    }
}

/// Named tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn init(specs: &[TensorSpec], rng: &mut impl Rng) -> Self {
        let mut tensors = BTreeMap::new();
        for s in specs {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
                }
                Init::Const(v) => {
                    let v = match v {
                        ConstVal::Zero => 0.0,
                        ConstVal::One => 1.0,
                        ConstVal::Quarter => 0.25,
                    };
                    vec![T::from_f64(v); n]
                }
            };
            tensors.insert(s.name.clone(), Tensor::from_vec(&s.shape, data).expect("spec shape"));
        }
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Usage(format!("parameter '{name}' is not in the store")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Number of distinct tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over every tensor.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
