//! Encoder, macro-unfolded separator, mask head and decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{apply_step, bind, run_block, BlockSpec, ConnMethod, FusionKind, SchemeId, Step, TransformOrder};
use crate::nnops::kernels::{Conv1dAttrs, Padding};
use crate::nnops::tape::{Graph, Var};
use crate::params::{Dims, ParamKey, ParamStore, TensorSpec};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// How the encoder features are reinjected between unrolled blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MacroMode {
    /// Block output only.
    Dc,
    /// Concatenate with the encoder features, then a 2C to C map.
    Cc,
    /// Add the encoder features.
    Sc,
}

impl FromStr for MacroMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dc" => Ok(MacroMode::Dc),
            "cc" => Ok(MacroMode::Cc),
            "sc" => Ok(MacroMode::Sc),
            _ => Err(Error::Config(format!("unknown macro mode '{s}' (dc, cc, sc)"))),
        }
    }
}

impl fmt::Display for MacroMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MacroMode::Dc => "dc",
            MacroMode::Cc => "cc",
            MacroMode::Sc => "sc",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "sum" => Ok(FusionKind::Sum),
            _ => Err(Error::Config(format!("unknown fusion '{s}' (concat, sum)"))),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Concat => "concat",
            FusionKind::Sum => "sum",
        })
    }
}

impl FromStr for ConnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(ConnMethod::A),
            "b" | "B" => Ok(ConnMethod::B),
            _ => Err(Error::Config(format!("unknown connection method '{s}' (a, b)"))),
        }
    }
}

impl FromStr for TransformOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prelu-then-norm" => Ok(TransformOrder::PreluThenNorm),
            "norm-then-prelu" => Ok(TransformOrder::NormThenPrelu),
            _ => Err(Error::Config(format!(
                "unknown transform order '{s}' (prelu-then-norm, norm-then-prelu)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder window length in samples.
    pub kernel: usize,
    pub stride: usize,
    pub enc_channels: usize,
    pub channels: usize,
    pub stages: usize,
    pub speakers: usize,
    pub scheme: SchemeId,
    pub fusion: FusionKind,
    pub macro_mode: MacroMode,
    pub blocks: usize,
    pub method: ConnMethod,
    pub transform_order: TransformOrder,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel: 21,
            stride: 10,
            enc_channels: 512,
            channels: 512,
            stages: 5,
            speakers: 2,
            scheme: SchemeId::AFrcnn,
            fusion: FusionKind::Concat,
            macro_mode: MacroMode::Sc,
            blocks: 16,
            method: ConnMethod::B,
            transform_order: TransformOrder::PreluThenNorm,
            sample_rate: 8000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("enc_channels", self.enc_channels),
            ("channels", self.channels),
            ("speakers", self.speakers),
            ("blocks", self.blocks),
            ("sample_rate", self.sample_rate as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.kernel <= self.stride {
            return Err(Error::Config(format!(
                "kernel {} must exceed stride {}",
                self.kernel, self.stride
            )));
        }
        if !(crate::graph::MIN_STAGES..=crate::graph::MAX_STAGES).contains(&self.stages) {
            return Err(Error::Config(format!("stages {} outside 2..=8", self.stages)));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            channels: self.scheme.effective_channels(self.channels),
            enc_channels: self.enc_channels,
            kernel: self.kernel,
            speakers: self.speakers,
            stages: self.stages,
            phi_concat: self.macro_mode == MacroMode::Cc,
        }
    }

    pub fn has_bottleneck(&self) -> bool {
        self.dims().channels != self.enc_channels
    }

    pub fn block_spec(&self) -> Result<BlockSpec> {
        BlockSpec::new(self.scheme, self.stages, self.method, self.fusion, self.transform_order)
    }

    /// Every parameter key of the model, in a fixed order.
    pub fn param_keys(&self) -> Result<Vec<ParamKey>> {
        self.validate()?;
        let spec = self.block_spec()?;
        let mut keys = vec![ParamKey::Encoder];
        if self.has_bottleneck() {
            keys.push(ParamKey::Bottleneck);
        }
        let mut block = spec.ties.keys();
        if self.scheme.is_multi_scale() {
            block.extend((1..self.stages).map(|stage| ParamKey::Down { stage }));
        }
        keys.extend(block);
        if self.scheme.is_multi_scale() {
            keys.push(ParamKey::OutputFusion);
        }
        keys.extend([ParamKey::MacroPhi, ParamKey::MaskHead, ParamKey::Decoder]);
        Ok(keys)
    }

    pub fn tensor_specs(&self) -> Result<Vec<TensorSpec>> {
        let d = self.dims();
        Ok(self.param_keys()?.iter().flat_map(|k| k.specs(&d)).collect())
    }

    /// Number of encoder frames for `samples` input samples.
    pub fn frames(&self, samples: usize) -> usize {
        samples.saturating_sub(self.kernel).div_ceil(self.stride) + 1
    }

    /// Right padding applied to the waveform before framing.
    pub fn wave_pad(&self, samples: usize) -> usize {
        (self.frames(samples) - 1) * self.stride + self.kernel - samples
    }

    /// Separator frame count after padding to a multiple of `2^(S-1)`.
    pub fn padded_frames(&self, frames: usize) -> usize {
        frames.next_multiple_of(1 << (self.stages - 1))
    }
}

/// Tape handles produced by [`SeparationModel::forward_graph`].
pub struct ForwardVars {
    /// `[1, T]` per speaker.
    pub estimates: Vec<Var>,
    /// `[N, K]` encoder features.
    pub encoded: Var,
    /// `[N, K]` per speaker.
    pub masks: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct SeparationModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    spec: BlockSpec,
}

impl<T: Scalar> SeparationModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let specs = cfg.tensor_specs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::init(&specs, &mut rng);
        Self::from_store(cfg, store)
    }

    /// Wraps existing tensors after checking names and shapes.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let specs = cfg.tensor_specs()?;
        if specs.len() != store.len() {
            return Err(Error::Config(format!(
                "config needs {} tensors, store has {}",
                specs.len(),
                store.len()
            )));
        }
        for s in &specs {
            let t = store.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::dim(
                    "model",
                    s.name.clone(),
                    format!("expected shape {:?}, got {:?}", s.shape, t.shape()),
                ));
            }
        }
        let spec = cfg.block_spec()?;
        Ok(SeparationModel { cfg, store, spec })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn block(&self) -> &BlockSpec {
        &self.spec
    }

    fn key(&self, g: &mut Graph<T>, key: ParamKey) -> Result<Vec<Var>> {
        bind(g, &self.store, key, &self.cfg.dims())
    }

    /// `[1, T]` waveform to `[N, K]` features.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let t = g.value(x).dims2()?.1;
        if t < self.cfg.kernel {
            return Err(Error::Usage(format!(
                "input of {t} samples is shorter than the encoder window {}",
                self.cfg.kernel
            )));
        }
        let xp = g.pad_frames(x, self.cfg.wave_pad(t))?;
        let w = self.key(g, ParamKey::Encoder)?[0];
        g.conv1d(xp, w, None, Conv1dAttrs::new(self.cfg.stride, 1, Padding::Valid))
    }

    /// Masked `[N, K]` features to a `[1, samples]` waveform.
    pub fn decode_graph(&self, g: &mut Graph<T>, feats: Var, mask: Var, samples: usize) -> Result<Var> {
        let m = g.mul(feats, mask)?;
        let w = self.key(g, ParamKey::Decoder)?[0];
        let y = g.transposed_conv1d(m, w, self.cfg.stride)?;
        g.trim_frames(y, samples)
    }

    fn phi(&self, g: &mut Graph<T>, state: Var, r: Var) -> Result<Var> {
        let p = self.key(g, ParamKey::MacroPhi)?;
        let c = self.cfg.dims().channels;
        match self.cfg.macro_mode {
            MacroMode::Dc => g.conv1d(state, p[0], Some(p[1]), Conv1dAttrs::new(1, c, Padding::Valid)),
            MacroMode::Sc => {
                let s = g.add(&[state, r])?;
                g.conv1d(s, p[0], Some(p[1]), Conv1dAttrs::new(1, c, Padding::Valid))
            }
            MacroMode::Cc => {
                let s = g.concat_channels(&[state, r])?;
                g.conv1d(s, p[0], Some(p[1]), Conv1dAttrs::POINTWISE)
            }
        }
    }

    /// Runs `blocks` tied blocks on `r` (`C x F`, F padded) and returns the
    /// stage-1 result.
    pub fn macro_unfold(&self, g: &mut Graph<T>, r: Var) -> Result<Var> {
        let dims = self.cfg.dims();
        let mut rs = vec![r];
        if self.cfg.scheme.is_multi_scale() {
            for stage in 1..self.cfg.stages {
                let next = apply_step(g, &self.store, &dims, rs[stage - 1], Step::Down { stage })?;
                rs.push(next);
            }
        }
        let mut state = run_block(g, &self.spec, &self.store, &dims, &rs)?;
        for _ in 1..self.cfg.blocks {
            let inputs = state
                .iter()
                .zip(&rs)
                .map(|(&s, &r)| self.phi(g, s, r))
                .collect::<Result<Vec<_>>>()?;
            state = run_block(g, &self.spec, &self.store, &dims, &inputs)?;
        }
        if !self.cfg.scheme.is_multi_scale() {
            return Ok(state[0]);
        }
        let mut ups = Vec::with_capacity(state.len());
        for (i, &s) in state.iter().enumerate() {
            ups.push(g.interpolate(s, 1 << i)?);
        }
        let cat = g.concat_channels(&ups)?;
        let p = self.key(g, ParamKey::OutputFusion)?;
        g.conv1d(cat, p[0], Some(p[1]), Conv1dAttrs::POINTWISE)
    }

    /// `[C, K]` to one non-negative `[N, K]` mask per speaker.
    pub fn mask_head(&self, g: &mut Graph<T>, h: Var) -> Result<Vec<Var>> {
        let p = self.key(g, ParamKey::MaskHead)?;
        let m = g.conv1d(h, p[0], Some(p[1]), Conv1dAttrs::POINTWISE)?;
        let m = g.relu(m);
        let n = self.cfg.enc_channels;
        (0..self.cfg.speakers).map(|s| g.narrow_channels(m, s * n, n)).collect()
    }

    /// Full pipeline on a `[1, T]` waveform.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<ForwardVars> {
        let samples = g.value(x).dims2()?.1;
        let encoded = self.encode_graph(g, x)?;
        let frames = g.value(encoded).dims2()?.1;
        let mut h = encoded;
        if self.cfg.has_bottleneck() {
            let p = self.key(g, ParamKey::Bottleneck)?;
            h = g.conv1d(h, p[0], Some(p[1]), Conv1dAttrs::POINTWISE)?;
        }
        let h = g.pad_frames(h, self.cfg.padded_frames(frames) - frames)?;
        let out = self.macro_unfold(g, h)?;
        let out = g.trim_frames(out, frames)?;
        let masks = self.mask_head(g, out)?;
        let estimates = masks
            .iter()
            .map(|&m| self.decode_graph(g, encoded, m, samples))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardVars {
            estimates,
            encoded,
            masks,
        })
    }

    fn wave_input(g: &mut Graph<T>, x: &[T]) -> Result<Var> {
        if x.is_empty() {
            return Err(Error::Usage("empty waveform".into()));
        }
        Ok(g.input(Tensor::from_vec(&[1, x.len()], x.to_vec())?))
    }

    pub fn encode(&self, x: &[T]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = Self::wave_input(&mut g, x)?;
        let e = self.encode_graph(&mut g, xv)?;
        Ok(g.value(e).clone())
    }

    pub fn decode(&self, feats: &Tensor<T>, mask: &Tensor<T>, samples: usize) -> Result<Vec<T>> {
        if feats.shape() != mask.shape() {
            return Err(Error::dim(
                "decode",
                "mask",
                format!("mask {:?} vs features {:?}", mask.shape(), feats.shape()),
            ));
        }
        let mut g = Graph::new();
        let f = g.input(feats.clone());
        let m = g.input(mask.clone());
        let y = self.decode_graph(&mut g, f, m, samples)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Separated waveforms, one per speaker, each as long as `x`.
    pub fn forward(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let xv = Self::wave_input(&mut g, x)?;
        let out = self.forward_graph(&mut g, xv)?;
        Ok(out.estimates.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    /// [`forward`](Self::forward) over a batch, items in parallel when enabled.
    pub fn forward_batch(&self, xs: &[Vec<T>]) -> Result<Vec<Vec<Vec<T>>>> {
        par::map_collect(xs, |x| self.forward(x)).into_iter().collect()
    }
}
