//! The conditional denoiser: a frozen audio encoder, an identity encoder,
//! a step encoder, and a two-layer GRU decoder that predicts clean
//! blendshapes from a noisy latent.

use std::collections::BTreeMap;

use crate::data::arkit::NUM_CHANNELS;
use crate::data::{AudioFeatureSequence, AUDIO_DIM};
use crate::diffusion::{scaled_linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{dense, Bound, Graph, Param, ParameterSet, Var};
use crate::rng;
use crate::tensor::{self, Tensor};

/// Width of audio features, identity features and the contrastive space.
pub const FEATURE_DIM: usize = 64;
pub const IDENTITY_DIM: usize = 32;
pub const STEP_DIM: usize = 32;

/// Temporal smoothing applied after the frozen projection.
pub const SMOOTHING_KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Diffusion steps `T` of this model.
    pub steps: usize,
    /// Step count of the linear schedule this model's schedule is taken
    /// from (every `base_steps / steps`-th level).
    pub base_steps: usize,
    pub audio_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub encoder_seed: u64,
    pub init_seed: u64,
    /// When false the decoder receives zeros in place of the identity
    /// feature.
    pub use_identity: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            base_steps: 32,
            audio_dim: AUDIO_DIM,
            hidden: 256,
            layers: 2,
            encoder_seed: 7,
            init_seed: 0,
            use_identity: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.base_steps == 0 || self.base_steps % self.steps != 0 {
            return Err(Error::Config(format!(
                "model steps {} must divide base schedule steps {}",
                self.steps, self.base_steps
            )));
        }
        if self.audio_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("audio_dim, hidden and layers must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.validate()?;
        scaled_linear_schedule(self.base_steps)?.subsample(self.base_steps / self.steps)
    }

    /// Width of one decoder input row.
    pub fn decoder_input_dim(&self) -> usize {
        FEATURE_DIM + FEATURE_DIM + STEP_DIM + NUM_CHANNELS
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model.steps".into(), self.steps.to_string());
        m.insert("model.base_steps".into(), self.base_steps.to_string());
        m.insert("model.audio_dim".into(), self.audio_dim.to_string());
        m.insert("model.hidden".into(), self.hidden.to_string());
        m.insert("model.layers".into(), self.layers.to_string());
        m.insert("model.encoder_seed".into(), self.encoder_seed.to_string());
        m.insert("model.init_seed".into(), self.init_seed.to_string());
        m.insert("model.use_identity".into(), self.use_identity.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let v = kv
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))?;
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{key}` has bad value `{v}`")))
        }
        let c = Self {
            steps: get(kv, "model.steps")?,
            base_steps: get(kv, "model.base_steps")?,
            audio_dim: get(kv, "model.audio_dim")?,
            hidden: get(kv, "model.hidden")?,
            layers: get(kv, "model.layers")?,
            encoder_seed: get(kv, "model.encoder_seed")?,
            init_seed: get(kv, "model.init_seed")?,
            use_identity: get(kv, "model.use_identity")?,
        };
        c.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(c)
    }
}

/// Per-frame features plus the pooled, unit-length global feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedAudio {
    pub frames: Tensor,
    pub global: Vec<f64>,
}

/// Fixed random projection followed by binomial smoothing over time.
/// Never trained; rebuilt from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    projection: Tensor,
    seed: u64,
}

impl AudioEncoder {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut r = rng::rng_from(seed, "audio-encoder");
        let scale = 1.0 / (input_dim.max(1) as f64).sqrt();
        let projection = Tensor::from_fn(input_dim, output_dim, |_, _| rng::normal(&mut r) * scale);
        Self { projection, seed }
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, audio: &AudioFeatureSequence) -> Result<EncodedAudio> {
        self.encode_features(audio.features())
    }

    pub fn encode_features(&self, x: &Tensor) -> Result<EncodedAudio> {
        if x.rows() == 0 {
            return Err(Error::Input("audio sequence has no frames".into()));
        }
        if x.cols() != self.projection.rows() {
            return Err(Error::dim("audio feature width", self.projection.rows(), x.cols()));
        }
        let projected = x.matmul(&self.projection);
        let frames = smooth(&projected);
        let mean = Tensor::row_vector(frames.column_means());
        let global = tensor::normalized(mean.data())?;
        let out = EncodedAudio { frames, global };
        if !out.frames.is_finite() || out.global.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("audio encoder"));
        }
        Ok(out)
    }
}

/// Kernel smoothing along rows; at the edges the kernel is cut and
/// renormalized.
fn smooth(x: &Tensor) -> Tensor {
    let (n, d) = x.shape();
    let half = SMOOTHING_KERNEL.len() as isize / 2;
    let mut out = Tensor::zeros(n, d);
    for f in 0..n as isize {
        let mut wsum = 0.0;
        for (k, w) in SMOOTHING_KERNEL.iter().enumerate() {
            let src = f + k as isize - half;
            if src < 0 || src >= n as isize {
                continue;
            }
            wsum += w;
            let row = x.row(src as usize);
            for (o, v) in out.row_mut(f as usize).iter_mut().zip(row) {
                *o += w * v;
            }
        }
        for o in out.row_mut(f as usize) {
            *o /= wsum;
        }
    }
    out
}

/// Sinusoidal features of the normalized step `t / T`, so a step of a
/// halved schedule sees the same features as the matching teacher step.
pub fn step_features(t: usize, steps: usize) -> Tensor {
    let pos = 1000.0 * t as f64 / steps as f64;
    let half = STEP_DIM / 2;
    let mut out = vec![0.0; STEP_DIM];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (pos * freq).sin();
        out[half + k] = (pos * freq).cos();
    }
    Tensor::row_vector(out)
}

pub fn gru_names(layer: usize) -> [String; 4] {
    ["w_ih", "w_hh", "b_ih", "b_hh"].map(|p| format!("decoder.gru{layer}.{p}"))
}

/// Denoiser weights, encoder and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub encoder: AudioEncoder,
    pub params: ParameterSet,
    pub schedule: NoiseSchedule,
}

/// f64 copies of a parameter set, for evaluation without gradients.
#[derive(Debug, Clone)]
pub struct EvalWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl EvalWeights {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            tensors: params.iter().map(|(n, p)| (n.clone(), p.to_tensor())).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound::from_vars(
            self.tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        )
    }
}

fn check_stage(g: &Graph, v: Var, stage: &str, t: Option<usize>) -> Result<Var> {
    if g.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            stage: stage.to_string(),
            step: t,
        })
    }
}

impl DenoiserModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_from(config.init_seed, "model-init");
        let mut params = ParameterSet::new();
        let h = config.hidden;
        params.insert("identity.w1", Param::uniform_fan_in(IDENTITY_DIM, FEATURE_DIM, IDENTITY_DIM, &mut r))?;
        params.insert("identity.b1", Param::uniform_fan_in(1, FEATURE_DIM, IDENTITY_DIM, &mut r))?;
        params.insert("identity.w2", Param::uniform_fan_in(FEATURE_DIM, FEATURE_DIM, FEATURE_DIM, &mut r))?;
        params.insert("identity.b2", Param::uniform_fan_in(1, FEATURE_DIM, FEATURE_DIM, &mut r))?;
        params.insert("step.w", Param::uniform_fan_in(STEP_DIM, STEP_DIM, STEP_DIM, &mut r))?;
        params.insert("step.b", Param::uniform_fan_in(1, STEP_DIM, STEP_DIM, &mut r))?;
        let mut input = config.decoder_input_dim();
        for layer in 0..config.layers {
            let [w_ih, w_hh, b_ih, b_hh] = gru_names(layer);
            params.insert(w_ih, Param::uniform_fan_in(input, 3 * h, h, &mut r))?;
            params.insert(w_hh, Param::uniform_fan_in(h, 3 * h, h, &mut r))?;
            params.insert(b_ih, Param::uniform_fan_in(1, 3 * h, h, &mut r))?;
            params.insert(b_hh, Param::uniform_fan_in(1, 3 * h, h, &mut r))?;
            input = h;
        }
        params.insert("decoder.head.w", Param::uniform_fan_in(h, NUM_CHANNELS, h, &mut r))?;
        params.insert("decoder.head.b", Param::zeros(1, NUM_CHANNELS))?;
        Ok(Self {
            encoder: AudioEncoder::new(config.audio_dim, FEATURE_DIM, config.encoder_seed),
            schedule: config.schedule()?,
            config,
            params,
        })
    }

    /// Rebuild from stored parameters; shapes are checked against `config`.
    pub fn from_params(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        let fresh = Self::new(config)?;
        for (name, p) in fresh.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    got.shape(),
                    p.shape()
                )));
            }
        }
        let mut own = ParameterSet::new();
        for name in fresh.params.names() {
            own.insert(name.clone(), params.get(name)?.clone())?;
        }
        Ok(Self { params: own, ..fresh })
    }

    pub fn steps(&self) -> usize {
        self.schedule.num_steps()
    }

    pub fn encode_audio(&self, audio: &AudioFeatureSequence) -> Result<EncodedAudio> {
        self.encoder.encode(audio)
    }

    pub fn eval_weights(&self) -> EvalWeights {
        EvalWeights::new(&self.params)
    }

    /// Identity features (rows) for identity embeddings (rows). Embeddings
    /// are unit-normalized first, so only their direction matters.
    pub fn identity_feature(&self, g: &mut Graph, b: &Bound, emb: Var) -> Result<Var> {
        let emb = g.normalize_rows(emb)?;
        let h = dense(g, emb, b.var("identity.w1")?, b.var("identity.b1")?)?;
        let h = g.tanh(h);
        let out = dense(g, h, b.var("identity.w2")?, b.var("identity.b2")?)?;
        check_stage(g, out, "identity encoder", None)
    }

    pub fn step_embedding(&self, g: &mut Graph, b: &Bound, t: usize) -> Result<Var> {
        self.schedule.check_step(t)?;
        let feats = g.constant(step_features(t, self.steps()));
        let out = dense(g, feats, b.var("step.w")?, b.var("step.b")?)?;
        check_stage(g, out, "step encoder", Some(t))
    }

    /// `x̂` for one sequence. `audio` is `frames × 64`, `identity_feat` is
    /// `1 × 64` (ignored when identity conditioning is off), `x_t` is
    /// `frames × 52`.
    pub fn denoise(
        &self,
        g: &mut Graph,
        b: &Bound,
        audio: Var,
        identity_feat: Var,
        t: usize,
        x_t: Var,
    ) -> Result<Var> {
        let frames = g.value(audio).rows();
        if frames == 0 {
            return Err(Error::Input("cannot denoise an empty sequence".into()));
        }
        if g.value(audio).cols() != FEATURE_DIM {
            return Err(Error::dim("encoded audio width", FEATURE_DIM, g.value(audio).cols()));
        }
        if g.value(x_t).shape() != (frames, NUM_CHANNELS) {
            return Err(Error::dim(
                "noisy latent",
                format!("{frames}x{NUM_CHANNELS}"),
                format!("{}x{}", g.value(x_t).rows(), g.value(x_t).cols()),
            ));
        }
        check_stage(g, x_t, "noisy latent", Some(t))?;
        let id_row = if self.config.use_identity {
            identity_feat
        } else {
            g.constant(Tensor::zeros(1, FEATURE_DIM))
        };
        let id = g.repeat_rows(id_row, frames)?;
        let step_row = self.step_embedding(g, b, t)?;
        let step = g.repeat_rows(step_row, frames)?;
        let mut h = g.concat_cols(&[audio, id, step, x_t])?;
        for layer in 0..self.config.layers {
            let [w_ih, w_hh, b_ih, b_hh] = gru_names(layer);
            let h0 = g.constant(Tensor::zeros(1, self.config.hidden));
            h = g.gru(h, b.var(&w_ih)?, b.var(&w_hh)?, b.var(&b_ih)?, b.var(&b_hh)?, h0)?;
            h = check_stage(g, h, &format!("decoder layer {layer}"), Some(t))?;
        }
        let out = dense(g, h, b.var("decoder.head.w")?, b.var("decoder.head.b")?)?;
        check_stage(g, out, "output head", Some(t))
    }

    /// Full-graph prediction from a raw identity embedding (`1 × 32`).
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        audio: Var,
        identity_embedding: Var,
        t: usize,
        x_t: Var,
    ) -> Result<Var> {
        let feat = self.identity_feature(g, b, identity_embedding)?;
        self.denoise(g, b, audio, feat, t, x_t)
    }

    /// Gradient-free `x̂`.
    pub fn predict_x0(
        &self,
        weights: &EvalWeights,
        audio: &EncodedAudio,
        identity_embedding: &[f64],
        x_t: &Tensor,
        t: usize,
    ) -> Result<Tensor> {
        if identity_embedding.len() != IDENTITY_DIM {
            return Err(Error::dim("identity embedding", IDENTITY_DIM, identity_embedding.len()));
        }
        let mut g = Graph::new();
        let b = weights.bind(&mut g);
        let a = g.constant(audio.frames.clone());
        let e = g.constant(Tensor::row_vector(identity_embedding.to_vec()));
        let x = g.constant(x_t.clone());
        let out = self.forward(&mut g, &b, a, e, t, x)?;
        Ok(g.value(out).clone())
    }

    /// Gradient-free identity features for embedding rows.
    pub fn identity_features(&self, weights: &EvalWeights, embeddings: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = weights.bind(&mut g);
        let e = g.constant(embeddings.clone());
        let out = self.identity_feature(&mut g, &b, e)?;
        Ok(g.value(out).clone())
    }

    /// Gradient-free step embedding.
    pub fn encode_step(&self, weights: &EvalWeights, t: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = weights.bind(&mut g);
        let out = self.step_embedding(&mut g, &b, t)?;
        Ok(g.value(out).data().to_vec())
    }
}
