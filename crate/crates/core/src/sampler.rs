//! Inference: identity lookup, the reverse chain, and latency measurement.

use std::time::Instant;

use crate::data::arkit::NUM_CHANNELS;
use crate::data::{AudioFeatureSequence, BlendshapeSequence};
use crate::diffusion::{ancestral_step, LatentState, SigmaMode};
use crate::error::{Error, Result};
use crate::model::{DenoiserModel, EvalWeights};
use crate::personalization::{match_identity, IdentityLibrary, IdentityMatch};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub audio: AudioFeatureSequence,
    /// Use this enrolled speaker instead of searching the library.
    pub identity_override: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub sequence: BlendshapeSequence,
    pub speaker_id: String,
    /// Present only when the library was searched.
    pub matched: Option<IdentityMatch>,
    /// Wall time of each denoising step, in chain order (t = T first).
    pub step_seconds: Vec<f64>,
    /// Whole request, audio encoding and matching included.
    pub total_seconds: f64,
}

impl InferenceOutput {
    pub fn used_matching(&self) -> bool {
        self.matched.is_some()
    }
}

/// Frozen model plus its precomputed evaluation weights.
pub struct Sampler<'a> {
    pub model: &'a DenoiserModel,
    pub library: &'a IdentityLibrary,
    weights: EvalWeights,
    pub sigma: SigmaMode,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a DenoiserModel, library: &'a IdentityLibrary) -> Self {
        Self {
            model,
            library,
            weights: model.eval_weights(),
            sigma: SigmaMode::default(),
        }
    }

    pub fn weights(&self) -> &EvalWeights {
        &self.weights
    }

    pub fn infer(&self, req: &InferenceRequest) -> Result<InferenceOutput> {
        let start = Instant::now();
        if req.audio.frames() == 0 {
            return Err(Error::Input("audio sequence has no frames".into()));
        }
        let encoded = self.model.encode_audio(&req.audio)?;
        let (index, matched) = match &req.identity_override {
            Some(id) => (self.library.require(id)?, None),
            None => {
                let m = match_identity(&encoded.global, self.library, self.model, &self.weights)?;
                (self.library.require(&m.speaker_id)?, Some(m))
            }
        };
        let embedding = self.library.embedding(index);
        let frames = req.audio.frames();
        let schedule = &self.model.schedule;
        let mut r = rng::rng_from(req.seed, "sample");
        let mut state = LatentState {
            x: Tensor::from_fn(frames, NUM_CHANNELS, |_, _| rng::normal(&mut r)),
            t: schedule.num_steps(),
        };
        let mut step_seconds = Vec::with_capacity(state.t);
        while state.t > 0 {
            let t0 = Instant::now();
            let x0_hat = self.model.predict_x0(&self.weights, &encoded, &embedding, &state.x, state.t)?;
            let z = Tensor::from_fn(frames, NUM_CHANNELS, |_, _| rng::normal(&mut r));
            let next = ancestral_step(&state, &x0_hat, schedule, &z, self.sigma)?;
            if !next.x.is_finite() {
                return Err(Error::Numeric {
                    stage: "sampler state".into(),
                    step: Some(state.t),
                });
            }
            state = next;
            step_seconds.push(t0.elapsed().as_secs_f64());
        }
        let sequence = BlendshapeSequence::new(state.x.clamp(0.0, 1.0), req.audio.fps, self.library.ids()[index].clone())?;
        Ok(InferenceOutput {
            sequence,
            speaker_id: self.library.ids()[index].clone(),
            matched,
            step_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

pub fn infer(req: &InferenceRequest, model: &DenoiserModel, library: &IdentityLibrary) -> Result<InferenceOutput> {
    Sampler::new(model, library).infer(req)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItfReport {
    pub steps: usize,
    pub frames: usize,
    /// Seconds per frame of each timed repetition.
    pub repetitions: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over repetitions.
    pub std: f64,
}

/// Inference time per frame over `requests`: warmup passes are discarded,
/// then each repetition times the whole batch and divides by its frames.
pub fn measure_itf(
    requests: &[InferenceRequest],
    model: &DenoiserModel,
    library: &IdentityLibrary,
    warmup_runs: usize,
    repetitions: usize,
) -> Result<ItfReport> {
    if requests.is_empty() {
        return Err(Error::Input("benchmark batch is empty".into()));
    }
    if warmup_runs == 0 || repetitions < 5 {
        return Err(Error::Config(format!(
            "benchmark needs at least 1 warmup run and 5 repetitions, got {warmup_runs} and {repetitions}"
        )));
    }
    let sampler = Sampler::new(model, library);
    let frames: usize = requests.iter().map(|r| r.audio.frames()).sum();
    for _ in 0..warmup_runs {
        for req in requests {
            sampler.infer(req)?;
        }
    }
    let mut reps = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for req in requests {
            sampler.infer(req)?;
        }
        reps.push(start.elapsed().as_secs_f64() / frames as f64);
    }
    let n = reps.len() as f64;
    let mean = reps.iter().sum::<f64>() / n;
    let std = (reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(ItfReport {
        steps: model.steps(),
        frames,
        repetitions: reps,
        mean,
        std,
    })
}

/// `run,steps,frames,seconds,itf` rows, one per repetition.
pub fn itf_csv(reports: &[ItfReport]) -> String {
    let mut out = String::from("run,steps,frames,seconds,itf\n");
    let mut run = 0;
    for r in reports {
        for itf in &r.repetitions {
            out.push_str(&format!("{run},{},{},{},{}\n", r.steps, r.frames, itf * r.frames as f64, itf));
            run += 1;
        }
    }
    out
}
