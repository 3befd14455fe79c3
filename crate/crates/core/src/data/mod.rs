//! Blendshape and audio-feature sequences, the procedural multi-speaker
//! corpus, splitting, and file I/O.

pub mod arkit;
pub mod io;
pub mod split;
pub mod synth;

pub use split::{split_corpus, SplitManifest};
pub use synth::{generate_corpus, CorpusParams, SpeakerStyle};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_FPS: f64 = 30.0;
/// Channels of the synthetic audio features.
pub const AUDIO_DIM: usize = 64;

/// Frames × 52 blendshape coefficients in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeSequence {
    values: Tensor,
    pub fps: f64,
    pub speaker_id: String,
}

impl BlendshapeSequence {
    pub fn new(values: Tensor, fps: f64, speaker_id: impl Into<String>) -> Result<Self> {
        if values.cols() != arkit::NUM_CHANNELS {
            return Err(Error::dim(
                "blendshape channels",
                arkit::NUM_CHANNELS,
                values.cols(),
            ));
        }
        if !(fps > 0.0) {
            return Err(Error::Input(format!("frame rate must be positive, got {fps}")));
        }
        if !values.is_finite() {
            return Err(Error::Input("blendshape values must be finite".into()));
        }
        Ok(Self {
            values: values.clamp(0.0, 1.0),
            fps,
            speaker_id: speaker_id.into(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn channel_names(&self) -> &'static [&'static str] {
        &arkit::CHANNELS
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.fps
    }
}

/// Frames × D audio features paired with a blendshape sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    features: Tensor,
    pub fps: f64,
    pub source_id: String,
}

impl AudioFeatureSequence {
    pub fn new(features: Tensor, fps: f64, source_id: impl Into<String>) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::Input("audio features must be finite".into()));
        }
        Ok(Self {
            features,
            fps,
            source_id: source_id.into(),
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            features: self.features.head_rows(n),
            fps: self.fps,
            source_id: self.source_id.clone(),
        }
    }
}

/// One aligned training example.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub speaker_id: String,
    pub audio: AudioFeatureSequence,
    pub blendshapes: BlendshapeSequence,
    /// Latent phoneme excitation (frames × phonemes); only known for
    /// generated data.
    pub excitation: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub params: CorpusParams,
    pub speakers: Vec<SpeakerStyle>,
    pub items: Vec<CorpusItem>,
    pub split: Option<SplitManifest>,
}

impl SyntheticCorpus {
    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.speaker_id.clone()).collect()
    }

    pub fn item(&self, id: &str) -> Option<&CorpusItem> {
        self.items.iter().find(|i| i.id == id)
    }

    fn ids_to_items<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a CorpusItem>> {
        ids.iter()
            .map(|id| {
                self.item(id)
                    .ok_or_else(|| Error::Data(format!("split references unknown sequence `{id}`")))
            })
            .collect()
    }

    pub fn train_items(&self) -> Result<Vec<&CorpusItem>> {
        match &self.split {
            Some(s) => self.ids_to_items(&s.train),
            None => Ok(self.items.iter().collect()),
        }
    }

    pub fn test_items(&self) -> Result<Vec<&CorpusItem>> {
        match &self.split {
            Some(s) => self.ids_to_items(&s.test),
            None => Err(Error::Data("corpus has no split manifest".into())),
        }
    }
}
