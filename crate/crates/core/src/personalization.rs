//! Identity embedding library, contrastive alignment of identity and audio
//! features, and identity lookup from audio.

use crate::error::{Error, Result};
use crate::model::{DenoiserModel, EvalWeights, IDENTITY_DIM};
use crate::nn::{Graph, Param, Var};
use crate::rng;
use crate::tensor::{self, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Parameter name of the embedding block inside checkpoints.
pub const LIBRARY_PARAM: &str = "library.embeddings";

/// Ordered speaker embeddings. Row `i` of `embeddings` belongs to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLibrary {
    ids: Vec<String>,
    trainable: Vec<bool>,
    embeddings: Param,
    pub temperature: f64,
}

impl Default for IdentityLibrary {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPERATURE).expect("default temperature is positive")
    }
}

impl IdentityLibrary {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            ids: Vec::new(),
            trainable: Vec::new(),
            embeddings: Param::zeros(0, IDENTITY_DIM),
            temperature,
        })
    }

    /// Library with one fresh trainable embedding per speaker, each seeded
    /// from `seed` and the speaker id.
    pub fn for_speakers(speakers: &[String], seed: u64) -> Result<Self> {
        let mut lib = Self::default();
        for s in speakers {
            lib.enroll(s, rng::derive_seed(seed, &format!("identity/{s}")))?;
        }
        Ok(lib)
    }

    pub fn from_parts(ids: Vec<String>, trainable: Vec<bool>, embeddings: Param, temperature: f64) -> Result<Self> {
        let mut lib = Self::new(temperature)?;
        if embeddings.shape() != (ids.len(), IDENTITY_DIM) || trainable.len() != ids.len() {
            return Err(Error::dim(
                "identity library",
                format!("{}x{IDENTITY_DIM}", ids.len()),
                format!("{}x{}", embeddings.rows(), embeddings.cols()),
            ));
        }
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(Error::Enrollment(format!("speaker `{id}` listed twice")));
            }
        }
        if embeddings.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("identity library"));
        }
        lib.ids = ids;
        lib.trainable = trainable;
        lib.embeddings = embeddings;
        Ok(lib)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn embeddings(&self) -> &Param {
        &self.embeddings
    }

    pub fn set_embeddings(&mut self, p: Param) -> Result<()> {
        if p.shape() != self.embeddings.shape() {
            return Err(Error::dim(
                "identity library",
                format!("{:?}", self.embeddings.shape()),
                format!("{:?}", p.shape()),
            ));
        }
        self.embeddings = p;
        Ok(())
    }

    pub fn index_of(&self, speaker_id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == speaker_id)
    }

    pub fn require(&self, speaker_id: &str) -> Result<usize> {
        self.index_of(speaker_id)
            .ok_or_else(|| Error::Lookup(format!("speaker `{speaker_id}` is not enrolled")))
    }

    pub fn embedding(&self, i: usize) -> Vec<f64> {
        self.embeddings.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Append a fresh trainable embedding drawn from N(0, I).
    pub fn enroll(&mut self, speaker_id: &str, init_seed: u64) -> Result<()> {
        if self.index_of(speaker_id).is_some() {
            return Err(Error::Enrollment(format!("speaker `{speaker_id}` is already enrolled")));
        }
        let mut r = rng::seeded(init_seed);
        let row: Vec<f32> = rng::normal_vec(&mut r, IDENTITY_DIM).into_iter().map(|v| v as f32).collect();
        self.embeddings.push_row(&row)?;
        self.ids.push(speaker_id.to_string());
        self.trainable.push(true);
        Ok(())
    }

    pub fn set_trainable(&mut self, speaker_id: &str, trainable: bool) -> Result<()> {
        let i = self.require(speaker_id)?;
        self.trainable[i] = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    /// Frozen flag per row, for masked optimizer steps.
    pub fn frozen_rows(&self) -> Vec<bool> {
        self.trainable.iter().map(|t| !t).collect()
    }

    /// Sidecar listing: `index<TAB>speaker_id<TAB>trainable`.
    pub fn manifest(&self) -> String {
        let mut out = format!("# temperature={}\n", self.temperature);
        for (i, (id, t)) in self.ids.iter().zip(&self.trainable).enumerate() {
            out.push_str(&format!("{i}\t{id}\t{t}\n"));
        }
        out
    }
}

/// Functional form of [`IdentityLibrary::enroll`]: the input is untouched.
pub fn enroll_identity(library: &IdentityLibrary, speaker_id: &str, init_seed: u64) -> Result<IdentityLibrary> {
    let mut out = library.clone();
    out.enroll(speaker_id, init_seed)?;
    Ok(out)
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Scaled cosine similarities `norm(I)·norm(A)ᵀ / τ` on the graph.
pub fn contrast_logits_var(g: &mut Graph, identity: Var, audio: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let (ri, ci) = g.value(identity).shape();
    let (ra, ca) = g.value(audio).shape();
    if ri != ra || ci != ca || ri == 0 {
        return Err(Error::dim("contrastive batch", format!("{ri}x{ci}"), format!("{ra}x{ca}")));
    }
    let ni = g.normalize_rows(identity)?;
    let na = g.normalize_rows(audio)?;
    let sim = g.matmul_t(ni, na)?;
    Ok(g.scale(sim, 1.0 / tau))
}

pub fn contrast_logits(identity: &Tensor, audio: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let i = g.constant(identity.clone());
    let a = g.constant(audio.clone());
    let out = contrast_logits_var(&mut g, i, a, tau)?;
    Ok(g.value(out).clone())
}

/// Symmetric cross-entropy against the diagonal.
pub fn contrast_loss(logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.symmetric_ce(l)?;
    Ok(g.scalar(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMatch {
    pub speaker_id: String,
    pub score: f64,
    /// Every enrolled speaker with its cosine similarity, best first.
    pub ranked: Vec<(String, f64)>,
}

/// Cosine similarity of the audio global feature against every library
/// identity feature; ties keep library order.
pub fn match_identity(
    audio_global: &[f64],
    library: &IdentityLibrary,
    model: &DenoiserModel,
    weights: &EvalWeights,
) -> Result<IdentityMatch> {
    if library.is_empty() {
        return Err(Error::Lookup("identity library is empty".into()));
    }
    let audio = tensor::normalized(audio_global)?;
    let feats = model.identity_features(weights, &library.embeddings.to_tensor())?;
    let mut ranked = Vec::with_capacity(library.len());
    for (i, id) in library.ids.iter().enumerate() {
        let f = tensor::normalized(feats.row(i))?;
        if f.len() != audio.len() {
            return Err(Error::dim("identity feature", audio.len(), f.len()));
        }
        ranked.push((id.clone(), tensor::dot(&f, &audio)));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(IdentityMatch {
        speaker_id: ranked[0].0.clone(),
        score: ranked[0].1,
        ranked,
    })
}
