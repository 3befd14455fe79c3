//! Procedural multi-speaker corpus.
//!
//! Each sequence is driven by a latent phoneme excitation track. Audio
//! features render the excitation through a fixed phoneme basis plus a
//! speaker-specific spectral tilt. Lip and jaw channels follow the
//! excitation closely, shaped by the speaker's gains, exponent, lag and
//! jitter. Brow and eye channels are dominated by random events that the
//! audio does not determine, with only a weak energy coupling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, StdRng};
use crate::tensor::Tensor;

use super::arkit::{self, ChannelGroup, CHANNELS, NUM_CHANNELS};
use super::{AudioFeatureSequence, BlendshapeSequence, CorpusItem, SyntheticCorpus, AUDIO_DIM, DEFAULT_FPS};

pub const NUM_PHONEMES: usize = 8;
/// Seed of the phoneme basis shared by every corpus.
const BASIS_SEED: u64 = 0x5EED_BA515;
const AUDIO_NOISE: f64 = 0.1;
const TILT_SCALE: f64 = 0.8;
const MIN_STYLE_DISTANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    pub num_speakers: usize,
    pub sequences_per_speaker: usize,
    pub frames_per_sequence: usize,
    pub seed: u64,
    pub fps: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            sequences_per_speaker: 50,
            frames_per_sequence: 100,
            seed: 0,
            fps: DEFAULT_FPS,
        }
    }
}

/// How one synthetic speaker moves.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStyle {
    pub speaker_id: String,
    pub lip_gain: f64,
    pub jaw_gain: f64,
    pub brow_gain: f64,
    pub eye_gain: f64,
    pub brow_offset: f64,
    /// Exponent applied to lip responses, in `[0.5, 2]`.
    pub lip_exponent: f64,
    /// Per-segment visual onset jitter, in frames.
    pub jitter: f64,
    /// Visual lag behind the audio, in frames.
    pub lag: usize,
    /// Additive offset of the speaker's audio features.
    pub tilt: Vec<f64>,
    pub style_seed: u64,
}

impl SpeakerStyle {
    fn random(speaker_id: String, style_seed: u64) -> Self {
        let mut r = rng::seeded(style_seed);
        let tilt = rng::normal_vec(&mut r, AUDIO_DIM)
            .into_iter()
            .map(|v| v * TILT_SCALE)
            .collect();
        Self {
            speaker_id,
            lip_gain: r.random_range(0.55..1.25),
            jaw_gain: r.random_range(0.5..1.2),
            brow_gain: r.random_range(0.5..1.0),
            eye_gain: r.random_range(0.6..1.0),
            brow_offset: r.random_range(0.0..0.35),
            lip_exponent: r.random_range(0.6..1.6),
            jitter: r.random_range(0.0..1.0),
            lag: r.random_range(0..=2),
            tilt,
            style_seed,
        }
    }

    /// Style with every motion gain at zero: only the rest pose remains.
    pub fn still(speaker_id: impl Into<String>) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            lip_gain: 0.0,
            jaw_gain: 0.0,
            brow_gain: 0.0,
            eye_gain: 0.0,
            brow_offset: 0.2,
            lip_exponent: 1.0,
            jitter: 0.0,
            lag: 0,
            tilt: vec![0.0; AUDIO_DIM],
            style_seed: 0,
        }
    }

    fn style_vector(&self) -> [f64; 7] {
        [
            self.lip_gain,
            self.jaw_gain,
            self.brow_gain,
            self.eye_gain,
            self.brow_offset * 2.0,
            self.lip_exponent / 2.0,
            self.lag as f64 / 2.0,
        ]
    }

    pub fn distance(&self, other: &SpeakerStyle) -> f64 {
        self.style_vector()
            .iter()
            .zip(other.style_vector())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Phoneme signatures shared across corpora.
struct Basis {
    /// phonemes × audio dim
    audio: Tensor,
    /// phonemes × 52 visual targets (lip/jaw/other channels only)
    visual: Tensor,
}

impl Basis {
    fn new() -> Self {
        let mut r = rng::seeded(BASIS_SEED);
        let audio = Tensor::from_vec(
            NUM_PHONEMES,
            AUDIO_DIM,
            rng::normal_vec(&mut r, NUM_PHONEMES * AUDIO_DIM),
        )
        .expect("basis shape");
        let lips = arkit::lip_indices();
        let jaw_open = arkit::index_of("jawOpen").expect("jawOpen");
        let mut visual = Tensor::zeros(NUM_PHONEMES, NUM_CHANNELS);
        for p in 0..NUM_PHONEMES {
            for &c in &lips {
                visual.set(p, c, r.random_range(0.0..0.08));
            }
            for _ in 0..5 {
                let c = lips[r.random_range(0..lips.len())];
                visual.set(p, c, r.random_range(0.4..0.9));
            }
            // open vowels for even phonemes
            let open = if p % 2 == 0 { r.random_range(0.45..0.8) } else { r.random_range(0.05..0.2) };
            visual.set(p, jaw_open, open);
            for name in ["cheekPuff", "noseSneerLeft", "noseSneerRight"] {
                let c = arkit::index_of(name).expect("channel");
                visual.set(p, c, r.random_range(0.0..0.15));
            }
        }
        Self { audio, visual }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    len: usize,
    phoneme: Option<usize>,
    intensity: f64,
}

fn draw_segments(r: &mut StdRng, frames: usize) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < frames {
        let len = r.random_range(3..=8);
        let phoneme = (r.random::<f64>() >= 0.15).then(|| r.random_range(0..NUM_PHONEMES));
        segs.push(Segment {
            start,
            len,
            phoneme,
            intensity: r.random_range(0.6..1.0),
        });
        start += len;
    }
    segs
}

/// Render segments into a frames × phonemes track, shifting each segment's
/// onset by `shift(i)` frames, then soften transitions.
fn render(segs: &[Segment], frames: usize, shift: impl Fn(usize) -> isize) -> Tensor {
    let mut t = Tensor::zeros(frames, NUM_PHONEMES);
    for (i, s) in segs.iter().enumerate() {
        let Some(p) = s.phoneme else { continue };
        let start = s.start as isize + shift(i);
        for f in start..start + s.len as isize {
            if f >= 0 && (f as usize) < frames {
                t.set(f as usize, p, s.intensity);
            }
        }
    }
    smooth_rows(&smooth_rows(&t))
}

/// `[1/4, 1/2, 1/4]` along time with renormalized edges.
fn smooth_rows(t: &Tensor) -> Tensor {
    let n = t.rows();
    Tensor::from_fn(n, t.cols(), |f, c| {
        let mut acc = 0.5 * t.get(f, c);
        let mut w = 0.5;
        if f > 0 {
            acc += 0.25 * t.get(f - 1, c);
            w += 0.25;
        }
        if f + 1 < n {
            acc += 0.25 * t.get(f + 1, c);
            w += 0.25;
        }
        acc / w
    })
}

/// Smooth bump events with random onsets; returns a per-frame track.
fn event_track(r: &mut StdRng, frames: usize, mean_gap: f64, dur: (usize, usize), amp: (f64, f64)) -> Vec<f64> {
    let mut track = vec![0.0; frames];
    let mut f = r.random_range(0.0..mean_gap);
    while (f as usize) < frames {
        let len = r.random_range(dur.0..=dur.1);
        let a = r.random_range(amp.0..amp.1);
        let start = f as usize;
        for k in 0..len {
            let idx = start + k;
            if idx >= frames {
                break;
            }
            let phase = (k as f64 + 0.5) / len as f64;
            track[idx] += a * (std::f64::consts::PI * phase).sin();
        }
        f += len as f64 + r.random_range(0.3 * mean_gap..1.7 * mean_gap);
    }
    track
}

fn speaker_id(i: usize) -> String {
    format!("spk{i:02}")
}

pub fn generate_styles(params: &CorpusParams) -> Vec<SpeakerStyle> {
    let mut styles: Vec<SpeakerStyle> = Vec::with_capacity(params.num_speakers);
    for i in 0..params.num_speakers {
        let mut attempt = 0u64;
        loop {
            let seed = rng::derive_seed_indexed(params.seed, &format!("style/{i}"), attempt);
            let s = SpeakerStyle::random(speaker_id(i), seed);
            let far = styles.iter().all(|o| o.distance(&s) >= MIN_STYLE_DISTANCE);
            // the rejection bound can become unsatisfiable for many speakers
            if far || attempt >= 200 {
                styles.push(s);
                break;
            }
            attempt += 1;
        }
    }
    styles
}

/// Synthesize one aligned (audio, blendshape, excitation) triple.
pub fn synthesize_sequence(style: &SpeakerStyle, frames: usize, fps: f64, seq_seed: u64, id: &str) -> Result<CorpusItem> {
    let basis = Basis::new();
    let mut r = rng::seeded(seq_seed);
    let segs = draw_segments(&mut r, frames);
    let excitation = render(&segs, frames, |_| 0);
    let jitters: Vec<isize> = segs
        .iter()
        .map(|_| (style.jitter * r.random_range(-1.0..1.0)).round() as isize)
        .collect();
    let visual_exc = render(&segs, frames, |i| style.lag as isize + jitters[i]);

    let mut audio = excitation.matmul(&basis.audio);
    for f in 0..frames {
        for (k, v) in audio.row_mut(f).iter_mut().enumerate() {
            *v += style.tilt[k] + AUDIO_NOISE * rng::normal(&mut r);
        }
    }

    let response = visual_exc.matmul(&basis.visual);
    let energy: Vec<f64> = (0..frames).map(|f| excitation.row(f).iter().sum()).collect();
    let brow_raise = event_track(&mut r, frames, 25.0, (8, 20), (0.3, 0.8));
    let brow_frown = event_track(&mut r, frames, 45.0, (6, 14), (0.2, 0.6));
    let blinks = event_track(&mut r, frames, 60.0, (3, 5), (0.9, 1.0));
    let gaze: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let w = r.random_range(0.05..0.3);
            let ph = r.random_range(0.0..std::f64::consts::TAU);
            (0..frames).map(|f| 0.5 + 0.5 * (w * f as f64 + ph).sin()).collect()
        })
        .collect();

    let smile_l = arkit::index_of("mouthSmileLeft").expect("channel");
    let smile_r = arkit::index_of("mouthSmileRight").expect("channel");
    // cheekSquint reads the smile channels, which come first in channel order
    debug_assert!(smile_r < arkit::index_of("cheekSquintLeft").expect("channel"));
    let mut values = Tensor::zeros(frames, NUM_CHANNELS);
    for f in 0..frames {
        for c in 0..NUM_CHANNELS {
            let name = CHANNELS[c];
            let v = match arkit::group_of(name) {
                ChannelGroup::Lip | ChannelGroup::Jaw => {
                    let gain = if arkit::group_of(name) == ChannelGroup::Jaw {
                        style.jaw_gain
                    } else {
                        style.lip_gain
                    };
                    0.03 + gain * response.get(f, c).max(0.0).powf(style.lip_exponent)
                }
                ChannelGroup::Brow => {
                    let event = if name.starts_with("browDown") {
                        brow_frown[f]
                    } else {
                        brow_raise[f]
                    };
                    style.brow_offset + style.brow_gain * (event + 0.05 * energy[f])
                }
                ChannelGroup::Eye => {
                    if name.starts_with("eyeBlink") {
                        style.eye_gain * blinks[f]
                    } else if name.starts_with("eyeLook") {
                        let k = if name.contains("Down") || name.contains("Up") { 0 } else { 1 };
                        let side = usize::from(name.ends_with("Right")) * 2;
                        0.1 * style.eye_gain * gaze[k + side][f]
                    } else {
                        0.05 + 0.05 * style.eye_gain * blinks[f]
                    }
                }
                ChannelGroup::Other => {
                    if name.starts_with("cheekSquint") {
                        0.02 + 0.3 * (values.get(f, smile_l) + values.get(f, smile_r)) / 2.0
                    } else {
                        0.02 + 0.5 * style.lip_gain * response.get(f, c)
                    }
                }
            };
            values.set(f, c, v);
        }
    }

    Ok(CorpusItem {
        id: id.to_string(),
        speaker_id: style.speaker_id.clone(),
        audio: AudioFeatureSequence::new(audio, fps, id)?,
        blendshapes: BlendshapeSequence::new(values, fps, style.speaker_id.clone())?,
        excitation: Some(excitation),
    })
}

/// Generate the whole corpus deterministically from `params.seed`.
pub fn generate_corpus(params: &CorpusParams) -> Result<SyntheticCorpus> {
    if params.num_speakers == 0 || params.sequences_per_speaker == 0 || params.frames_per_sequence == 0 {
        return Err(Error::Config(
            "speakers, sequences per speaker and frames must all be positive".into(),
        ));
    }
    let speakers = generate_styles(params);
    let mut items = Vec::with_capacity(params.num_speakers * params.sequences_per_speaker);
    for style in &speakers {
        for k in 0..params.sequences_per_speaker {
            let id = format!("{}_{k:04}", style.speaker_id);
            let seed = rng::derive_seed(params.seed, &format!("seq/{id}"));
            items.push(synthesize_sequence(style, params.frames_per_sequence, params.fps, seed, &id)?);
        }
    }
    Ok(SyntheticCorpus {
        params: params.clone(),
        speakers,
        items,
        split: None,
    })
}

/// Pearson correlation; 0 when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
