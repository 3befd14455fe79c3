//! Denoiser training: noising, the composite loss, and the optimizer loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::arkit::lip_indices;
use crate::data::CorpusItem;
use crate::diffusion::q_sample;
use crate::error::{Error, Result};
use crate::model::{DenoiserModel, EncodedAudio};
use crate::nn::{AdamConfig, AdamState, GradMap, Graph, ParameterSet, RowMask, Var};
use crate::personalization::{contrast_logits_var, IdentityLibrary, LIBRARY_PARAM};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per step; a batch never holds two sequences of one speaker.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_exp: f64,
    pub lambda_lip: f64,
    pub lambda_con: f64,
    pub lambda_vel: f64,
    pub seed: u64,
    pub lip_indices: Vec<usize>,
    /// Random training window per sequence; `None` trains on whole
    /// sequences.
    pub crop_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-4,
            lambda_exp: 1.0,
            lambda_lip: 1.0,
            lambda_con: 0.007,
            lambda_vel: 0.5,
            seed: 0,
            lip_indices: lip_indices(),
            crop_frames: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_exp, self.lambda_lip, self.lambda_con, self.lambda_vel];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {weights:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.lip_indices.is_empty() {
            return Err(Error::Config("lip channel set is empty".into()));
        }
        if let Some(&bad) = self.lip_indices.iter().find(|&&i| i >= crate::data::arkit::NUM_CHANNELS) {
            return Err(Error::Config(format!("lip channel index {bad} outside [0, 52)")));
        }
        if self.crop_frames == Some(0) {
            return Err(Error::Config("crop window must be positive".into()));
        }
        Ok(())
    }
}

/// One logged step. `dis` is the distillation term (zero for teachers).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub exp: f64,
    pub lip: f64,
    pub con: f64,
    pub vel: f64,
    pub dis: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `λ1·exp + λ2·lip + λ3·con + λ4·vel + λ5·dis`.
    pub fn recompose(&self, c: &TrainConfig, lambda_dis: f64) -> f64 {
        c.lambda_exp * self.exp
            + c.lambda_lip * self.lip
            + c.lambda_con * self.con
            + c.lambda_vel * self.vel
            + lambda_dis * self.dis
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,exp,lip,con,vel,dis,total\n");
    for r in history {
        let l = r.loss;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, l.exp, l.lip, l.con, l.vel, l.dis, l.total
        )
        .expect("string write");
    }
    out
}

pub fn write_history(history: &[LossRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Mean per-epoch total loss.
pub fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in history {
        let e = sums.entry(r.epoch).or_default();
        e.0 += r.loss.total;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}

pub fn expression_loss(x_hat: &Tensor, x0: &Tensor) -> Result<f64> {
    x_hat.ensure_same_shape(x0, "expression loss")?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(x_hat.clone()), g.constant(x0.clone()));
    let l = g.mse(a, b)?;
    Ok(g.scalar(l))
}

pub fn lip_loss(x_hat: &Tensor, x0: &Tensor, lip: &[usize]) -> Result<f64> {
    x_hat.ensure_same_shape(x0, "lip loss")?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(x_hat.clone()), g.constant(x0.clone()));
    let l = lip_loss_var(&mut g, a, b, lip)?;
    Ok(g.scalar(l))
}

pub fn velocity_loss(x_hat: &Tensor, x0: &Tensor) -> Result<f64> {
    x_hat.ensure_same_shape(x0, "velocity loss")?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(x_hat.clone()), g.constant(x0.clone()));
    let l = velocity_loss_var(&mut g, a, b)?;
    Ok(g.scalar(l))
}

pub fn lip_loss_var(g: &mut Graph, x_hat: Var, x0: Var, lip: &[usize]) -> Result<Var> {
    if lip.is_empty() {
        return Err(Error::Config("lip channel set is empty".into()));
    }
    let a = g.select_cols(x_hat, lip)?;
    let b = g.select_cols(x0, lip)?;
    g.mse(a, b)
}

/// MSE between frame differences; zero (with a warning) for one frame.
pub fn velocity_loss_var(g: &mut Graph, x_hat: Var, x0: Var) -> Result<Var> {
    if g.value(x_hat).shape() != g.value(x0).shape() {
        return Err(Error::dim(
            "velocity loss",
            format!("{:?}", g.value(x0).shape()),
            format!("{:?}", g.value(x_hat).shape()),
        ));
    }
    if g.value(x0).rows() < 2 {
        log::warn!("velocity loss undefined for a single frame; using 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let a = g.row_diff(x_hat)?;
    let b = g.row_diff(x0)?;
    g.mse(a, b)
}

/// What an extra loss term sees for one batch item.
pub struct ItemContext<'a> {
    /// Row of the speaker in the identity library.
    pub identity_index: usize,
    pub audio: &'a Tensor,
    pub x0: &'a Tensor,
    pub x_t: &'a Tensor,
    pub t: usize,
    /// The model's prediction for this item.
    pub x_hat: Var,
}

/// An additional per-item loss with its weight (the distillation term).
pub trait AuxLoss {
    fn weight(&self) -> f64;
    fn item_loss(&self, g: &mut Graph, ctx: &ItemContext<'_>) -> Result<Var>;
}

/// Speaker-disjoint batches covering every item once, in random order.
pub fn make_batches<R: Rng + ?Sized>(items: &[&CorpusItem], batch_size: usize, r: &mut R) -> Vec<Vec<usize>> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_speaker.entry(item.speaker_id.as_str()).or_default().push(i);
    }
    let mut queues: Vec<Vec<usize>> = by_speaker.into_values().collect();
    for q in &mut queues {
        q.shuffle(r);
    }
    let rounds = queues.iter().map(Vec::len).max().unwrap_or(0);
    let mut batches = Vec::new();
    for k in 0..rounds {
        let mut round: Vec<usize> = queues.iter().filter_map(|q| q.get(k).copied()).collect();
        round.shuffle(r);
        for chunk in round.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(r);
    batches
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    pub adam: AdamState,
}

struct Prepared<'a> {
    item: &'a CorpusItem,
    encoded: EncodedAudio,
    identity_index: usize,
}

/// Train `model` and the library on `items`.
pub fn train_teacher(
    config: &TrainConfig,
    items: &[&CorpusItem],
    model: &mut DenoiserModel,
    library: &mut IdentityLibrary,
) -> Result<TrainReport> {
    train_with(config, items, model, library, None, None)
}

/// Shared loop for teacher and student training. `adam` resumes an
/// optimizer state when given.
pub fn train_with(
    config: &TrainConfig,
    items: &[&CorpusItem],
    model: &mut DenoiserModel,
    library: &mut IdentityLibrary,
    aux: Option<&dyn AuxLoss>,
    adam: Option<AdamState>,
) -> Result<TrainReport> {
    config.validate()?;
    let adam_config = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = adam.unwrap_or_else(|| AdamState::new(adam_config));
    adam.config = adam_config;
    if config.epochs == 0 || items.is_empty() {
        return Ok(TrainReport {
            history: Vec::new(),
            adam,
        });
    }
    let prepared = items
        .iter()
        .map(|item| {
            let identity_index = library.index_of(&item.speaker_id).ok_or_else(|| {
                Error::Data(format!(
                    "sequence `{}` belongs to unenrolled speaker `{}`",
                    item.id, item.speaker_id
                ))
            })?;
            Ok(Prepared {
                item,
                encoded: model.encode_audio(&item.audio)?,
                identity_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = model.params.clone();
    params.insert(LIBRARY_PARAM, library.embeddings().clone())?;
    let mut mask = RowMask::new();
    mask.insert(LIBRARY_PARAM.to_string(), library.frozen_rows());

    let lambda_dis = aux.map_or(0.0, |a| a.weight());
    let mut r = rng::rng_from(config.seed, "train");
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in make_batches(items, config.batch_size, &mut r) {
            let members: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            let (loss, grads) = batch_step(config, model, &params, &members, aux, lambda_dis, &mut r)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric {
                    stage: format!("training loss (epoch {epoch})"),
                    step: Some(step),
                });
            }
            adam.step_masked(&mut params, &grads, &mask)?;
            history.push(LossRecord { step, epoch, loss });
            step += 1;
        }
        if let Some(last) = history.last() {
            log::debug!("epoch {epoch}: total {:.5}", last.loss.total);
        }
    }

    let emb = params.get(LIBRARY_PARAM)?.clone();
    library.set_embeddings(emb)?;
    for name in model.params.names().cloned().collect::<Vec<_>>() {
        model.params.replace(&name, params.get(&name)?.clone())?;
    }
    Ok(TrainReport { history, adam })
}

fn batch_step<R: Rng + ?Sized>(
    config: &TrainConfig,
    model: &DenoiserModel,
    params: &ParameterSet,
    members: &[&Prepared],
    aux: Option<&dyn AuxLoss>,
    lambda_dis: f64,
    r: &mut R,
) -> Result<(LossBreakdown, GradMap)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let lib = b.var(LIBRARY_PARAM)?;
    let rows: Vec<usize> = members.iter().map(|p| p.identity_index).collect();
    let emb = g.select_rows(lib, &rows)?;
    let id_feats = model.identity_feature(&mut g, &b, emb)?;

    let m = members.len() as f64;
    let (mut exp, mut lip, mut vel, mut dis) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, p) in members.iter().enumerate() {
        let frames = p.item.blendshapes.frames();
        let (start, len) = match config.crop_frames {
            Some(c) if c < frames => (r.random_range(0..=frames - c), c),
            _ => (0, frames),
        };
        let window: Vec<usize> = (start..start + len).collect();
        let x0 = p.item.blendshapes.values().select_rows(&window);
        let audio = p.encoded.frames.select_rows(&window);
        let t = r.random_range(1..=model.steps());
        let eps = Tensor::from_fn(len, x0.cols(), |_, _| rng::normal(r));
        let x_t = q_sample(&x0, t, &eps, &model.schedule)?.x;

        let id = g.select_rows(id_feats, &[k])?;
        let av = g.constant(audio.clone());
        let xv = g.constant(x_t.clone());
        let x0v = g.constant(x0.clone());
        let x_hat = model.denoise(&mut g, &b, av, id, t, xv)?;
        exp.push((g.mse(x_hat, x0v)?, 1.0 / m));
        lip.push((lip_loss_var(&mut g, x_hat, x0v, &config.lip_indices)?, 1.0 / m));
        vel.push((velocity_loss_var(&mut g, x_hat, x0v)?, 1.0 / m));
        if let Some(a) = aux {
            let ctx = ItemContext {
                identity_index: p.identity_index,
                audio: &audio,
                x0: &x0,
                x_t: &x_t,
                t,
                x_hat,
            };
            dis.push((a.item_loss(&mut g, &ctx)?, 1.0 / m));
        }
    }
    let exp = g.weighted_sum(&exp)?;
    let lip = g.weighted_sum(&lip)?;
    let vel = g.weighted_sum(&vel)?;
    let con = if model.config.use_identity && members.len() > 1 {
        let globals: Vec<f64> = members.iter().flat_map(|p| p.encoded.global.iter().copied()).collect();
        let audio = g.constant(Tensor::from_vec(members.len(), globals.len() / members.len(), globals)?);
        let logits = contrast_logits_var(&mut g, id_feats, audio, crate::personalization::DEFAULT_TEMPERATURE)?;
        g.symmetric_ce(logits)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let mut terms = vec![
        (exp, config.lambda_exp),
        (lip, config.lambda_lip),
        (con, config.lambda_con),
        (vel, config.lambda_vel),
    ];
    let dis = if dis.is_empty() {
        None
    } else {
        let d = g.weighted_sum(&dis)?;
        terms.push((d, lambda_dis));
        Some(d)
    };
    let total = g.weighted_sum(&terms)?;
    let loss = LossBreakdown {
        exp: g.scalar(exp),
        lip: g.scalar(lip),
        con: g.scalar(con),
        vel: g.scalar(vel),
        dis: dis.map_or(0.0, |d| g.scalar(d)),
        total: g.scalar(total),
    };
    let mut grads = g.backward(total)?;
    let mut map = b.collect(&mut grads);
    // parameters the loss does not reach (e.g. the identity path when it is
    // switched off) get zero gradients
    for (name, p) in params.iter() {
        map.entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
    }
    Ok((loss, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::arkit::NUM_CHANNELS;
    use crate::data::synth::{generate_corpus, CorpusParams};
    use crate::model::ModelConfig;

    #[test]
    fn expression_loss_examples() {
        let x = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        assert_eq!(expression_loss(&x, &x).unwrap(), 0.0);
        assert!((expression_loss(&x.map(|v| v + 1.0), &x).unwrap() - 1.0).abs() < 1e-12);
        let a = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.7, 0.1, -0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.1, 0.2, 0.5], vec![-0.3, 0.9, 0.0]]).unwrap();
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                s += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        assert!((expression_loss(&a, &b).unwrap() - s / 6.0).abs() < 1e-12);
        assert!(matches!(expression_loss(&a, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn lip_loss_examples() {
        let lip = lip_indices();
        let x = Tensor::filled(10, NUM_CHANNELS, 0.4);
        assert_eq!(lip_loss(&x, &x, &lip).unwrap(), 0.0);
        let mut brow = x.clone();
        brow.set(3, crate::data::arkit::index_of("browInnerUp").unwrap(), 0.9);
        assert_eq!(lip_loss(&brow, &x, &lip).unwrap(), 0.0);
        let mut one = x.clone();
        for f in 0..10 {
            one.set(f, crate::data::arkit::index_of("jawOpen").unwrap(), 0.9);
        }
        assert!((lip_loss(&one, &x, &lip).unwrap() - 0.25 / 28.0).abs() < 1e-12);
        assert!(matches!(lip_loss(&x, &x, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn velocity_loss_examples() {
        let col = |v: &[f64]| Tensor::from_vec(v.len(), 1, v.to_vec()).unwrap();
        assert!((velocity_loss(&col(&[0.0, 1.0, 3.0]), &col(&[0.0, 1.0, 2.0])).unwrap() - 0.5).abs() < 1e-12);
        let x = Tensor::from_fn(5, 3, |r, c| (r as f64).sin() + c as f64);
        assert!(velocity_loss(&x.map(|v| v + 0.7), &x).unwrap().abs() < 1e-12);
        assert_eq!(velocity_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(velocity_loss(&col(&[1.0]), &col(&[0.0])).unwrap(), 0.0);
    }

    #[test]
    fn batches_are_speaker_disjoint_and_complete() {
        let c = generate_corpus(&CorpusParams {
            num_speakers: 3,
            sequences_per_speaker: 4,
            frames_per_sequence: 3,
            seed: 0,
            fps: 30.0,
        })
        .unwrap();
        let items: Vec<&CorpusItem> = c.items.iter().collect();
        let batches = make_batches(&items, 2, &mut rng::seeded(1));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 2);
            let mut s: Vec<&str> = b.iter().map(|&i| items[i].speaker_id.as_str()).collect();
            s.dedup();
            assert_eq!(s.len(), b.len());
        }
    }

    fn tiny() -> (crate::data::SyntheticCorpus, DenoiserModel, IdentityLibrary) {
        let c = generate_corpus(&CorpusParams {
            num_speakers: 2,
            sequences_per_speaker: 3,
            frames_per_sequence: 12,
            seed: 2,
            fps: 30.0,
        })
        .unwrap();
        let m = DenoiserModel::new(ModelConfig {
            steps: 8,
            base_steps: 8,
            hidden: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let lib = IdentityLibrary::for_speakers(&c.speaker_ids(), 0).unwrap();
        (c, m, lib)
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let (c, mut m, mut lib) = tiny();
        let before = (m.params.clone(), lib.clone());
        let items: Vec<&CorpusItem> = c.items.iter().collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let rep = train_teacher(&cfg, &items, &mut m, &mut lib).unwrap();
        assert!(rep.history.is_empty());
        assert!(m.params.bits_eq(&before.0));
        assert_eq!(lib, before.1);
    }

    #[test]
    fn recomposition_and_determinism() {
        let (c, m0, lib0) = tiny();
        let items: Vec<&CorpusItem> = c.items.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut m, mut lib) = (m0.clone(), lib0.clone());
            let rep = train_teacher(&cfg, &items, &mut m, &mut lib).unwrap();
            (rep.history, m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert!(m1.params.bits_eq(&m2.params));
        assert_eq!(m1.encoder, m0.encoder);
        for r in &h1 {
            assert!((r.loss.total - r.loss.recompose(&cfg, 0.0)).abs() < 1e-9);
            assert!(r.loss.con > 0.0);
        }
    }

    #[test]
    fn unenrolled_speaker_is_a_data_error() {
        let (c, mut m, _) = tiny();
        let mut lib = IdentityLibrary::for_speakers(&c.speaker_ids()[..1], 0).unwrap();
        let items: Vec<&CorpusItem> = c.items.iter().collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train_teacher(&cfg, &items, &mut m, &mut lib), Err(Error::Data(_))));
    }

    #[test]
    fn frozen_library_rows_do_not_move() {
        let (c, mut m, mut lib) = tiny();
        let first = c.speaker_ids()[0].clone();
        lib.set_trainable(&first, false).unwrap();
        let before = lib.embedding(0);
        let items: Vec<&CorpusItem> = c.items.iter().collect();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train_teacher(&cfg, &items, &mut m, &mut lib).unwrap();
        assert_eq!(lib.embedding(0), before);
        assert_ne!(lib.embedding(1), IdentityLibrary::for_speakers(&c.speaker_ids(), 0).unwrap().embedding(1));
    }
}
