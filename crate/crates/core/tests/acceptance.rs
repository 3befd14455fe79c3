//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 3`.

use std::collections::BTreeMap;
use std::time::Instant;

use difftalk::data::arkit::{brow_indices, lip_indices, upper_face_indices, NUM_CHANNELS};
use difftalk::data::{generate_corpus, split_corpus, AudioFeatureSequence, CorpusItem, CorpusParams, SyntheticCorpus, AUDIO_DIM};
use difftalk::diffusion::{ancestral_step, build_schedule, q_sample, scaled_linear_schedule, x0_to_eps, LatentState, SigmaMode};
use difftalk::distillation::{distill_loss_var, distill_stage, distill_target, teacher_two_step, DistillConfig, DistillTarget, GaussianToy};
use difftalk::metrics::{aggregate, identity_report};
use difftalk::model::{DenoiserModel, ModelConfig, IDENTITY_DIM};
use difftalk::nn::gradcheck::{check_gradients, GradCheckReport};
use difftalk::nn::{Bound, Var};
use difftalk::personalization::{contrast_logits_var, match_identity, IdentityLibrary};
use difftalk::rng;
use difftalk::sampler::{measure_itf, InferenceRequest, Sampler};
use difftalk::tensor::Tensor;
use difftalk::training::{lip_loss_var, train_teacher, velocity_loss_var, LossRecord, TrainConfig, TrainReport};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: u32, name: &str, started: Instant, o: &Outcome, results: &mut Vec<(u32, bool)>) {
    println!(
        "{} criterion {id:>2} {name}: {} [{:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
    results.push((id, o.pass));
}

// ---------------------------------------------------------------- 1

fn diffusion_algebra() -> Outcome {
    let started = Instant::now();
    let schedules = [
        build_schedule(1000, 1e-4, 0.02).unwrap(),
        scaled_linear_schedule(32).unwrap(),
        scaled_linear_schedule(8).unwrap(),
        scaled_linear_schedule(32).unwrap().subsample(4).unwrap(),
    ];
    let mut r = rng::seeded(101);
    let mut roundtrip: f64 = 0.0;
    for s in &schedules {
        for _ in 0..200 {
            let t = r.random_range(1..=s.num_steps());
            let frames = r.random_range(1..20);
            let x0 = Tensor::from_fn(frames, NUM_CHANNELS, |_, _| r.random::<f64>());
            let eps = Tensor::from_fn(frames, NUM_CHANNELS, |_, _| rng::normal(&mut r));
            let state = q_sample(&x0, t, &eps, s).unwrap();
            let back = x0_to_eps(&state, &x0, s).unwrap();
            roundtrip = roundtrip.max(back.max_abs_diff(&eps));
        }
    }
    // Oracle denoiser: always returns the true clean sample.
    let mut chain: f64 = 0.0;
    for s in &schedules {
        for trial in 0..5 {
            let frames = 10 + trial;
            let x0 = Tensor::from_fn(frames, NUM_CHANNELS, |_, _| r.random::<f64>());
            let mut state = LatentState {
                x: Tensor::from_fn(frames, NUM_CHANNELS, |_, _| rng::normal(&mut r)),
                t: s.num_steps(),
            };
            while state.t > 0 {
                let z = Tensor::from_fn(frames, NUM_CHANNELS, |_, _| rng::normal(&mut r));
                state = ancestral_step(&state, &x0, s, &z, SigmaMode::ZeroAtLast).unwrap();
            }
            chain = chain.max(state.x.max_abs_diff(&x0));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        roundtrip < 1e-10 && chain < 1e-6 && secs < 10.0,
        format!("round-trip max err {roundtrip:.2e} (< 1e-10), oracle chain max err {chain:.2e} (< 1e-6), {secs:.2} s (< 10 s)"),
    )
}

// ---------------------------------------------------------------- 2

fn normals(r: &mut rng::StdRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * rng::normal(r))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut r = rng::seeded(202);
    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    const H: f64 = 1e-5;
    const PROBES: usize = 96;

    // dense + tanh + sigmoid + elementwise algebra
    let inputs = vec![normals(&mut r, 6, 10, 1.0), normals(&mut r, 10, 12, 0.4), normals(&mut r, 1, 12, 0.3)];
    let rep = check_gradients(&inputs, H, PROBES, 1, |g, v| {
        let xw = g.matmul(v[0], v[1])?;
        let h = g.add_row(xw, v[2])?;
        let a = g.tanh(h);
        let b = g.sigmoid(h);
        let ab = g.mul(a, b)?;
        let d = g.sub(ab, a)?;
        let s = g.scale(d, 0.7);
        let sq = g.mul(s, s)?;
        Ok(g.mean(sq))
    })
    .unwrap();
    results.push(("dense/tanh/sigmoid", rep));

    // structural ops: concat, stack, repeat, select, transpose-matmul
    let inputs = vec![normals(&mut r, 5, 7, 1.0), normals(&mut r, 5, 4, 1.0), normals(&mut r, 1, 11, 1.0), normals(&mut r, 3, 11, 1.0)];
    let rep = check_gradients(&inputs, H, PROBES, 2, |g, v| {
        let c = g.concat_cols(&[v[0], v[1]])?;
        let rep = g.repeat_rows(v[2], 5)?;
        let p = g.mul(c, rep)?;
        let st = g.stack_rows(&[p, v[3]])?;
        let sel = g.select_rows(st, &[0, 2, 5, 7])?;
        let cols = g.select_cols(sel, &[1, 3, 4, 9, 10])?;
        let m = g.matmul_t(cols, cols)?;
        let t = g.tanh(m);
        Ok(g.sum(t))
    })
    .unwrap();
    results.push(("concat/stack/repeat/select/matmul_t", rep));

    // recurrent layer
    let hid = 6;
    let inputs = vec![
        normals(&mut r, 7, 5, 1.0),
        normals(&mut r, 5, 3 * hid, 0.4),
        normals(&mut r, hid, 3 * hid, 0.4),
        normals(&mut r, 1, 3 * hid, 0.2),
        normals(&mut r, 1, 3 * hid, 0.2),
        normals(&mut r, 1, hid, 0.5),
    ];
    let target = normals(&mut r, 7, hid, 0.5);
    let rep = check_gradients(&inputs, H, 128, 3, |g, v| {
        let out = g.gru(v[0], v[1], v[2], v[3], v[4], v[5])?;
        let t = g.constant(target.clone());
        g.mse(out, t)
    })
    .unwrap();
    results.push(("gru", rep));

    // contrastive alignment
    let inputs = vec![normals(&mut r, 5, 16, 1.0), normals(&mut r, 5, 16, 1.0)];
    let rep = check_gradients(&inputs, H, PROBES, 4, |g, v| {
        let logits = contrast_logits_var(g, v[0], v[1], 0.5)?;
        g.symmetric_ce(logits)
    })
    .unwrap();
    results.push(("normalize/contrastive", rep));

    // reconstruction losses and their weighted sum
    let lip = lip_indices();
    let x0 = Tensor::from_fn(6, NUM_CHANNELS, |_, _| r.random::<f64>());
    let inputs = vec![normals(&mut r, 6, NUM_CHANNELS, 1.0)];
    let rep = check_gradients(&inputs, H, PROBES, 5, |g, v| {
        let t = g.constant(x0.clone());
        let e = g.mse(v[0], t)?;
        let l = lip_loss_var(g, v[0], t, &lip)?;
        let vel = velocity_loss_var(g, v[0], t)?;
        g.weighted_sum(&[(e, 1.0), (l, 1.0), (vel, 0.5)])
    })
    .unwrap();
    results.push(("exp/lip/vel losses", rep));

    // distillation loss
    let dt = DistillTarget {
        x_tilde: normals(&mut r, 6, NUM_CHANNELS, 1.0),
        weight: 3.5,
    };
    let inputs = vec![normals(&mut r, 6, NUM_CHANNELS, 1.0)];
    let rep = check_gradients(&inputs, H, PROBES, 6, |g, v| distill_loss_var(g, &dt, v[0])).unwrap();
    results.push(("distillation loss", rep));

    // full denoiser: every parameter, the embedding and the noisy input
    let model = DenoiserModel::new(ModelConfig {
        steps: 8,
        base_steps: 8,
        hidden: 6,
        layers: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let audio = AudioFeatureSequence::new(normals(&mut r, 5, AUDIO_DIM, 1.0), 30.0, "gc").unwrap();
    let enc = model.encode_audio(&audio).unwrap();
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().to_tensor()).collect();
    inputs.push(normals(&mut r, 1, IDENTITY_DIM, 1.0));
    inputs.push(normals(&mut r, 5, NUM_CHANNELS, 1.0));
    let x0 = Tensor::from_fn(5, NUM_CHANNELS, |_, _| r.random::<f64>());
    let n = names.len();
    let rep = check_gradients(&inputs, H, 256, 7, |g, v| {
        let map: BTreeMap<String, Var> = names.iter().cloned().zip(v[..n].iter().copied()).collect();
        let b = Bound::from_vars(map);
        let a = g.constant(enc.frames.clone());
        let out = model.forward(g, &b, a, v[n], 3, v[n + 1])?;
        let t = g.constant(x0.clone());
        let e = g.mse(out, t)?;
        let vel = velocity_loss_var(g, out, t)?;
        g.weighted_sum(&[(e, 1.0), (vel, 0.5)])
    })
    .unwrap();
    results.push(("denoiser (all parameters)", rep));

    // identity and step encoders in isolation, with the contrastive term
    let enc_names = ["identity.w1", "identity.b1", "identity.w2", "identity.b2", "step.w", "step.b"];
    let mut inputs: Vec<Tensor> = enc_names.iter().map(|n| model.params.get(n).unwrap().to_tensor()).collect();
    inputs.push(normals(&mut r, 4, IDENTITY_DIM, 1.0));
    let audio_g = normals(&mut r, 4, 64, 1.0);
    let rep = check_gradients(&inputs, H, PROBES, 8, |g, v| {
        let map: BTreeMap<String, Var> = enc_names.iter().map(|s| s.to_string()).zip(v[..6].iter().copied()).collect();
        let b = Bound::from_vars(map);
        let feats = model.identity_feature(g, &b, v[6])?;
        let a = g.constant(audio_g.clone());
        let logits = contrast_logits_var(g, feats, a, 0.07)?;
        let con = g.symmetric_ce(logits)?;
        let step = model.step_embedding(g, &b, 5)?;
        let st = g.tanh(step);
        let s = g.sum(st);
        g.weighted_sum(&[(con, 1.0), (s, 0.1)])
    })
    .unwrap();
    results.push(("identity/step encoders", rep));

    let secs = started.elapsed().as_secs_f64();
    let worst = results.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let min_probed = results.iter().map(|(_, r)| r.probed).min().unwrap();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, r)| r.max_rel_err >= 1e-4 || r.probed < 64)
        .map(|(n, r)| format!("{n} ({:.2e}, {} probes)", r.max_rel_err, r.probed))
        .collect();
    outcome(
        failing.is_empty() && secs < 60.0,
        format!(
            "{} blocks, min {min_probed} probes, worst rel err {worst:.2e} (< 1e-4), {secs:.1} s (< 60 s){}",
            results.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 3

fn distillation_algebra() -> Outcome {
    let started = Instant::now();
    let mut r = rng::seeded(303);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 1usize << r.random_range(1..7);
        let teacher = scaled_linear_schedule(n).unwrap();
        let tau = r.random_range(1..=n / 2);
        let x0 = r.random_range(-2.0..2.0);
        let eps = rng::normal(&mut r);
        let x_tau = q_sample(&Tensor::scalar(x0), 2 * tau, &Tensor::scalar(eps), &teacher).unwrap().x;
        let (_, x_pp) = teacher_two_step(|_, _| Ok(Tensor::scalar(x0)), &x_tau, tau, &teacher).unwrap();
        let target = distill_target(&x_tau, &x_pp, tau, &teacher).unwrap();
        worst = worst.max((target.x_tilde.item() - x0).abs());
    }
    // Weight check against an independently accumulated ᾱ table.
    let mut weight_err: f64 = 0.0;
    let mut checked = 0;
    for n in [2usize, 8, 16, 32, 64] {
        let teacher = scaled_linear_schedule(n).unwrap();
        let bound = |s: f64| (s * 1000.0 / n as f64).min(0.999);
        let (b0, b1) = (bound(1e-4), bound(0.02));
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for k in 0..n {
            let beta = if n == 1 { b0 } else { b0 + (b1 - b0) * k as f64 / (n - 1) as f64 };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        for tau in 1..=n / 2 {
            let ab = alpha_bar[2 * tau - 1];
            let expect = (ab / (1.0 - ab)).max(1.0);
            let x = Tensor::scalar(0.3);
            let target = distill_target(&x, &x, tau, &teacher).unwrap();
            weight_err = weight_err.max((target.weight - expect).abs() / expect);
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && weight_err < 1e-9 && secs < 5.0,
        format!(
            "fixed point max err {worst:.2e} over 1000 triples (< 1e-10), weight rel err {weight_err:.1e} on {checked} student steps, {secs:.2} s (< 5 s)"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn gaussian_toy() -> Outcome {
    let started = Instant::now();
    let toy = GaussianToy { mean: 0.4, std: 0.25 };
    let teacher = scaled_linear_schedule(32).unwrap();
    let rep = toy.distill(&teacher, 600, 64, 4).unwrap();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        rep.max_mse < 1e-3 && secs < 120.0,
        format!(
            "32 → 16 steps, worst per-step MSE(one student step, two teacher steps) {:.2e} (< 1e-3), {secs:.1} s (< 120 s)",
            rep.max_mse
        ),
    )
}

// ---------------------------------------------------------------- desk run

/// Reduced desk configuration shared by criteria 5, 6, 9 and 10.
const HIDDEN: usize = 64;
const LR: f64 = 1e-3;
const CROP: usize = 40;
const TEACHER_EPOCHS: usize = 50;
const DISTILL_EPOCHS: usize = 25;
const EVAL_SEED: u64 = 1;

fn desk_corpus(sequences: usize) -> SyntheticCorpus {
    let mut c = generate_corpus(&CorpusParams {
        num_speakers: 8,
        sequences_per_speaker: sequences,
        frames_per_sequence: 100,
        seed: 0,
        fps: 30.0,
    })
    .unwrap();
    c.split = Some(split_corpus(&c, 0.2, 0).unwrap());
    c
}

fn desk_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: LR,
        crop_frames: Some(CROP),
        seed,
        ..TrainConfig::default()
    }
}

fn generate(model: &DenoiserModel, lib: &IdentityLibrary, items: &[&CorpusItem], seed: u64) -> Vec<(difftalk::data::BlendshapeSequence, difftalk::data::BlendshapeSequence)> {
    let s = Sampler::new(model, lib);
    items
        .iter()
        .map(|it| {
            let out = s
                .infer(&InferenceRequest {
                    audio: it.audio.clone(),
                    identity_override: Some(it.speaker_id.clone()),
                    seed,
                })
                .unwrap();
            (out.sequence, it.blendshapes.clone())
        })
        .collect()
}

fn quality(model: &DenoiserModel, lib: &IdentityLibrary, items: &[&CorpusItem]) -> (f64, f64, f64) {
    aggregate(&generate(model, lib, items, EVAL_SEED), &lip_indices(), &upper_face_indices()).unwrap()
}

struct Trained {
    model: DenoiserModel,
    library: IdentityLibrary,
    report: TrainReport,
    lambda_dis: f64,
    config: TrainConfig,
    secs: f64,
}

fn train_model(config: ModelConfig, train: &TrainConfig, items: &[&CorpusItem], speakers: &[String], lib_seed: u64) -> Trained {
    let t0 = Instant::now();
    let mut model = DenoiserModel::new(config).unwrap();
    let mut library = IdentityLibrary::for_speakers(speakers, lib_seed).unwrap();
    let report = train_teacher(train, items, &mut model, &mut library).unwrap();
    Trained {
        model,
        library,
        report,
        lambda_dis: 0.0,
        config: train.clone(),
        secs: t0.elapsed().as_secs_f64(),
    }
}

struct DeskRun {
    corpus: SyntheticCorpus,
    teacher: Trained,
    scratch8: Trained,
    distilled: Vec<Trained>,
}

fn desk_run() -> DeskRun {
    let corpus = desk_corpus(50);
    let train = corpus.train_items().unwrap();
    let speakers = corpus.speaker_ids();
    let teacher = train_model(
        ModelConfig {
            steps: 32,
            base_steps: 32,
            hidden: HIDDEN,
            ..ModelConfig::default()
        },
        &desk_train(TEACHER_EPOCHS, 0),
        &train,
        &speakers,
        0,
    );
    println!("  teacher-32 trained in {:.0} s", teacher.secs);
    let scratch8 = train_model(
        ModelConfig {
            steps: 8,
            base_steps: 32,
            hidden: HIDDEN,
            ..ModelConfig::default()
        },
        &desk_train(TEACHER_EPOCHS, 0),
        &train,
        &speakers,
        0,
    );
    println!("  scratch-8 trained in {:.0} s", scratch8.secs);
    let mut distilled: Vec<Trained> = Vec::new();
    for n in [16, 8] {
        let t0 = Instant::now();
        let (m, l) = match distilled.last() {
            Some(d) => (&d.model, &d.library),
            None => (&teacher.model, &teacher.library),
        };
        let dc = DistillConfig {
            epochs: DISTILL_EPOCHS,
            ..DistillConfig::new(n, desk_train(DISTILL_EPOCHS, n as u64))
        };
        let stage = distill_stage(&dc, &train, m, l).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        println!("  distilled-{n} trained in {secs:.0} s");
        distilled.push(Trained {
            model: stage.student,
            library: stage.library,
            report: stage.report,
            lambda_dis: dc.lambda_dis,
            config: TrainConfig {
                epochs: dc.epochs,
                ..dc.train.clone()
            },
            secs,
        });
    }
    DeskRun {
        corpus,
        teacher,
        scratch8,
        distilled,
    }
}

// ---------------------------------------------------------------- 5

fn identity_matching(run: &DeskRun) -> Outcome {
    let test = run.corpus.test_items().unwrap();
    let t0 = Instant::now();
    let m = &run.teacher.model;
    let w = m.eval_weights();
    let pairs: Vec<(String, String)> = test
        .iter()
        .map(|it| {
            let enc = m.encode_audio(&it.audio).unwrap();
            let hit = match_identity(&enc.global, &run.teacher.library, m, &w).unwrap();
            (hit.speaker_id, it.speaker_id.clone())
        })
        .collect();
    let s = identity_report(&pairs).unwrap();
    let eval_secs = t0.elapsed().as_secs_f64();
    let train_secs = run.teacher.secs;
    outcome(
        s.precision >= 0.95 && s.recall >= 0.95 && s.f1 >= 0.95 && train_secs <= 1800.0 && eval_secs < 60.0,
        format!(
            "{} held-out sequences, 8 speakers: P {:.4} R {:.4} F1 {:.4} (each >= 0.95); training {train_secs:.0} s (<= 30 min), evaluation {eval_secs:.2} s (< 1 min)",
            pairs.len(),
            s.precision,
            s.recall,
            s.f1
        ),
    )
}

// ---------------------------------------------------------------- 6

fn distill_vs_scratch(run: &DeskRun, total_secs: f64) -> Outcome {
    let test = run.corpus.test_items().unwrap();
    let (_, lbe_teacher, _) = quality(&run.teacher.model, &run.teacher.library, &test);
    let (_, lbe_scratch, _) = quality(&run.scratch8.model, &run.scratch8.library, &test);
    let (_, lbe_d16, _) = quality(&run.distilled[0].model, &run.distilled[0].library, &test);
    let (_, lbe_d8, _) = quality(&run.distilled[1].model, &run.distilled[1].library, &test);
    let untrained = DenoiserModel::new(run.teacher.model.config.clone()).unwrap();
    let fresh = IdentityLibrary::for_speakers(&run.corpus.speaker_ids(), 0).unwrap();
    let (_, lbe_untrained, _) = quality(&untrained, &fresh, &test);
    println!(
        "  info: untrained-32 LBE {lbe_untrained:.4}, teacher-32 LBE {lbe_teacher:.4}, improvement {:.1}x",
        lbe_untrained / lbe_teacher
    );
    outcome(
        lbe_d8 < lbe_scratch && lbe_d16 <= 1.1 * lbe_teacher && total_secs <= 7200.0,
        format!(
            "LBE distilled-8 {lbe_d8:.4} vs scratch-8 {lbe_scratch:.4} (must be lower); distilled-16 {lbe_d16:.4} vs 1.1 × teacher-32 {:.4}; total {total_secs:.0} s (<= 2 h)",
            1.1 * lbe_teacher
        ),
    )
}

// ---------------------------------------------------------------- 7

fn latency_law() -> Outcome {
    let started = Instant::now();
    let ids: Vec<String> = (0..8).map(|i| format!("spk{i:02}")).collect();
    let library = IdentityLibrary::for_speakers(&ids, 0).unwrap();
    let mut r = rng::seeded(707);
    let requests: Vec<InferenceRequest> = (0..4)
        .map(|i| InferenceRequest {
            audio: AudioFeatureSequence::new(normals(&mut r, 100, AUDIO_DIM, 1.0), 30.0, format!("b{i}")).unwrap(),
            identity_override: None,
            seed: i,
        })
        .collect();
    let steps = [8usize, 16, 32, 64];
    let mut itf = Vec::new();
    for &s in &steps {
        let model = DenoiserModel::new(ModelConfig {
            steps: s,
            base_steps: s,
            ..ModelConfig::default()
        })
        .unwrap();
        itf.push(measure_itf(&requests, &model, &library, 1, 5).unwrap().mean);
    }
    let xs: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, itf.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&itf).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&itf).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = itf.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let ratio = itf[2] / itf[0];
    let secs = started.elapsed().as_secs_f64();
    let rows: Vec<String> = steps.iter().zip(&itf).map(|(s, v)| format!("{s}:{:.3} ms", v * 1e3)).collect();
    outcome(
        r2 > 0.98 && (3.0..=5.5).contains(&ratio) && secs < 600.0,
        format!(
            "ITF/frame {}; R² {r2:.4} (> 0.98); ITF(32)/ITF(8) {ratio:.2} (in [3, 5.5]); {secs:.0} s (< 10 min)",
            rows.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn ablations() -> Outcome {
    let started = Instant::now();
    let corpus = desk_corpus(20);
    let train = corpus.train_items().unwrap();
    let test = corpus.test_items().unwrap();
    let speakers = corpus.speaker_ids();
    let (mut lip_up, mut vel_up, mut id_up) = (0, 0, 0);
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut scores = BTreeMap::new();
        for variant in ["full", "no-lip", "no-vel", "no-id"] {
            let mut tc = desk_train(40, seed);
            let mut mc = ModelConfig {
                steps: 8,
                base_steps: 32,
                hidden: HIDDEN,
                init_seed: seed,
                ..ModelConfig::default()
            };
            match variant {
                "no-lip" => tc.lambda_lip = 0.0,
                "no-vel" => tc.lambda_vel = 0.0,
                "no-id" => mc.use_identity = false,
                _ => {}
            }
            let t = train_model(mc, &tc, &train, &speakers, seed);
            let (mbe, lbe, _) = quality(&t.model, &t.library, &test);
            scores.insert(variant, (mbe, lbe));
        }
        let full = scores["full"];
        lip_up += usize::from(scores["no-lip"].1 > full.1);
        vel_up += usize::from(scores["no-vel"].0 > full.0);
        id_up += usize::from(scores["no-id"].0 > full.0 && scores["no-id"].1 > full.1);
        lines.push(format!(
            "seed {seed}: full {:.4}/{:.4} no-lip LBE {:.4} no-vel MBE {:.4} no-id {:.4}/{:.4}",
            full.0, full.1, scores["no-lip"].1, scores["no-vel"].0, scores["no-id"].0, scores["no-id"].1
        ));
    }
    for l in &lines {
        println!("  {l}");
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        lip_up >= 2 && vel_up >= 2 && id_up >= 2 && secs <= 3.0 * 3600.0,
        format!(
            "seeds agreeing (of 3, need 2): no-lip raises LBE {lip_up}, no-vel raises MBE {vel_up}, no-id raises both {id_up}; {secs:.0} s (<= 3 h)"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn diversity(run: &DeskRun) -> Outcome {
    let started = Instant::now();
    let test = run.corpus.test_items().unwrap();
    let items: Vec<&CorpusItem> = test.iter().take(10).copied().collect();
    let d8 = &run.distilled[1];
    let outs: Vec<Vec<_>> = (0..3u64).map(|seed| generate(&d8.model, &d8.library, &items, seed)).collect();
    let spread = |channels: &[usize]| -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for k in 0..items.len() {
            let frames = outs[0][k].0.frames();
            for &c in channels {
                for f in 0..frames {
                    let v: Vec<f64> = outs.iter().map(|o| o[k].0.values().get(f, c)).collect();
                    let mean = v.iter().sum::<f64>() / 3.0;
                    total += v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
                    count += 1;
                }
            }
        }
        total / count as f64
    };
    let brow = spread(&brow_indices());
    let lip = spread(&lip_indices());
    let ratio = brow / lip;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        ratio >= 2.0 && secs < 120.0,
        format!(
            "distilled-8, 10 clips × 3 seeds: brow variance {brow:.2e}, lip variance {lip:.2e}, ratio {ratio:.1} (>= 2); {secs:.1} s (< 2 min)"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn recomposition_and_determinism(run: &DeskRun) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for t in [&run.teacher, &run.scratch8, &run.distilled[0], &run.distilled[1]] {
        for rec in &t.report.history {
            let l = rec.loss;
            let err = (l.recompose(&t.config, t.lambda_dis) - l.total).abs() / l.total.abs().max(1.0);
            worst = worst.max(err);
            steps += 1;
        }
    }
    // A two-epoch rerun must reproduce the first two epochs bit for bit.
    let train = run.corpus.train_items().unwrap();
    let rerun = train_model(
        run.teacher.model.config.clone(),
        &desk_train(2, 0),
        &train,
        &run.corpus.speaker_ids(),
        0,
    );
    let prefix: Vec<&LossRecord> = run.teacher.report.history.iter().filter(|r| r.epoch < 2).collect();
    let same = prefix.len() == rerun.report.history.len()
        && prefix.iter().zip(&rerun.report.history).all(|(a, b)| {
            let (x, y) = (a.loss, b.loss);
            a.step == b.step
                && [x.exp, x.lip, x.con, x.vel, x.dis, x.total]
                    .iter()
                    .zip([y.exp, y.lip, y.con, y.vel, y.dis, y.total])
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        });
    outcome(
        worst < 1e-12 && same && steps > 0,
        format!(
            "recomposition max rel err {worst:.1e} over {steps} logged steps (teacher, scratch, both students); rerun reproduces {} logged steps bit-identically: {same}",
            prefix.len()
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut results = Vec::new();
    let all = Instant::now();

    for (id, name, f) in [
        (1, "diffusion algebra", diffusion_algebra as fn() -> Outcome),
        (2, "gradient suite", gradient_suite),
        (3, "distillation algebra", distillation_algebra),
        (4, "gaussian-toy distillation", gaussian_toy),
    ] {
        if on(id) {
            let t = Instant::now();
            let o = f();
            report(id, name, t, &o, &mut results);
        }
    }

    if on(5) || on(6) || on(9) || on(10) {
        let t = Instant::now();
        println!("desk run: 8 speakers × 50 sequences × 100 frames, hidden {HIDDEN}, lr {LR}, crop {CROP}");
        let run = desk_run();
        let training_secs = t.elapsed().as_secs_f64();
        if on(5) {
            let t = Instant::now();
            report(5, "identity matching", t, &identity_matching(&run), &mut results);
        }
        if on(6) {
            let t = Instant::now();
            let o = distill_vs_scratch(&run, training_secs);
            report(6, "distillation beats scratch", t, &o, &mut results);
        }
        if on(9) {
            let t = Instant::now();
            report(9, "diversity", t, &diversity(&run), &mut results);
        }
        if on(10) {
            let t = Instant::now();
            report(10, "loss recomposition and determinism", t, &recomposition_and_determinism(&run), &mut results);
        }
    }
    if on(7) {
        let t = Instant::now();
        report(7, "latency law", t, &latency_law(), &mut results);
    }
    if on(8) {
        let t = Instant::now();
        report(8, "ablation directions", t, &ablations(), &mut results);
    }

    results.sort();
    let failed: Vec<u32> = results.iter().filter(|(_, p)| !p).map(|(i, _)| *i).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        all.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
