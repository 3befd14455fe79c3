//! Command-line front end: corpus generation, training, the distillation
//! chain, inference, identity lookup, evaluation and latency benchmarks.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifact::TalkerArtifact;
use crate::data::arkit::{lip_indices, upper_face_indices};
use crate::data::io::{load_corpus, read_audio, save_corpus, write_sequence};
use crate::data::{generate_corpus, split_corpus, AudioFeatureSequence, CorpusItem, CorpusParams, AUDIO_DIM};
use crate::distillation::{check_parity, distill_stage, DistillConfig};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, identity_report, MetricsReport};
use crate::model::{DenoiserModel, ModelConfig};
use crate::personalization::{match_identity, IdentityLibrary, DEFAULT_TEMPERATURE};
use crate::rng;
use crate::sampler::{itf_csv, measure_itf, InferenceRequest, Sampler};
use crate::tensor::Tensor;
use crate::training::{train_teacher, write_history, TrainConfig};

pub use config::{CommandConfig, OUTPUT_ROOT_ENV, SNAPSHOT_FILE};

#[derive(Parser, Debug)]
#[command(name = "difftalk", version, about = "Speech-driven blendshape animation with a distilled diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value config file (flags win over it)
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Output directory [default: $DIFFTALK_OUTPUT_ROOT/<command>, else runs/<command>]
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
    /// Root seed of the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set learning_rate=1e-3`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic multi-speaker corpus with its train/test split
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a teacher model and identity library on a corpus
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Halve a teacher's step count repeatedly down to --target-steps
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        target_steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Animate one audio-feature file
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Skip identity matching and use this enrolled speaker
        #[arg(long)]
        identity: Option<String>,
    },
    /// Rank enrolled speakers against one audio-feature file
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        audio: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// test, train or all
        #[arg(long)]
        split: Option<String>,
    },
    /// Inference time per frame for several step counts
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated step counts
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        hidden: Option<usize>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures print one `error kind=<kind> code=<n>: ...`
/// line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage code=1: {first}");
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} code={code}: {msg}", e.kind());
            code
        }
    }
}

fn flags(common: &Common, specific: Vec<(&str, Option<String>)>) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    if let Some(o) = &common.out {
        out.push(("out".into(), o.display().to_string()));
    }
    if let Some(s) = common.seed {
        out.push(("seed".into(), s.to_string()));
    }
    for (k, v) in specific {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn show<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn show_path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn resolve(command: &str, defaults: Vec<(&str, String)>, common: &Common, specific: Vec<(&str, Option<String>)>) -> Result<CommandConfig> {
    let flags = flags(common, specific)?;
    let cfg = CommandConfig::resolve(command, defaults, common.config.as_deref(), &flags)?;
    cfg.write_snapshot()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, speakers, sequences, frames } => {
            let cfg = resolve(
                "gen-data",
                gen_defaults(),
                &common,
                vec![("speakers", show(&speakers)), ("sequences", show(&sequences)), ("frames", show(&frames))],
            )?;
            gen_data(&cfg)
        }
        Command::Train { common, data, steps, epochs, hidden } => {
            let mut d = vec![("seed", "0".to_string()), ("data", String::new())];
            d.extend(model_defaults());
            d.extend(train_defaults(&TrainConfig::default()));
            let cfg = resolve(
                "train",
                d,
                &common,
                vec![
                    ("data", show_path(&data)),
                    ("steps", show(&steps)),
                    ("epochs", show(&epochs)),
                    ("hidden", show(&hidden)),
                ],
            )?;
            train(&cfg)
        }
        Command::Distill { common, data, teacher, target_steps, epochs } => {
            let dc = DistillConfig::new(8, TrainConfig::default());
            let mut d = vec![
                ("seed", "0".to_string()),
                ("data", String::new()),
                ("teacher", String::new()),
                ("target_steps", dc.student_steps.to_string()),
                ("lambda_dis", dc.lambda_dis.to_string()),
            ];
            d.extend(train_defaults(&TrainConfig {
                epochs: dc.epochs,
                ..TrainConfig::default()
            }));
            let cfg = resolve(
                "distill",
                d,
                &common,
                vec![
                    ("data", show_path(&data)),
                    ("teacher", show_path(&teacher)),
                    ("target_steps", show(&target_steps)),
                    ("epochs", show(&epochs)),
                ],
            )?;
            distill(&cfg)
        }
        Command::Infer { common, checkpoint, audio, identity } => {
            let d = vec![
                ("seed", "0".to_string()),
                ("checkpoint", String::new()),
                ("audio", String::new()),
                ("identity", String::new()),
            ];
            let cfg = resolve(
                "infer",
                d,
                &common,
                vec![("checkpoint", show_path(&checkpoint)), ("audio", show_path(&audio)), ("identity", identity)],
            )?;
            infer(&cfg)
        }
        Command::Match { common, checkpoint, audio } => {
            let d = vec![("seed", "0".to_string()), ("checkpoint", String::new()), ("audio", String::new())];
            let cfg = resolve(
                "match",
                d,
                &common,
                vec![("checkpoint", show_path(&checkpoint)), ("audio", show_path(&audio))],
            )?;
            match_cmd(&cfg)
        }
        Command::Eval { common, checkpoint, data, split } => {
            let d = vec![
                ("seed", "0".to_string()),
                ("checkpoint", String::new()),
                ("data", String::new()),
                ("split", "test".to_string()),
                ("itf", "false".to_string()),
            ];
            let cfg = resolve(
                "eval",
                d,
                &common,
                vec![("checkpoint", show_path(&checkpoint)), ("data", show_path(&data)), ("split", split)],
            )?;
            eval(&cfg)
        }
        Command::Bench { common, steps, hidden } => {
            let m = ModelConfig::default();
            let d = vec![
                ("seed", "0".to_string()),
                ("steps", "8,16,32,64".to_string()),
                ("hidden", m.hidden.to_string()),
                ("layers", m.layers.to_string()),
                ("speakers", "8".to_string()),
                ("requests", "4".to_string()),
                ("frames", "100".to_string()),
                ("warmup", "1".to_string()),
                ("repetitions", "5".to_string()),
            ];
            let cfg = resolve("bench", d, &common, vec![("steps", steps), ("hidden", show(&hidden))])?;
            bench(&cfg)
        }
    }
}

fn gen_defaults() -> Vec<(&'static str, String)> {
    let p = CorpusParams::default();
    vec![
        ("seed", p.seed.to_string()),
        ("speakers", p.num_speakers.to_string()),
        ("sequences", p.sequences_per_speaker.to_string()),
        ("frames", p.frames_per_sequence.to_string()),
        ("fps", p.fps.to_string()),
        ("test_fraction", "0.2".to_string()),
    ]
}

fn model_defaults() -> Vec<(&'static str, String)> {
    let m = ModelConfig::default();
    vec![
        ("steps", m.steps.to_string()),
        ("hidden", m.hidden.to_string()),
        ("layers", m.layers.to_string()),
        ("use_identity", m.use_identity.to_string()),
        ("encoder_seed", m.encoder_seed.to_string()),
        ("temperature", DEFAULT_TEMPERATURE.to_string()),
    ]
}

fn train_defaults(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("learning_rate", t.learning_rate.to_string()),
        ("lambda_exp", t.lambda_exp.to_string()),
        ("lambda_lip", t.lambda_lip.to_string()),
        ("lambda_con", t.lambda_con.to_string()),
        ("lambda_vel", t.lambda_vel.to_string()),
        ("crop_frames", t.crop_frames.unwrap_or(0).to_string()),
    ]
}

fn train_config(cfg: &CommandConfig, seed: u64) -> Result<TrainConfig> {
    let crop: usize = cfg.get("crop_frames")?;
    let t = TrainConfig {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        learning_rate: cfg.get("learning_rate")?,
        lambda_exp: cfg.get("lambda_exp")?,
        lambda_lip: cfg.get("lambda_lip")?,
        lambda_con: cfg.get("lambda_con")?,
        lambda_vel: cfg.get("lambda_vel")?,
        seed,
        crop_frames: (crop > 0).then_some(crop),
        ..TrainConfig::default()
    };
    t.validate()?;
    Ok(t)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &CommandConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let params = CorpusParams {
        num_speakers: cfg.get("speakers")?,
        sequences_per_speaker: cfg.get("sequences")?,
        frames_per_sequence: cfg.get("frames")?,
        seed,
        fps: cfg.get("fps")?,
    };
    let mut corpus = generate_corpus(&params)?;
    corpus.split = Some(split_corpus(&corpus, cfg.get("test_fraction")?, rng::derive_seed(seed, "split"))?);
    let out = cfg.out_dir();
    save_corpus(&corpus, &out)?;
    println!(
        "corpus: {} speakers, {} sequences -> {}",
        corpus.speakers.len(),
        corpus.items.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &CommandConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let corpus = load_corpus(&cfg.required_path("data")?)?;
    if corpus.split.is_none() {
        return Err(Error::Split("training corpus has no split manifest".into()));
    }
    let items = corpus.train_items()?;
    let steps: usize = cfg.get("steps")?;
    let mut model = DenoiserModel::new(ModelConfig {
        steps,
        base_steps: steps,
        hidden: cfg.get("hidden")?,
        layers: cfg.get("layers")?,
        encoder_seed: cfg.get("encoder_seed")?,
        init_seed: rng::derive_seed(seed, "init"),
        use_identity: cfg.get("use_identity")?,
        ..ModelConfig::default()
    })?;
    let mut library = IdentityLibrary::for_speakers(&corpus.speaker_ids(), rng::derive_seed(seed, "identity"))?;
    library.temperature = IdentityLibrary::new(cfg.get("temperature")?)?.temperature;
    let tc = train_config(cfg, rng::derive_seed(seed, "train"))?;
    log::info!("training {steps}-step teacher on {} sequences", items.len());
    let report = train_teacher(&tc, &items, &mut model, &mut library)?;
    let out = cfg.out_dir();
    write_history(&report.history, &out.join("loss.csv"))?;
    let mut art = TalkerArtifact::new(model, library);
    art.adam = Some(report.adam);
    art.info.insert("stage".into(), "teacher".into());
    art.info.insert("distilled".into(), "false".into());
    art.info.insert("created_by".into(), format!("difftalk {}", env!("CARGO_PKG_VERSION")));
    let path = out.join("teacher.ckpt");
    art.save(&path)?;
    let last = report.history.last().map_or(f64::NAN, |r| r.loss.total);
    println!("teacher: {} updates, final loss {last:.6} -> {}", report.history.len(), path.display());
    Ok(())
}

/// Student step counts visited when halving `teacher` down to `target`.
pub fn distill_chain(teacher: usize, target: usize) -> Result<Vec<usize>> {
    let mut chain = Vec::new();
    let mut n = teacher;
    if target >= teacher {
        return Err(Error::Config(format!(
            "target steps {target} must be below the teacher's {teacher}"
        )));
    }
    while n > target {
        check_parity(n, n / 2)?;
        n /= 2;
        chain.push(n);
    }
    if n != target {
        return Err(Error::Config(format!(
            "target steps {target} is not reachable by halving a {teacher}-step teacher"
        )));
    }
    Ok(chain)
}

fn distill(cfg: &CommandConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let teacher_path = cfg.required_path("teacher")?;
    let teacher = TalkerArtifact::load(&teacher_path)?;
    let chain = distill_chain(teacher.model.steps(), cfg.get("target_steps")?)?;
    let corpus = load_corpus(&cfg.required_path("data")?)?;
    let items = corpus.train_items()?;
    let out = cfg.out_dir();
    let mut manifest = String::from("steps\tcheckpoint\tparent\n");
    manifest.push_str(&format!("{}\t{}\t-\n", teacher.model.steps(), teacher_path.display()));
    let mut parent_path = teacher_path.clone();
    let (mut model, mut library) = (teacher.model, teacher.library);
    for n in chain {
        let dc = DistillConfig {
            student_steps: n,
            epochs: cfg.get("epochs")?,
            lambda_dis: cfg.get("lambda_dis")?,
            train: train_config(cfg, rng::derive_seed(seed, &format!("distill/{n}")))?,
        };
        log::info!("distilling {} -> {n} steps", model.steps());
        let stage = distill_stage(&dc, &items, &model, &library)?;
        write_history(&stage.report.history, &out.join(format!("loss_{n}.csv")))?;
        let mut art = TalkerArtifact::new(stage.student, stage.library);
        art.info.insert("stage".into(), format!("distill-{n}"));
        art.info.insert("distilled".into(), "true".into());
        art.info.insert("parent".into(), parent_path.display().to_string());
        art.info.insert("created_by".into(), format!("difftalk {}", env!("CARGO_PKG_VERSION")));
        let path = out.join(format!("student_{n}.ckpt"));
        art.save(&path)?;
        manifest.push_str(&format!("{n}\t{}\t{}\n", path.display(), parent_path.display()));
        println!("stage {n}: {} updates -> {}", stage.report.history.len(), path.display());
        parent_path = path;
        model = art.model;
        library = art.library;
    }
    write_text(&out.join("stages.tsv"), &manifest)
}

fn infer(cfg: &CommandConfig) -> Result<()> {
    let art = TalkerArtifact::load(&cfg.required_path("checkpoint")?)?;
    let audio = read_audio(&cfg.required_path("audio")?)?;
    let req = InferenceRequest {
        audio,
        identity_override: cfg.optional("identity")?.map(str::to_string),
        seed: rng::derive_seed(cfg.get("seed")?, "infer"),
    };
    let output = Sampler::new(&art.model, &art.library).infer(&req)?;
    let out = cfg.out_dir();
    write_sequence(&output.sequence, &out.join("output.csv"))?;
    let mut text = format!("speaker_id={}\nmatched={}\n", output.speaker_id, output.used_matching());
    if let Some(m) = &output.matched {
        text.push_str(&format!("score={}\n", m.score));
    }
    write_text(&out.join("identity.txt"), &text)?;
    println!("{} frames as `{}` -> {}", output.sequence.frames(), output.speaker_id, out.join("output.csv").display());
    Ok(())
}

fn match_cmd(cfg: &CommandConfig) -> Result<()> {
    let art = TalkerArtifact::load(&cfg.required_path("checkpoint")?)?;
    let audio = read_audio(&cfg.required_path("audio")?)?;
    let encoded = art.model.encode_audio(&audio)?;
    let m = match_identity(&encoded.global, &art.library, &art.model, &art.model.eval_weights())?;
    let mut text = String::from("rank\tspeaker_id\tscore\n");
    for (i, (id, score)) in m.ranked.iter().enumerate() {
        text.push_str(&format!("{}\t{id}\t{score}\n", i + 1));
    }
    write_text(&cfg.out_dir().join("matches.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval(cfg: &CommandConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let ckpt = cfg.required_path("checkpoint")?;
    let art = TalkerArtifact::load(&ckpt)?;
    let corpus = load_corpus(&cfg.required_path("data")?)?;
    let items: Vec<&CorpusItem> = match cfg.raw("split")? {
        "test" => corpus.test_items()?,
        "train" => corpus.train_items()?,
        "all" => corpus.items.iter().collect(),
        other => return Err(Error::Config(format!("split must be test, train or all, got `{other}`"))),
    };
    let sampler = Sampler::new(&art.model, &art.library);
    let mut pairs = Vec::with_capacity(items.len());
    let mut matches = Vec::with_capacity(items.len());
    let (mut seconds, mut frames) = (0.0, 0usize);
    for (i, item) in items.iter().enumerate() {
        let encoded = art.model.encode_audio(&item.audio)?;
        let m = match_identity(&encoded.global, &art.library, &art.model, sampler.weights())?;
        matches.push((m.speaker_id, item.speaker_id.clone()));
        let out = sampler.infer(&InferenceRequest {
            audio: item.audio.clone(),
            identity_override: Some(item.speaker_id.clone()),
            seed: rng::derive_seed_indexed(seed, "eval", i as u64),
        })?;
        seconds += out.total_seconds;
        frames += out.sequence.frames();
        pairs.push((out.sequence, item.blendshapes.clone()));
    }
    let (mbe, lbe, fdd) = aggregate(&pairs, &lip_indices(), &upper_face_indices())?;
    let fdd_abs = pairs
        .iter()
        .map(|(p, g)| crate::metrics::fdd(p, g, &upper_face_indices()).map(f64::abs))
        .sum::<Result<f64>>()?
        / pairs.len() as f64;
    let report = MetricsReport {
        checkpoint_id: ckpt.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        steps: art.model.steps(),
        distilled: art.info.get("distilled").map(String::as_str) == Some("true"),
        sequences: pairs.len(),
        mbe,
        lbe,
        fdd,
        fdd_abs,
        itf: if cfg.get("itf")? { Some(seconds / frames as f64) } else { None },
        identity: Some(identity_report(&matches)?),
    };
    let out = cfg.out_dir();
    write_text(&out.join("metrics.txt"), &report.to_kv())?;
    report.append_csv(&out.join("metrics.csv"))?;
    print!("{}", report.to_kv());
    Ok(())
}

fn bench(cfg: &CommandConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let steps: Vec<usize> = cfg.list("steps")?;
    if steps.is_empty() {
        return Err(Error::Config("`steps` lists no step counts".into()));
    }
    let speakers: usize = cfg.get("speakers")?;
    let ids: Vec<String> = (0..speakers).map(|i| format!("spk{i:02}")).collect();
    let library = IdentityLibrary::for_speakers(&ids, rng::derive_seed(seed, "identity"))?;
    let frames: usize = cfg.get("frames")?;
    let requests: Vec<InferenceRequest> = (0..cfg.get::<usize>("requests")?)
        .map(|i| {
            let mut r = rng::rng_from(rng::derive_seed_indexed(seed, "bench-audio", i as u64), "audio");
            let feats = Tensor::from_fn(frames, AUDIO_DIM, |_, _| rng::normal(&mut r));
            Ok(InferenceRequest {
                audio: AudioFeatureSequence::new(feats, crate::data::DEFAULT_FPS, format!("bench{i}"))?,
                identity_override: None,
                seed: rng::derive_seed_indexed(seed, "bench", i as u64),
            })
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    let mut summary = String::from("steps,frames,repetitions,itf,itf_std\n");
    for &s in &steps {
        let model = DenoiserModel::new(ModelConfig {
            steps: s,
            base_steps: s,
            hidden: cfg.get("hidden")?,
            layers: cfg.get("layers")?,
            init_seed: rng::derive_seed(seed, "init"),
            ..ModelConfig::default()
        })?;
        let rep = measure_itf(&requests, &model, &library, cfg.get("warmup")?, cfg.get("repetitions")?)?;
        log::info!("{s} steps: {:.3e} s/frame", rep.mean);
        summary.push_str(&format!("{},{},{},{},{}\n", rep.steps, rep.frames, rep.repetitions.len(), rep.mean, rep.std));
        reports.push(rep);
    }
    let out = cfg.out_dir();
    write_text(&out.join("itf.csv"), &summary)?;
    write_text(&out.join("itf_runs.csv"), &itf_csv(&reports))?;
    print!("{summary}");
    Ok(())
}
