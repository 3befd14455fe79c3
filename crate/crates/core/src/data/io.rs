//! Sequence CSV files and the corpus directory layout.
//!
//! Blendshape CSV: header `timecode,<52 ARKit names>`, one row per frame,
//! timecode in seconds. Channel names are matched case-insensitively so
//! capture exports with capitalized names load too. Metadata (fps,
//! speaker) lives in a `<file>.meta` key-value sidecar; missing sidecars
//! fall back to 30 fps and an empty speaker.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{parse_kv, write_kv};
use crate::tensor::Tensor;

use super::arkit::{CHANNELS, NUM_CHANNELS};
use super::split::SplitManifest;
use super::synth::CorpusParams;
use super::{AudioFeatureSequence, BlendshapeSequence, CorpusItem, SyntheticCorpus, DEFAULT_FPS};

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_matrix_csv(path: &Path, header: &[String], values: &Tensor, fps: f64) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 10);
    out.push_str("timecode");
    for h in header {
        out.push(',');
        out.push_str(h);
    }
    out.push('\n');
    for f in 0..values.rows() {
        write!(out, "{}", f as f64 / fps).expect("string write");
        for v in values.row(f) {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    write_file(path, &out)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Parse a `timecode,...` CSV into rows; `expect_cols` excludes the timecode.
fn read_matrix_csv(path: &Path, expect_cols: Option<usize>) -> Result<(Vec<String>, Tensor)> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first().map(|c| c.eq_ignore_ascii_case("timecode")) != Some(true) {
        return Err(parse_err(path, 1, "first header column must be `timecode`"));
    }
    let names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    if let Some(n) = expect_cols {
        if names.len() != n {
            return Err(parse_err(
                path,
                1,
                format!("expected {n} channel columns after timecode, found {}", names.len()),
            ));
        }
    }
    let width = names.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width + 1 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {} cells, found {}", width + 1, cells.len()),
            ));
        }
        for (k, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_err(path, i + 1, format!("non-numeric cell `{}` in column {}", cell.trim(), k + 2))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((names, Tensor::from_vec(rows, width, data)?))
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let side = sidecar_path(path);
    if side.exists() {
        parse_kv(&read_file(&side)?)
    } else {
        Ok(BTreeMap::new())
    }
}

fn meta_fps(meta: &BTreeMap<String, String>, path: &Path) -> Result<f64> {
    match meta.get("fps") {
        None => Ok(DEFAULT_FPS),
        Some(v) => v
            .parse()
            .map_err(|_| parse_err(&sidecar_path(path), 0, format!("bad fps `{v}`"))),
    }
}

pub fn write_sequence(seq: &BlendshapeSequence, path: &Path) -> Result<()> {
    let header: Vec<String> = CHANNELS.iter().map(|s| s.to_string()).collect();
    write_matrix_csv(path, &header, seq.values(), seq.fps)?;
    let mut meta = BTreeMap::new();
    meta.insert("fps".to_string(), seq.fps.to_string());
    meta.insert("frames".to_string(), seq.frames().to_string());
    meta.insert("duration_secs".to_string(), format!("{:.4}", seq.duration_secs()));
    meta.insert("speaker_id".to_string(), seq.speaker_id.clone());
    meta.insert("channels".to_string(), NUM_CHANNELS.to_string());
    write_file(&sidecar_path(path), &write_kv(&meta))
}

pub fn read_sequence(path: &Path) -> Result<BlendshapeSequence> {
    let (names, values) = read_matrix_csv(path, Some(NUM_CHANNELS))?;
    for (k, (got, want)) in names.iter().zip(CHANNELS.iter()).enumerate() {
        if !got.eq_ignore_ascii_case(want) {
            return Err(parse_err(
                path,
                1,
                format!("column {} is `{got}`, expected `{want}`", k + 2),
            ));
        }
    }
    let meta = read_meta(path)?;
    let fps = meta_fps(&meta, path)?;
    let speaker = meta.get("speaker_id").cloned().unwrap_or_default();
    BlendshapeSequence::new(values, fps, speaker)
}

pub fn write_audio(audio: &AudioFeatureSequence, path: &Path) -> Result<()> {
    let header: Vec<String> = (0..audio.dim()).map(|k| format!("f{k}")).collect();
    write_matrix_csv(path, &header, audio.features(), audio.fps)?;
    let mut meta = BTreeMap::new();
    meta.insert("fps".to_string(), audio.fps.to_string());
    meta.insert("source_id".to_string(), audio.source_id.clone());
    write_file(&sidecar_path(path), &write_kv(&meta))
}

pub fn read_audio(path: &Path) -> Result<AudioFeatureSequence> {
    let (_, features) = read_matrix_csv(path, None)?;
    let meta = read_meta(path)?;
    let fps = meta_fps(&meta, path)?;
    let source = meta.get("source_id").cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    AudioFeatureSequence::new(features, fps, source)
}

const MANIFEST: &str = "manifest.txt";

/// Manifest text: `key=value` generation parameters, then `[speakers]`,
/// `[train]` and `[test]` id lists (one id per line).
pub fn manifest_text(corpus: &SyntheticCorpus) -> String {
    let p = &corpus.params;
    let mut kv = BTreeMap::new();
    kv.insert("num_speakers".to_string(), p.num_speakers.to_string());
    kv.insert("sequences_per_speaker".to_string(), p.sequences_per_speaker.to_string());
    kv.insert("frames_per_sequence".to_string(), p.frames_per_sequence.to_string());
    kv.insert("seed".to_string(), p.seed.to_string());
    kv.insert("fps".to_string(), p.fps.to_string());
    kv.insert("channel_list_version".to_string(), super::arkit::CHANNEL_LIST_VERSION.to_string());
    let mut out = write_kv(&kv);
    out.push_str("[speakers]\n");
    for s in &corpus.speakers {
        out.push_str(&s.speaker_id);
        out.push('\n');
    }
    if let Some(split) = &corpus.split {
        out.push_str("[train]\n");
        for id in &split.train {
            out.push_str(id);
            out.push('\n');
        }
        out.push_str("[test]\n");
        for id in &split.test {
            out.push_str(id);
            out.push('\n');
        }
    }
    out
}

/// Write the corpus under `dir`: `manifest.txt`, `blendshapes/<id>.csv`,
/// `audio/<id>.csv` (each with a `.meta` sidecar).
pub fn save_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    write_file(&dir.join(MANIFEST), &manifest_text(corpus))?;
    for item in &corpus.items {
        write_sequence(&item.blendshapes, &dir.join("blendshapes").join(format!("{}.csv", item.id)))?;
        write_audio(&item.audio, &dir.join("audio").join(format!("{}.csv", item.id)))?;
    }
    Ok(())
}

struct ParsedManifest {
    params: CorpusParams,
    speakers: Vec<String>,
    split: Option<SplitManifest>,
}

fn parse_manifest(path: &Path, text: &str) -> Result<ParsedManifest> {
    let mut kv_text = String::new();
    let mut section = String::new();
    let mut lists: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            section = t[1..t.len() - 1].to_string();
            lists.entry(section.clone()).or_default();
        } else if section.is_empty() {
            kv_text.push_str(line);
            kv_text.push('\n');
        } else if !t.is_empty() {
            lists.entry(section.clone()).or_default().push(t.to_string());
        }
    }
    let kv = parse_kv(&kv_text)?;
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| parse_err(path, 0, format!("manifest lacks `{k}`")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| parse_err(path, 0, format!("manifest `{k}` is not an integer")))
    };
    let params = CorpusParams {
        num_speakers: num("num_speakers")? as usize,
        sequences_per_speaker: num("sequences_per_speaker")? as usize,
        frames_per_sequence: num("frames_per_sequence")? as usize,
        seed: num("seed")?,
        fps: get("fps")?
            .parse()
            .map_err(|_| parse_err(path, 0, "manifest `fps` is not a number"))?,
    };
    let split = match (lists.get("train"), lists.get("test")) {
        (Some(train), Some(test)) => Some(SplitManifest {
            train: train.clone(),
            test: test.clone(),
        }),
        _ => None,
    };
    Ok(ParsedManifest {
        params,
        speakers: lists.remove("speakers").unwrap_or_default(),
        split,
    })
}

/// Load a corpus directory written by [`save_corpus`]. Speaker styles are
/// regenerated from the manifest seed; sequences come from the files.
pub fn load_corpus(dir: &Path) -> Result<SyntheticCorpus> {
    let mpath = dir.join(MANIFEST);
    let parsed = parse_manifest(&mpath, &read_file(&mpath)?)?;
    let mut items = Vec::new();
    for speaker in &parsed.speakers {
        for k in 0..parsed.params.sequences_per_speaker {
            let id = format!("{speaker}_{k:04}");
            let blendshapes = read_sequence(&dir.join("blendshapes").join(format!("{id}.csv")))?;
            let audio = read_audio(&dir.join("audio").join(format!("{id}.csv")))?;
            if audio.frames() != blendshapes.frames() {
                return Err(Error::Data(format!(
                    "sequence `{id}`: {} audio frames vs {} blendshape frames",
                    audio.frames(),
                    blendshapes.frames()
                )));
            }
            items.push(CorpusItem {
                id,
                speaker_id: speaker.clone(),
                audio,
                blendshapes,
                excitation: None,
            });
        }
    }
    let styles = super::synth::generate_styles(&parsed.params);
    Ok(SyntheticCorpus {
        params: parsed.params,
        speakers: styles
            .into_iter()
            .filter(|s| parsed.speakers.contains(&s.speaker_id))
            .collect(),
        items,
        split: parsed.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::split_corpus;
    use crate::data::synth::generate_corpus;
    use crate::rng;

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::seeded(2);
        let values = Tensor::from_fn(12, NUM_CHANNELS, |_, _| rand::Rng::random::<f64>(&mut r));
        let seq = BlendshapeSequence::new(values, 30.0, "spk01").unwrap();
        let path = dir.path().join("seq.csv");
        write_sequence(&seq, &path).unwrap();
        let back = read_sequence(&path).unwrap();
        assert!(back.values().max_abs_diff(seq.values()) < 1e-6);
        assert_eq!(back.fps, 30.0);
        assert_eq!(back.speaker_id, "spk01");
    }

    #[test]
    fn duration_metadata() {
        let seq = BlendshapeSequence::new(Tensor::zeros(10, NUM_CHANNELS), 30.0, "s").unwrap();
        assert!((seq.duration_secs() - 0.3333).abs() < 1e-4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_sequence(&seq, &path).unwrap();
        let meta = parse_kv(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta["duration_secs"], "0.3333");
    }

    #[test]
    fn rejects_wrong_column_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let header: Vec<&str> = CHANNELS[..51].to_vec();
        let row = vec!["0.1"; 51].join(",");
        std::fs::write(&path, format!("timecode,{}\n0,{row}\n", header.join(","))).unwrap();
        let err = read_sequence(&path).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("51"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_numeric_cell_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut row = vec!["0.1"; 52];
        row[3] = "abc";
        std::fs::write(
            &path,
            format!("timecode,{}\n0,{}\n0.03,{}\n", CHANNELS.join(","), vec!["0"; 52].join(","), row.join(",")),
        )
        .unwrap();
        match read_sequence(&path).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn capitalized_headers_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.csv");
        let names: Vec<String> = CHANNELS
            .iter()
            .map(|c| {
                let mut s = c.to_string();
                s[..1].make_ascii_uppercase();
                s
            })
            .collect();
        std::fs::write(&path, format!("Timecode,{}\n0,{}\n", names.join(","), vec!["0.5"; 52].join(","))).unwrap();
        let seq = read_sequence(&path).unwrap();
        assert_eq!(seq.frames(), 1);
        assert_eq!(seq.fps, DEFAULT_FPS);
    }

    #[test]
    fn corpus_round_trip() {
        let mut c = generate_corpus(&CorpusParams {
            num_speakers: 2,
            sequences_per_speaker: 3,
            frames_per_sequence: 5,
            seed: 3,
            fps: 30.0,
        })
        .unwrap();
        c.split = Some(split_corpus(&c, 0.34, 0).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.split, c.split);
        assert_eq!(back.speakers, c.speakers);
        for (a, b) in back.items.iter().zip(&c.items) {
            assert_eq!(a.id, b.id);
            assert!(a.blendshapes.values().max_abs_diff(b.blendshapes.values()) < 1e-12);
            assert!(a.audio.features().max_abs_diff(b.audio.features()) < 1e-12);
        }
    }
}
