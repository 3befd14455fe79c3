use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

use super::SyntheticCorpus;

/// Train/test sequence ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Speaker-stratified split: every speaker contributes
/// `round(n·test_fraction)` (at least 1, at most n−1) test sequences.
pub fn split_corpus(corpus: &SyntheticCorpus, test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for item in &corpus.items {
        by_speaker.entry(&item.speaker_id).or_default().push(&item.id);
    }
    let mut manifest = SplitManifest::default();
    for (speaker, ids) in by_speaker {
        if ids.len() < 2 {
            return Err(Error::Split(format!(
                "speaker `{speaker}` has {} sequence(s); at least 2 are needed",
                ids.len()
            )));
        }
        let n = ids.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        let mut shuffled = ids;
        shuffled.shuffle(&mut rng::rng_from(seed, &format!("split/{speaker}")));
        let (test, train) = shuffled.split_at(n_test);
        let mut test: Vec<String> = test.iter().map(|s| s.to_string()).collect();
        let mut train: Vec<String> = train.iter().map(|s| s.to_string()).collect();
        test.sort();
        train.sort();
        manifest.test.extend(test);
        manifest.train.extend(train);
    }
    Ok(manifest)
}
