//! Corpus construction, context windows and the repetition / non-repetition test subsets.

pub mod synth;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{abc, parse_score, FrameSequence, Melody, ScoreFormat, FRAMES_PER_MEASURE};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Test-set share, from the 16000 / 2000 melody proportions.
pub const TEST_FRACTION: f64 = 2000.0 / 18000.0;
pub const SUBSET_FRACTION: f64 = 0.1;
pub const TRAIN_STRIDE: usize = 4;
pub const TEST_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub past: usize,
    pub missing: usize,
    pub future: usize,
}

impl WindowShape {
    pub const fn len(&self) -> usize {
        self.past + self.missing + self.future
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn missing_range(&self) -> std::ops::Range<usize> {
        self.past..self.past + self.missing
    }
}

impl Default for WindowShape {
    fn default() -> Self {
        Self {
            past: 6,
            missing: 4,
            future: 6,
        }
    }
}

/// A contiguous slice of a melody split into past, missing and future measures.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub source_id: String,
    pub start: usize,
    pub past: Vec<FrameSequence>,
    pub missing: Vec<FrameSequence>,
    pub future: Vec<FrameSequence>,
}

impl ContextWindow {
    pub fn shape(&self) -> WindowShape {
        WindowShape {
            past: self.past.len(),
            missing: self.missing.len(),
            future: self.future.len(),
        }
    }

    pub fn measures(&self) -> impl Iterator<Item = &FrameSequence> {
        self.past.iter().chain(&self.missing).chain(&self.future)
    }

    pub fn reference(&self) -> WindowRef {
        WindowRef {
            id: self.source_id.clone(),
            start: self.start,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub id: String,
    pub start: usize,
}

pub fn make_windows(melody: &Melody, shape: WindowShape, stride: usize) -> Vec<ContextWindow> {
    let total = shape.len();
    if total == 0 || stride == 0 || melody.len() < total {
        return Vec::new();
    }
    (0..=melody.len() - total)
        .step_by(stride)
        .map(|start| window_at(melody, shape, start).expect("in range"))
        .collect()
}

pub fn window_at(melody: &Melody, shape: WindowShape, start: usize) -> Result<ContextWindow> {
    let end = start + shape.len();
    if end > melody.len() {
        return Err(Error::Range(format!(
            "window {start}..{end} exceeds melody {} of {} measures",
            melody.id,
            melody.len()
        )));
    }
    let m = &melody.measures[start..end];
    Ok(ContextWindow {
        source_id: melody.id.clone(),
        start,
        past: m[..shape.past].to_vec(),
        missing: m[shape.past..shape.past + shape.missing].to_vec(),
        future: m[shape.past + shape.missing..].to_vec(),
    })
}

/// Fraction of aligned frames on which the past and future blocks agree.
pub fn context_similarity(w: &ContextWindow) -> Result<f64> {
    if w.past.len() != w.future.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} past vs {} future measures",
            w.past.len(),
            w.future.len()
        )));
    }
    if w.past.is_empty() {
        return Err(Error::ShapeMismatch("empty context".into()));
    }
    let equal: usize = w
        .past
        .iter()
        .zip(&w.future)
        .map(|(p, f)| p.frames().iter().zip(f.frames()).filter(|(a, b)| a == b).count())
        .sum();
    Ok(equal as f64 / (w.past.len() * FRAMES_PER_MEASURE) as f64)
}

/// Indices of the most (repetition) and least (non-repetition) self-similar deciles.
///
/// Windows are ranked by similarity, descending, with ties in `(source_id, start)`
/// order; the first ⌊N/10⌋ form the repetition subset and the last ⌊N/10⌋ the other.
pub fn make_subsets(windows: &[ContextWindow]) -> Result<(Vec<usize>, Vec<usize>)> {
    if windows.len() < 10 {
        return Err(Error::TooFewWindows {
            needed: 10,
            got: windows.len(),
        });
    }
    let sims = windows.iter().map(context_similarity).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| windows[a].source_id.cmp(&windows[b].source_id))
            .then(windows[a].start.cmp(&windows[b].start))
    });
    let k = (windows.len() as f64 * SUBSET_FRACTION).floor() as usize;
    let repetition = order[..k].to_vec();
    let non_repetition = order[order.len() - k..].to_vec();
    Ok((repetition, non_repetition))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub window: WindowShape,
    pub test_stride: usize,
    #[serde(rename = "test_R")]
    pub test_r: Vec<WindowRef>,
    #[serde(rename = "test_NR")]
    pub test_nr: Vec<WindowRef>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Melody-level shuffle split with the given seed.
pub fn split_ids(ids: &[String], seed: u64) -> (Vec<String>, Vec<String>) {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.shuffle(&mut seeded_rng(seed));
    let n_test = (sorted.len() as f64 * TEST_FRACTION).round() as usize;
    let test = sorted.split_off(sorted.len() - n_test);
    (sorted, test)
}

/// Holds out a seeded fraction of ids (validation), returning `(kept, held_out)`.
pub fn hold_out(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.shuffle(&mut seeded_rng(seed ^ 0x5eed_0f_7a11));
    let n = ((sorted.len() as f64 * fraction).round() as usize).min(sorted.len().saturating_sub(1));
    let held = sorted.split_off(sorted.len() - n);
    (sorted, held)
}

/// Windows of the test melodies at the manifest stride, in id order.
pub fn test_windows(corpus: &Corpus, manifest: &SplitManifest) -> Vec<ContextWindow> {
    let mut ids = manifest.test.clone();
    ids.sort();
    ids.iter()
        .filter_map(|id| corpus.get(id))
        .flat_map(|m| make_windows(m, manifest.window, manifest.test_stride))
        .collect()
}

/// Resolves the manifest's subset references against the corpus.
pub fn subset_windows(corpus: &Corpus, manifest: &SplitManifest, refs: &[WindowRef]) -> Result<Vec<ContextWindow>> {
    refs.iter()
        .map(|r| {
            let m = corpus
                .get(&r.id)
                .ok_or_else(|| Error::Parse(format!("manifest references unknown melody {}", r.id)))?;
            window_at(m, manifest.window, r.start)
        })
        .collect()
}

/// Melodies keyed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    melodies: BTreeMap<String, Melody>,
}

impl Corpus {
    pub fn new(melodies: impl IntoIterator<Item = Melody>) -> Self {
        Self {
            melodies: melodies.into_iter().map(|m| (m.id.clone(), m)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.melodies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.melodies.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Melody> {
        self.melodies.get(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.melodies.keys().cloned().collect()
    }

    pub fn melodies(&self) -> impl Iterator<Item = &Melody> {
        self.melodies.values()
    }

    pub fn select<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a Melody> + 'a {
        ids.iter().filter_map(|id| self.melodies.get(id))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for m in self.melodies.values() {
            serde_json::to_writer(&mut out, m)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut melodies = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            melodies.push(parse_record(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?);
        }
        Ok(Self::new(melodies))
    }
}

/// Decodes one corpus JSONL record.
pub fn parse_record(line: &str) -> Result<Melody> {
    let m: Melody = serde_json::from_str(line)?;
    if m.measures.is_empty() {
        return Err(Error::Parse(format!("melody {} has no measures", m.id)));
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BuildReport {
    pub files: usize,
    pub accepted: usize,
    pub rejected: Vec<(String, String)>,
}

/// Parses every `.abc`/`.mid` file under `raw_dir`, splits the corpus and computes the test subsets.
pub fn build_corpus(raw_dir: &Path, seed: u64) -> Result<(Corpus, SplitManifest, BuildReport)> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(raw_dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .and_then(ScoreFormat::from_extension)
                .is_some()
        })
        .collect();
    files.sort();

    let mut report = BuildReport {
        files: files.len(),
        ..Default::default()
    };
    let mut melodies = Vec::new();
    for path in &files {
        let rel = path.strip_prefix(raw_dir).unwrap_or(path).to_string_lossy().replace('\\', "/");
        let format = path
            .extension()
            .and_then(|e| e.to_str())
            .and_then(ScoreFormat::from_extension)
            .expect("filtered above");
        let bytes = fs::read(path)?;
        let parsed: Vec<(String, Result<Melody>)> = match format {
            ScoreFormat::Abc => match std::str::from_utf8(&bytes) {
                Ok(text) => abc::parse_tunes(text)
                    .into_iter()
                    .map(|(x, r)| (format!("{rel}#{x}"), r))
                    .collect(),
                Err(e) => vec![(rel.clone(), Err(Error::Parse(e.to_string())))],
            },
            ScoreFormat::Midi => vec![(rel.clone(), parse_score(&bytes, format))],
        };
        for (id, result) in parsed {
            match result {
                Ok(mut m) => {
                    m.id = id;
                    melodies.push(m);
                }
                Err(e) => report.rejected.push((id, e.to_string())),
            }
        }
    }
    // ids must be unique: a repeated X: number within one file gets a suffix
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for m in &mut melodies {
        let n = seen.entry(m.id.clone()).or_insert(0);
        if *n > 0 {
            m.id = format!("{}~{n}", m.id);
        }
        *n += 1;
    }
    report.accepted = melodies.len();
    if melodies.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let corpus = Corpus::new(melodies);
    let manifest = make_manifest(&corpus, seed, WindowShape::default(), TEST_STRIDE);
    Ok((corpus, manifest, report))
}

pub fn make_manifest(corpus: &Corpus, seed: u64, window: WindowShape, test_stride: usize) -> SplitManifest {
    let (train, test) = split_ids(&corpus.ids(), seed);
    let mut manifest = SplitManifest {
        seed,
        train,
        test,
        window,
        test_stride,
        test_r: Vec::new(),
        test_nr: Vec::new(),
    };
    let windows = test_windows(corpus, &manifest);
    if let Ok((r, nr)) = make_subsets(&windows) {
        manifest.test_r = r.iter().map(|&i| windows[i].reference()).collect();
        manifest.test_nr = nr.iter().map(|&i| windows[i].reference()).collect();
    } else {
        log::warn!("only {} test windows: repetition subsets left empty", windows.len());
    }
    manifest
}

pub fn load_corpus_dir(dir: &Path) -> Result<(Corpus, SplitManifest)> {
    let corpus = Corpus::read_jsonl(&dir.join(CORPUS_FILE))?;
    let manifest = SplitManifest::load(&dir.join(MANIFEST_FILE))?;
    Ok((corpus, manifest))
}

pub fn save_corpus_dir(dir: &Path, corpus: &Corpus, manifest: &SplitManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    corpus.write_jsonl(&dir.join(CORPUS_FILE))?;
    manifest.save(&dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_measure, MelodyMeta, REST};

    fn melody(id: &str, n: usize) -> Melody {
        let measures = (0..n)
            .map(|i| encode_measure(&[(0, 24, 40 + i as u32)]).unwrap())
            .collect();
        Melody::new(id, MelodyMeta::default(), measures).unwrap()
    }

    #[test]
    fn window_counts() {
        let shape = WindowShape::default();
        assert_eq!(make_windows(&melody("a", 16), shape, 1).len(), 1);
        assert!(make_windows(&melody("a", 15), shape, 1).is_empty());
        let w = make_windows(&melody("a", 20), shape, 4);
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 4]);
        assert!(make_windows(&melody("a", 20), shape, 0).is_empty());
    }

    #[test]
    fn windows_are_verbatim_slices() {
        let m = melody("a", 23);
        for w in make_windows(&m, WindowShape::default(), 3) {
            let got: Vec<_> = w.measures().copied().collect();
            assert_eq!(got, m.measures[w.start..w.start + 16]);
        }
    }

    fn window(past: Vec<FrameSequence>, future: Vec<FrameSequence>, id: &str) -> ContextWindow {
        ContextWindow {
            source_id: id.into(),
            start: 0,
            past,
            missing: vec![FrameSequence::rest(); 4],
            future,
        }
    }

    #[test]
    fn similarity_examples() {
        let a = encode_measure(&[(0, 24, 60)]).unwrap();
        let onsets = FrameSequence::new([60; 24]).unwrap();
        assert_eq!(context_similarity(&window(vec![a; 6], vec![a; 6], "x")).unwrap(), 1.0);
        assert_eq!(
            context_similarity(&window(vec![FrameSequence::rest(); 6], vec![onsets; 6], "x")).unwrap(),
            0.0
        );
        let mut half = [REST; 24];
        half[..12].fill(60);
        let half = FrameSequence::new(half).unwrap();
        assert_eq!(context_similarity(&window(vec![onsets; 6], vec![half; 6], "x")).unwrap(), 0.5);
        assert!(matches!(
            context_similarity(&window(vec![a; 6], vec![a; 5], "x")),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn subsets_take_extreme_deciles() {
        let mut windows = Vec::new();
        for i in 0..10 {
            let mut f = [REST; 24];
            f[..i * 2].fill(60);
            let future = FrameSequence::new(f).unwrap();
            windows.push(window(vec![FrameSequence::new([60; 24]).unwrap(); 6], vec![future; 6], &format!("m{i}")));
        }
        let (r, nr) = make_subsets(&windows).unwrap();
        assert_eq!(r, vec![9]);
        assert_eq!(nr, vec![0]);

        let same: Vec<_> = (0..10).map(|i| window(vec![FrameSequence::rest(); 6], vec![FrameSequence::rest(); 6], &format!("m{i}"))).collect();
        let (r, nr) = make_subsets(&same).unwrap();
        assert_eq!((r, nr), (vec![0], vec![9]));
        assert!(matches!(make_subsets(&same[..9]), Err(Error::TooFewWindows { .. })));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ids: Vec<String> = (0..18).map(|i| format!("tune{i:02}")).collect();
        let (train, test) = split_ids(&ids, 7);
        assert_eq!((train.len(), test.len()), (16, 2));
        assert!(test.iter().all(|t| !train.contains(t)));
        assert_eq!(split_ids(&ids, 7), (train, test));
    }

    #[test]
    fn hold_out_keeps_at_least_one() {
        let ids: Vec<String> = (0..20).map(|i| i.to_string()).collect();
        let (kept, held) = hold_out(&ids, 0.1, 3);
        assert_eq!((kept.len(), held.len()), (18, 2));
        let (kept, held) = hold_out(&ids[..1], 0.5, 3);
        assert_eq!((kept.len(), held.len()), (1, 0));
    }

    #[test]
    fn record_round_trip() {
        let m = melody("x", 3);
        let line = serde_json::to_string(&m).unwrap();
        assert!(line.starts_with("{\"id\":\"x\",\"meta\":"));
        assert_eq!(parse_record(&line).unwrap(), m);
        assert!(parse_record(r#"{"id":"y","meta":{"tempo":120},"measures":[]}"#).is_err());
        assert!(parse_record(r#"{"id":"y","meta":{"tempo":120},"measures":[[128,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129,129]]}"#).is_err());
    }
}
