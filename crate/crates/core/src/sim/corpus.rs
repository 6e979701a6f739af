use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_episode, Episode, Pixels, Screen, ScreenConfig, Step, TaskTemplate, UiElement};
use crate::action::{classify_perception, parse_action, serialize_action, PathLabel};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub const CORPUS_VERSION: u32 = 1;

const CORPUS_FILE: &str = "corpus.jsonl";
const PIXELS_FILE: &str = "pixels.bin";
const MANIFEST_FILE: &str = "manifest.json";
const PIXEL_MAGIC: &[u8; 4] = b"SFPX";

/// Relative template weights. Counts are allotted by largest remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix(pub BTreeMap<TaskTemplate, f64>);

impl Default for TemplateMix {
    fn default() -> Self {
        Self::from_pairs(&[
            (TaskTemplate::TapTarget, 0.40),
            (TaskTemplate::ScrollThenTap, 0.25),
            (TaskTemplate::TypeText, 0.25),
            (TaskTemplate::Impossible, 0.10),
        ])
    }
}

impl TemplateMix {
    pub fn from_pairs(pairs: &[(TaskTemplate, f64)]) -> Self {
        Self(pairs.iter().copied().collect())
    }

    /// Parses `tap_target=0.5,scroll_then_tap=0.5`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("mix entry `{part}` is not name=weight")))?;
            let w: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("mix weight `{v}` is not a number")))?;
            m.insert(TaskTemplate::parse(k.trim())?, w);
        }
        let mix = Self(m);
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.0.values().sum();
        if self.0.values().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return Err(Error::Validation("template mix needs non-negative weights with a positive sum".into()));
        }
        Ok(())
    }

    pub fn proportions(&self) -> BTreeMap<TaskTemplate, f64> {
        let total: f64 = self.0.values().sum();
        self.0.iter().map(|(&t, &w)| (t, w / total)).collect()
    }

    pub fn counts(&self, n: usize) -> BTreeMap<TaskTemplate, usize> {
        let props = self.proportions();
        let mut counts: BTreeMap<TaskTemplate, usize> = BTreeMap::new();
        let mut rema: Vec<(f64, TaskTemplate)> = Vec::new();
        for (&t, &p) in &props {
            let exact = p * n as f64;
            counts.insert(t, exact.floor() as usize);
            rema.push((exact - exact.floor(), t));
        }
        let assigned: usize = counts.values().sum();
        // Ties go to the template listed first.
        rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (_, t) in rema.into_iter().take(n - assigned) {
            *counts.get_mut(&t).unwrap() += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub episodes: usize,
    pub mix: BTreeMap<TaskTemplate, f64>,
    pub counts: BTreeMap<TaskTemplate, usize>,
    pub steps: usize,
    pub labels: BTreeMap<String, usize>,
    pub screen: ScreenConfig,
    /// SHA-256 of the serialized record file, filled in on write.
    #[serde(default)]
    pub corpus_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenRecord {
    pub width: u32,
    pub height: u32,
    pub elements: Vec<UiElement>,
    pub pixels_ref: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub screen: ScreenRecord,
    pub action_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub seed: u64,
    pub template: TaskTemplate,
    pub goal: String,
    pub steps: Vec<StepRecord>,
}

/// Content-addressed pixel blobs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelStore {
    order: Vec<String>,
    blobs: BTreeMap<String, Pixels>,
}

impl PixelStore {
    pub fn insert(&mut self, px: &Pixels) -> String {
        let h = px.content_hash();
        if !self.blobs.contains_key(&h) {
            self.order.push(h.clone());
            self.blobs.insert(h.clone(), px.clone());
        }
        h
    }

    pub fn get(&self, hash: &str) -> Option<&Pixels> {
        self.blobs.get(hash)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `SFPX`, count, then per blob: 32-byte digest, width, height, bytes.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PIXEL_MAGIC)?;
        w.write_all(&(self.order.len() as u32).to_le_bytes())?;
        for h in &self.order {
            let px = &self.blobs[h];
            w.write_all(&hex::decode(h).expect("hex digest"))?;
            w.write_all(&px.width.to_le_bytes())?;
            w.write_all(&px.height.to_le_bytes())?;
            w.write_all(&px.data)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PIXEL_MAGIC {
            return Err(Error::Data("pixel store has a bad magic number".into()));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let n = u32::from_le_bytes(u);
        let mut store = PixelStore::default();
        for _ in 0..n {
            let mut digest = [0u8; 32];
            r.read_exact(&mut digest)?;
            r.read_exact(&mut u)?;
            let width = u32::from_le_bytes(u);
            r.read_exact(&mut u)?;
            let height = u32::from_le_bytes(u);
            let mut data = vec![0u8; (width * height * 3) as usize];
            r.read_exact(&mut data)?;
            let px = Pixels { width, height, data };
            let h = hex::encode(digest);
            if px.content_hash() != h {
                return Err(Error::Data(format!("pixel blob {h} fails its content hash")));
            }
            store.insert(&px);
        }
        Ok(store)
    }
}

fn episode_seed(seed: u64, index: usize) -> u64 {
    CounterRng::new(seed).split(index as u64 + 1).next_u64()
}

/// Generates `n` episodes. Episode `i` depends only on `(seed, i, mix, cfg)`.
pub fn generate_corpus(seed: u64, n: usize, mix: &TemplateMix, cfg: &ScreenConfig) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Validation("corpus size must be at least 1".into()));
    }
    mix.validate()?;
    cfg.validate()?;
    let counts = mix.counts(n);
    let mut templates: Vec<TaskTemplate> = counts.iter().flat_map(|(&t, &c)| std::iter::repeat(t).take(c)).collect();
    CounterRng::new(seed).split(0).shuffle(&mut templates);
    let episodes = templates
        .iter()
        .enumerate()
        .map(|(i, &t)| generate_episode(episode_seed(seed, i), t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        version: CORPUS_VERSION,
        seed,
        episodes: n,
        mix: mix.proportions(),
        counts,
        steps: episodes.iter().map(|e| e.steps.len()).sum(),
        labels: label_counts(&episodes),
        screen: cfg.clone(),
        corpus_sha256: String::new(),
    };
    Ok(Corpus { manifest, episodes })
}

pub fn label_counts(episodes: &[Episode]) -> BTreeMap<String, usize> {
    let mut m: BTreeMap<String, usize> = [PathLabel::Fast, PathLabel::Slow]
        .iter()
        .map(|l| (l.as_str().to_string(), 0))
        .collect();
    for s in episodes.iter().flat_map(|e| &e.steps) {
        *m.get_mut(classify_perception(&s.action).as_str()).unwrap() += 1;
    }
    m
}

fn to_record(ep: &Episode, pixels: &mut PixelStore) -> Result<CorpusRecord> {
    let steps = ep
        .steps
        .iter()
        .map(|s| {
            Ok(StepRecord {
                screen: ScreenRecord {
                    width: s.screen.width,
                    height: s.screen.height,
                    elements: s.screen.elements.clone(),
                    pixels_ref: pixels.insert(&s.screen.pixels),
                },
                action_text: serialize_action(&s.action)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorpusRecord {
        seed: ep.seed,
        template: ep.template,
        goal: ep.goal.clone(),
        steps,
    })
}

fn from_record(rec: CorpusRecord, pixels: &PixelStore) -> Result<Episode> {
    let steps = rec
        .steps
        .into_iter()
        .map(|s| {
            let px = pixels
                .get(&s.screen.pixels_ref)
                .ok_or_else(|| Error::Data(format!("missing pixel blob {}", s.screen.pixels_ref)))?;
            let screen = Screen::new(s.screen.width, s.screen.height, s.screen.elements);
            if &screen.pixels != px {
                return Err(Error::Data("stored pixels disagree with the element list".into()));
            }
            Ok(Step {
                screen,
                action: parse_action(&s.action_text)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        seed: rec.seed,
        template: rec.template,
        goal: rec.goal,
        steps,
    })
}

/// Serializes records and pixels to bytes; the record bytes determine the
/// corpus hash.
pub fn encode_corpus(corpus: &Corpus) -> Result<(Vec<u8>, Vec<u8>, CorpusManifest)> {
    let mut pixels = PixelStore::default();
    let mut lines = Vec::new();
    for ep in &corpus.episodes {
        serde_json::to_writer(&mut lines, &to_record(ep, &mut pixels)?)?;
        lines.push(b'\n');
    }
    let mut blob = Vec::new();
    pixels.write_to(&mut blob)?;
    let mut manifest = corpus.manifest.clone();
    manifest.corpus_sha256 = hex::encode(Sha256::digest(&lines));
    Ok((lines, blob, manifest))
}

/// Writes `corpus.jsonl`, `pixels.bin` and `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let (lines, blob, manifest) = encode_corpus(corpus)?;
    fs::write(dir.join(CORPUS_FILE), lines)?;
    fs::write(dir.join(PIXELS_FILE), blob)?;
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), m)?;
    Ok(manifest)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != CORPUS_VERSION {
        return Err(Error::Data(format!("corpus version {} unsupported", manifest.version)));
    }
    let pixels = PixelStore::read_from(BufReader::new(fs::File::open(dir.join(PIXELS_FILE))?))?;
    let raw = fs::read(dir.join(CORPUS_FILE))?;
    let digest = hex::encode(Sha256::digest(&raw));
    if !manifest.corpus_sha256.is_empty() && manifest.corpus_sha256 != digest {
        return Err(Error::Data("corpus file does not match the manifest hash".into()));
    }
    let mut episodes = Vec::new();
    for (index, line) in BufReader::new(raw.as_slice()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |e: Error| Error::Record {
            index,
            message: e.to_string(),
        };
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| wrap(e.into()))?;
        episodes.push(from_record(rec, &pixels).map_err(wrap)?);
    }
    Ok(Corpus { manifest, episodes })
}
