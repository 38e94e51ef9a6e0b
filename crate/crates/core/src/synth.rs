//! Synthetic world: word lexicon, order-2 Markov text, character templates,
//! frame rendering, the corruption model and dataset manifests.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gasr_tensor::{Checkpoint, CheckpointEntry, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{serialize_triple_line, serialize_plain_line, GEC_INSTRUCTION};
use crate::vocab::Vocabulary;

/// Characters that occur in synthetic transcripts.
pub const DATA_ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub lexicon_size: usize,
    /// Inclusive word length range in characters.
    pub word_len: [usize; 2],
    /// Inclusive sentence length range in words.
    pub sentence_len: [usize; 2],
    pub markov_order: usize,
    /// Successor words per two-word context.
    pub successors: usize,
    /// Probability mass spread uniformly over the whole lexicon.
    pub smoothing: f64,
    /// Fraction of the lexicon built as one-letter variants of other words.
    pub minimal_pairs: f64,
    pub feat_dim: usize,
    /// Inclusive frames-per-character range.
    pub frames_per_char: [usize; 2],
    pub noise: f64,
    /// Spread of the template cluster centres.
    pub template_scale: f64,
    /// Distance scale between the two letters of a confusable pair.
    pub confusion: f64,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// LM pretraining sequences (correction triples plus plain sentences).
    pub lm_sequences: usize,
    pub lm_plain_fraction: f64,
    pub lm_heldout: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            lexicon_size: 100,
            word_len: [2, 6],
            sentence_len: [3, 8],
            markov_order: 2,
            successors: 4,
            smoothing: 0.05,
            minimal_pairs: 0.3,
            feat_dim: 16,
            frames_per_char: [4, 8],
            noise: 0.5,
            template_scale: 1.0,
            confusion: 0.2,
            p_sub: 0.1,
            p_del: 0.02,
            p_ins: 0.02,
            train: 4000,
            dev: 300,
            test: 300,
            lm_sequences: 20000,
            lm_plain_fraction: 0.2,
            lm_heldout: 300,
        }
    }
}

/// Per-character corruption probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionRates {
    pub sub: f64,
    pub del: f64,
    pub ins: f64,
}

impl CorruptionRates {
    pub const NONE: CorruptionRates = CorruptionRates {
        sub: 0.0,
        del: 0.0,
        ins: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..1.0).contains(&p);
        if !(ok(self.sub) && ok(self.del) && ok(self.ins)) || self.sub + self.del + self.ins >= 1.0 {
            return Err(Error::Config(format!("corruption rates {self:?} must be in [0,1) with sum < 1")));
        }
        Ok(())
    }
}

impl SynthConfig {
    pub fn rates(&self) -> CorruptionRates {
        CorruptionRates {
            sub: self.p_sub,
            del: self.p_del,
            ins: self.p_ins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.rates().validate()?;
        if self.feat_dim < 2 {
            return bad(format!("feat_dim {} < 2", self.feat_dim));
        }
        if self.frames_per_char[0] < 4 || self.frames_per_char[0] > self.frames_per_char[1] {
            return bad(format!("frames_per_char {:?} needs 4 <= min <= max", self.frames_per_char));
        }
        if self.markov_order != 2 {
            return bad(format!("markov_order {} unsupported (only 2)", self.markov_order));
        }
        let [wl, wh] = self.word_len;
        if wl < 1 || wl > wh {
            return bad(format!("word_len {:?}", self.word_len));
        }
        let [sl, sh] = self.sentence_len;
        if sl < 2 || sl > sh {
            return bad(format!("sentence_len {:?} needs 2 <= min <= max", self.sentence_len));
        }
        if self.lexicon_size < 2 || self.successors == 0 || self.successors > self.lexicon_size {
            return bad(format!("lexicon {} / successors {}", self.lexicon_size, self.successors));
        }
        if !(0.0..=1.0).contains(&self.smoothing) || !(0.0..1.0).contains(&self.minimal_pairs) {
            return bad("smoothing and minimal_pairs must be probabilities".into());
        }
        if !(0.0..=1.0).contains(&self.lm_plain_fraction) {
            return bad("lm_plain_fraction must be in [0,1]".into());
        }
        if self.noise < 0.0 || self.template_scale <= 0.0 || self.confusion < 0.0 {
            return bad("noise, template_scale and confusion must be non-negative".into());
        }
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return bad("split sizes must be positive".into());
        }
        Ok(())
    }
}

/// Mix a base seed with a stream label (splitmix64 over an FNV-1a hash).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Per-character mean feature vectors.
///
/// Letters come in randomly chosen pairs sharing a cluster centre, so each
/// letter's nearest other template is usually its partner. Space has its own
/// centre.
#[derive(Clone, Debug)]
pub struct CharTemplateBank {
    chars: Vec<char>,
    means: Vec<Vec<f32>>,
    nearest: Vec<usize>,
}

impl CharTemplateBank {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, "templates");
        let f = cfg.feat_dim;
        let centre = Normal::new(0.0, cfg.template_scale).expect("positive scale");
        let offset = Normal::new(0.0, cfg.confusion.max(1e-6)).expect("positive scale");
        let chars: Vec<char> = DATA_ALPHABET.chars().collect();
        let mut letters: Vec<usize> = (1..chars.len()).collect();
        letters.shuffle(&mut rng);
        let mut means = vec![Vec::new(); chars.len()];
        let draw = |rng: &mut ChaCha8Rng, d: &Normal<f64>| -> Vec<f64> { (0..f).map(|_| d.sample(rng)).collect() };
        means[0] = draw(&mut rng, &centre).iter().map(|&v| v as f32).collect();
        for pair in letters.chunks(2) {
            let c = draw(&mut rng, &centre);
            for &i in pair {
                let o = draw(&mut rng, &offset);
                means[i] = c.iter().zip(&o).map(|(a, b)| (a + b) as f32).collect();
            }
        }
        let nearest = (0..chars.len())
            .map(|i| {
                (0..chars.len())
                    .filter(|&j| j != i)
                    .min_by(|&a, &b| sq_dist(&means[i], &means[a]).total_cmp(&sq_dist(&means[i], &means[b])))
                    .expect("at least two characters")
            })
            .collect();
        CharTemplateBank { chars, means, nearest }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    fn index(&self, c: char) -> Result<usize> {
        self.chars.iter().position(|&x| x == c).ok_or(Error::Unencodable(c))
    }

    pub fn template(&self, c: char) -> Result<&[f32]> {
        Ok(&self.means[self.index(c)?])
    }

    /// The acoustically closest other character.
    pub fn nearest(&self, c: char) -> Result<char> {
        Ok(self.chars[self.nearest[self.index(c)?]])
    }

    /// Nearest-template classification of a single frame.
    pub fn classify(&self, frame: &[f32]) -> char {
        let best = (0..self.chars.len())
            .min_by(|&a, &b| sq_dist(frame, &self.means[a]).total_cmp(&sq_dist(frame, &self.means[b])))
            .expect("non-empty bank");
        self.chars[best]
    }

    /// Monte Carlo accuracy of [`classify`](Self::classify) on single noisy frames.
    pub fn frame_accuracy(&self, noise: f64, samples: usize, rng: &mut impl Rng) -> f64 {
        let normal = Normal::new(0.0, noise.max(0.0)).expect("valid noise");
        let mut hits = 0;
        for s in 0..samples {
            let i = s % self.chars.len();
            let frame: Vec<f32> = self.means[i].iter().map(|&m| m + normal.sample(rng) as f32).collect();
            if self.classify(&frame) == self.chars[i] {
                hits += 1;
            }
        }
        hits as f64 / samples as f64
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

fn has_double_letter(w: &str) -> bool {
    w.as_bytes().windows(2).any(|p| p[0] == p[1])
}

fn build_lexicon(cfg: &SynthConfig, bank: &CharTemplateBank) -> Vec<String> {
    let mut rng = stream_rng(cfg.seed, "lexicon");
    let letters: Vec<char> = DATA_ALPHABET.chars().skip(1).collect();
    let variants = (cfg.lexicon_size as f64 * cfg.minimal_pairs).round() as usize;
    let mut words: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    let fresh = |rng: &mut ChaCha8Rng, words: &mut Vec<String>, seen: &mut HashSet<String>| {
        let len = rng.gen_range(cfg.word_len[0]..=cfg.word_len[1]);
        let w: String = (0..len).map(|_| *letters.choose(rng).expect("letters")).collect();
        if !has_double_letter(&w) && seen.insert(w.clone()) {
            words.push(w);
        }
    };
    while words.len() < cfg.lexicon_size - variants {
        fresh(&mut rng, &mut words, &mut seen);
    }
    // One-letter variants that swap a letter for its template neighbour.
    let mut attempts = 0;
    while words.len() < cfg.lexicon_size && attempts < 100_000 {
        attempts += 1;
        let base = &words[rng.gen_range(0..words.len())];
        let mut chars: Vec<char> = base.chars().collect();
        let pos = rng.gen_range(0..chars.len());
        chars[pos] = bank.nearest(chars[pos]).expect("letters have templates");
        let w: String = chars.into_iter().collect();
        if !w.contains(' ') && !has_double_letter(&w) && seen.insert(w.clone()) {
            words.push(w);
        }
    }
    while words.len() < cfg.lexicon_size {
        fresh(&mut rng, &mut words, &mut seen);
    }
    words
}

/// Order-2 Markov chain over lexicon words.
#[derive(Clone, Debug)]
pub struct MarkovModel {
    words: Vec<String>,
    /// Sparse successor weights per context `a * L + b`, summing to one.
    successors: Vec<Vec<(usize, f64)>>,
    smoothing: f64,
    /// Stationary distribution over word pairs.
    stationary: Vec<f64>,
    sentence_len: [usize; 2],
}

impl MarkovModel {
    pub fn new(cfg: &SynthConfig, words: Vec<String>) -> Self {
        let mut rng = stream_rng(cfg.seed, "markov");
        let l = words.len();
        let successors = (0..l * l)
            .map(|_| {
                let picks = rand::seq::index::sample(&mut rng, l, cfg.successors);
                let raw: Vec<f64> = (0..cfg.successors).map(|_| rng.gen_range(0.1..1.0)).collect();
                let total: f64 = raw.iter().sum();
                picks.iter().zip(raw).map(|(w, r)| (w, r / total)).collect()
            })
            .collect();
        let mut m = MarkovModel {
            words,
            successors,
            smoothing: cfg.smoothing,
            stationary: Vec::new(),
            sentence_len: cfg.sentence_len,
        };
        m.stationary = m.power_iteration(1e-13, 10_000);
        m
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `P(next | a, b)` as a dense vector.
    pub fn next_distribution(&self, a: usize, b: usize) -> Vec<f64> {
        let l = self.words.len();
        let mut p = vec![self.smoothing / l as f64; l];
        for &(w, q) in &self.successors[a * l + b] {
            p[w] += (1.0 - self.smoothing) * q;
        }
        p
    }

    fn step(&self, pi: &[f64]) -> Vec<f64> {
        let l = self.words.len();
        let mut next = vec![0.0; l * l];
        let mut spread = vec![0.0; l];
        for a in 0..l {
            for b in 0..l {
                let m = pi[a * l + b];
                if m == 0.0 {
                    continue;
                }
                spread[b] += m * self.smoothing / l as f64;
                for &(c, q) in &self.successors[a * l + b] {
                    next[b * l + c] += m * (1.0 - self.smoothing) * q;
                }
            }
        }
        for b in 0..l {
            for c in 0..l {
                next[b * l + c] += spread[b];
            }
        }
        next
    }

    fn power_iteration(&self, tol: f64, max_iter: usize) -> Vec<f64> {
        let l = self.words.len();
        let mut pi = vec![1.0 / (l * l) as f64; l * l];
        for _ in 0..max_iter {
            let next = self.step(&pi);
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < tol {
                break;
            }
        }
        pi
    }

    /// Stationary word unigram distribution.
    pub fn stationary_unigram(&self) -> Vec<f64> {
        let l = self.words.len();
        (0..l).map(|b| (0..l).map(|a| self.stationary[a * l + b]).sum()).collect()
    }

    fn sample_index(rng: &mut impl Rng, probs: impl Iterator<Item = f64>) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.enumerate() {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// Word indices of one sentence; the first pair is drawn from the
    /// stationary pair distribution.
    pub fn sample_indices(&self, rng: &mut impl Rng) -> Vec<usize> {
        let l = self.words.len();
        let n = rng.gen_range(self.sentence_len[0]..=self.sentence_len[1]);
        let pair = Self::sample_index(rng, self.stationary.iter().copied());
        let mut out = vec![pair / l, pair % l];
        while out.len() < n {
            let (a, b) = (out[out.len() - 2], out[out.len() - 1]);
            let next = if rng.gen::<f64>() < self.smoothing {
                rng.gen_range(0..l)
            } else {
                let succ = &self.successors[a * l + b];
                succ[Self::sample_index(rng, succ.iter().map(|s| s.1))].0
            };
            out.push(next);
        }
        out
    }

    pub fn sample_sentence(&self, rng: &mut impl Rng) -> String {
        let idx = self.sample_indices(rng);
        idx.iter().map(|&i| self.words[i].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Everything fixed by `(seed, config)` before any sampling of splits.
#[derive(Clone, Debug)]
pub struct World {
    pub bank: CharTemplateBank,
    pub markov: MarkovModel,
}

impl World {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = CharTemplateBank::new(cfg);
        let words = build_lexicon(cfg, &bank);
        let markov = MarkovModel::new(cfg, words);
        Ok(World { bank, markov })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    /// Language-model pretraining sentences: train distribution, never a
    /// dev/test sentence.
    pub lm: Vec<String>,
    pub lm_heldout: Vec<String>,
}

fn draw_unique(
    markov: &MarkovModel,
    rng: &mut impl Rng,
    n: usize,
    exclude: &HashSet<String>,
    unique: bool,
) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts < 1000 * n + 100_000, "cannot draw {n} distinct sentences");
        let s = markov.sample_sentence(rng);
        if exclude.contains(&s) || (unique && !seen.insert(s.clone())) {
            continue;
        }
        out.push(s);
    }
    out
}

pub fn generate_corpus(cfg: &SynthConfig, world: &World) -> Corpus {
    let m = &world.markov;
    let mut none = HashSet::new();
    let dev = draw_unique(m, &mut stream_rng(cfg.seed, "dev"), cfg.dev, &none, true);
    none.extend(dev.iter().cloned());
    let test = draw_unique(m, &mut stream_rng(cfg.seed, "test"), cfg.test, &none, true);
    none.extend(test.iter().cloned());
    let train = draw_unique(m, &mut stream_rng(cfg.seed, "train"), cfg.train, &none, false);
    let lm_heldout = draw_unique(m, &mut stream_rng(cfg.seed, "lm-heldout"), cfg.lm_heldout, &none, true);
    none.extend(lm_heldout.iter().cloned());
    let lm = draw_unique(m, &mut stream_rng(cfg.seed, "lm"), cfg.lm_sequences, &none, false);
    Corpus {
        train,
        dev,
        test,
        lm,
        lm_heldout,
    }
}

/// Each character emits `d` frames of its template plus Gaussian noise.
pub fn render_features(text: &str, cfg: &SynthConfig, bank: &CharTemplateBank, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if text.is_empty() {
        return Err(Error::invalid("cannot render empty text"));
    }
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::new();
    for c in text.chars() {
        let t = bank.template(c)?;
        let d = rng.gen_range(cfg.frames_per_char[0]..=cfg.frames_per_char[1]);
        for _ in 0..d {
            data.extend(t.iter().map(|&m| m + normal.sample(rng) as f32));
        }
    }
    let frames = data.len() / cfg.feat_dim;
    Ok(Tensor::new(vec![frames, cfg.feat_dim], data)?)
}

/// Per character: substitute with the template-nearest other character, or
/// delete, or insert a random data character after it.
pub fn corrupt(text: &str, rates: CorruptionRates, bank: &CharTemplateBank, rng: &mut impl Rng) -> Result<String> {
    rates.validate()?;
    let mut out = String::with_capacity(text.len() + 4);
    for c in text.chars() {
        let u: f64 = rng.gen();
        if u < rates.sub {
            out.push(bank.nearest(c)?);
        } else if u < rates.sub + rates.del {
            // dropped
        } else {
            out.push(c);
        }
        if rng.gen::<f64>() < rates.ins {
            out.push(*bank.chars().choose(rng).expect("non-empty bank"));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub transcript: String,
}

pub fn write_features(path: &Path, id: &str, features: &Tensor<f32>) -> Result<()> {
    let ckpt = Checkpoint {
        meta: [("id".to_string(), id.to_string())].into_iter().collect(),
        entries: vec![CheckpointEntry {
            name: "features".into(),
            frozen: true,
            value: features.clone(),
        }],
    };
    ckpt.save(path).map_err(|e| match e {
        gasr_tensor::TensorError::Io(io) => Error::io(path, io),
        other => other.into(),
    })
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            stage: "synth-data".into(),
        });
    }
    let ckpt = Checkpoint::load(path)?;
    ckpt.entry("features")
        .map(|e| e.value.clone())
        .ok_or_else(|| Error::Parse(format!("{}: no features entry", path.display())))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        writeln!(s, "{}\t{}\t{}", e.id, e.features.display(), e.transcript).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative feature paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.display().to_string(),
                stage: "synth-data".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let mut parts = line.splitn(3, '\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(feat), Some(tr)) => {
                    let p = PathBuf::from(feat);
                    Ok(ManifestEntry {
                        id: id.to_string(),
                        features: if p.is_absolute() { p } else { base.join(p) },
                        transcript: tr.to_string(),
                    })
                }
                _ => Err(Error::Parse(format!("{}:{}: expected 3 tab-separated fields", path.display(), i + 1))),
            }
        })
        .collect()
}

/// Summary of one `synthesize` run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config: SynthConfig,
    pub lexicon: Vec<String>,
    pub frame_accuracy: f64,
    pub splits: Vec<(String, usize)>,
    pub lm_train_lines: usize,
    pub lm_heldout_lines: usize,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

pub fn lm_corpus_path(dir: &Path, heldout: bool) -> PathBuf {
    dir.join(if heldout { "lm_heldout.txt" } else { "lm_train.txt" })
}

/// Builds the manifests, feature files and LM corpus files under `dir`.
pub fn synthesize(cfg: &SynthConfig, dir: &Path) -> Result<SynthSummary> {
    let world = World::new(cfg)?;
    let corpus = generate_corpus(cfg, &world);
    let vocab = Vocabulary::default();
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut splits = Vec::new();
    for (split, sentences) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.test]) {
        let mut entries = Vec::with_capacity(sentences.len());
        for (i, text) in sentences.iter().enumerate() {
            let id = format!("{split}-{i:05}");
            let mut rng = stream_rng(cfg.seed, &format!("render:{id}"));
            let feats = render_features(text, cfg, &world.bank, &mut rng)?;
            let tokens = vocab.encode(text)?;
            if feats.rows() / 4 < Vocabulary::min_ctc_frames(&tokens) {
                return Err(Error::Invariant(format!("{id} is not CTC-feasible")));
            }
            let rel = PathBuf::from("feats").join(format!("{id}.feat"));
            write_features(&dir.join(&rel), &id, &feats)?;
            entries.push(ManifestEntry {
                id,
                features: rel,
                transcript: text.clone(),
            });
        }
        write_manifest(&manifest_path(dir, split), &entries)?;
        splits.push((split.to_string(), entries.len()));
    }

    let rates = cfg.rates();
    let mut lines = String::new();
    let mut rng = stream_rng(cfg.seed, "lm-corrupt");
    let plain = (corpus.lm.len() as f64 * cfg.lm_plain_fraction).round() as usize;
    for (i, clean) in corpus.lm.iter().enumerate() {
        // Plain sentences are interleaved evenly through the file.
        let is_plain = plain > 0 && (i * plain) / corpus.lm.len() != ((i + 1) * plain) / corpus.lm.len();
        if is_plain {
            lines.push_str(&serialize_plain_line(clean));
        } else {
            let noisy = corrupt(clean, rates, &world.bank, &mut rng)?;
            lines.push_str(&serialize_triple_line(GEC_INSTRUCTION, &noisy, clean));
        }
        lines.push('\n');
    }
    let path = lm_corpus_path(dir, false);
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    let mut held = String::new();
    let mut rng = stream_rng(cfg.seed, "lm-heldout-corrupt");
    for clean in &corpus.lm_heldout {
        let noisy = corrupt(clean, rates, &world.bank, &mut rng)?;
        held.push_str(&serialize_triple_line(GEC_INSTRUCTION, &noisy, clean));
        held.push('\n');
    }
    let path = lm_corpus_path(dir, true);
    fs::write(&path, held).map_err(|e| Error::io(&path, e))?;

    let summary = SynthSummary {
        config: cfg.clone(),
        lexicon: world.markov.words().to_vec(),
        frame_accuracy: world.bank.frame_accuracy(cfg.noise, 20_000, &mut stream_rng(cfg.seed, "frame-accuracy")),
        splits,
        lm_train_lines: corpus.lm.len(),
        lm_heldout_lines: corpus.lm_heldout.len(),
    };
    let path = dir.join("synth.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
