//! Synthetic moving-shape videos, their captions and QA pairs, the closed
//! template vocabulary, and batch loading.
//!
//! Every video shows one coloured shape crossing a dark 16×16 frame along a
//! straight path centred on its midpoint, so playing a video backwards yields
//! a valid video of the opposite direction. Any single frame is therefore
//! consistent with two directions, and only frame order tells them apart.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use diffcore::io::{read_tensor, write_tensor};
use diffcore::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{sample_frames, FrameMode};
use crate::text::TokenSeq;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const EOS: usize = 4;
pub const UNK: usize = 5;
pub const NUM_SPECIALS: usize = 6;
/// Total vocabulary, specials and reserved slots included.
pub const VOCAB_SIZE: usize = 64;

const SPECIALS: [&str; NUM_SPECIALS] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[EOS]", "[UNK]"];
const GLUE_WORDS: [&str; 10] = [
    "a", "moving", "what", "color", "is", "the", "shape", "object", "which", "way",
];

pub const FRAME_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const RAW_FRAMES: usize = 8;
const SHAPE_RADIUS: f64 = 2.0;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(ShapeKind { Square => "square", Circle => "circle", Triangle => "triangle" });
word_enum!(Direction { Left => "left", Right => "right", Up => "up", Down => "down" });
word_enum!(Speed { Slow => "slow", Fast => "fast" });
word_enum!(QaKind { Color => "color", Shape => "shape", Direction => "direction" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Direction {
    /// Unit step in image coordinates (y grows downwards).
    pub fn step(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

impl Speed {
    pub fn pixels_per_frame(self) -> f64 {
        match self {
            Speed::Slow => 1.0,
            Speed::Fast => 1.5,
        }
    }
}

/// Closed vocabulary over the caption and question templates.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(GLUE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(ShapeKind::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(Direction::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(Speed::ALL.iter().map(|c| c.word().to_string()));
        let mut k = 0;
        while tokens.len() < VOCAB_SIZE {
            tokens.push(format!("[unused{k}]"));
            k += 1;
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    /// Ids that appear in template text.
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        let used = NUM_SPECIALS
            + GLUE_WORDS.len()
            + Color::ALL.len()
            + ShapeKind::ALL.len()
            + Direction::ALL.len()
            + Speed::ALL.len();
        NUM_SPECIALS..used
    }

    /// Whitespace split, vocabulary lookup, then [EOS].
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| self.id(w))
            .chain(std::iter::once(EOS))
            .collect();
        TokenSeq::new(ids, self.size()).expect("tokenize yields one trailing [EOS]")
    }

    /// Content words up to the first [EOS]; [PAD], [CLS] and [SEP] are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| !matches!(i, PAD | CLS | SEP))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Everything that determines one rendered video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub color: Color,
    pub shape: ShapeKind,
    pub direction: Direction,
    pub speed: Speed,
    /// Path midpoint in pixel coordinates.
    pub center: (f64, f64),
}

impl Scene {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} moving {} {}",
            self.color.word(),
            self.shape.word(),
            self.direction.word(),
            self.speed.word()
        )
    }

    pub fn qa(&self, kind: QaKind) -> (String, String) {
        match kind {
            QaKind::Color => (
                format!("what color is the {}", self.shape.word()),
                self.color.word().to_string(),
            ),
            QaKind::Shape => (
                format!("what shape is the {} object", self.color.word()),
                self.shape.word().to_string(),
            ),
            QaKind::Direction => (
                format!("which way is the {} {} moving", self.color.word(), self.shape.word()),
                self.direction.word().to_string(),
            ),
        }
    }

    /// Draws a scene whose whole path stays inside the frame. Midpoints lie
    /// on the half-pixel grid.
    pub fn random(rng: &mut impl Rng) -> Scene {
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
        let direction = Direction::ALL[rng.gen_range(0..Direction::ALL.len())];
        let speed = Speed::ALL[rng.gen_range(0..Speed::ALL.len())];
        let half_path = speed.pixels_per_frame() * (RAW_FRAMES - 1) as f64 / 2.0;
        let size = FRAME_SIZE as f64;
        let along = half_grid(rng, half_path + SHAPE_RADIUS, size - half_path - SHAPE_RADIUS);
        let across = half_grid(rng, SHAPE_RADIUS, size - SHAPE_RADIUS);
        let center = match direction {
            Direction::Left | Direction::Right => (along, across),
            Direction::Up | Direction::Down => (across, along),
        };
        Scene {
            color,
            shape,
            direction,
            speed,
            center,
        }
    }

    /// Shape centre in frame `k` of `frames`.
    pub fn position(&self, k: usize, frames: usize) -> (f64, f64) {
        let offset = (k as f64 - (frames as f64 - 1.0) / 2.0) * self.speed.pixels_per_frame();
        let (dx, dy) = self.direction.step();
        (self.center.0 + offset * dx, self.center.1 + offset * dy)
    }

    /// `[frames, 3, 16, 16]` pixels in `[0, 1]`.
    pub fn render(&self, frames: usize) -> Tensor {
        let s = FRAME_SIZE;
        let mut data = vec![0.0; frames * CHANNELS * s * s];
        let rgb = self.color.rgb();
        for k in 0..frames {
            let (cx, cy) = self.position(k, frames);
            for y in 0..s {
                for x in 0..s {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if covers(self.shape, dx, dy) {
                        for (c, &v) in rgb.iter().enumerate() {
                            data[((k * CHANNELS + c) * s + y) * s + x] = v;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![frames, CHANNELS, s, s], data).expect("frame dims")
    }
}

fn half_grid(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo * 2.0).ceil() as i64, (hi * 2.0).floor() as i64);
    rng.gen_range(a..=b) as f64 / 2.0
}

fn covers(shape: ShapeKind, dx: f64, dy: f64) -> bool {
    let r = SHAPE_RADIUS;
    match shape {
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Circle => dx * dx + dy * dy <= (r + 0.3) * (r + 0.3),
        ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0 + 0.25,
    }
}

/// Direction and speed read back from foreground centroids of the first and
/// last frame; `None` when no motion is visible.
pub fn detect_motion(frames: &Tensor) -> Option<(Direction, Speed)> {
    let d = frames.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let centroid = |k: usize| -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if (0..c).any(|ch| frames.data()[((k * c + ch) * h + y) * w + x] > 0.0) {
                    sx += x as f64;
                    sy += y as f64;
                    m += 1.0;
                }
            }
        }
        (m > 0.0).then(|| (sx / m, sy / m))
    };
    let (x0, y0) = centroid(0)?;
    let (x1, y1) = centroid(n - 1)?;
    let (dx, dy) = ((x1 - x0) / (n - 1) as f64, (y1 - y0) / (n - 1) as f64);
    let (dir, mag) = if dx.abs() >= dy.abs() {
        (if dx < 0.0 { Direction::Left } else { Direction::Right }, dx.abs())
    } else {
        (if dy < 0.0 { Direction::Up } else { Direction::Down }, dy.abs())
    };
    if mag < 0.5 {
        return None;
    }
    let speed = if mag < 1.25 { Speed::Slow } else { Speed::Fast };
    Some((dir, speed))
}

/// Whether a caption's direction and speed words agree with the motion
/// visible in `frames`.
pub fn caption_matches_motion(caption: &str, frames: &Tensor) -> bool {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let dir = words.iter().find_map(|w| Direction::from_word(w));
    let speed = words.iter().find_map(|w| Speed::from_word(w));
    match (dir, speed, detect_motion(frames)) {
        (Some(d), Some(s), Some((md, ms))) => d == md && s == ms,
        _ => false,
    }
}

/// Frames in reverse order.
pub fn reverse_frames(frames: &Tensor) -> Tensor {
    let d = frames.dims();
    let per: usize = d[1..].iter().product();
    let mut data = Vec::with_capacity(frames.numel());
    for k in (0..d[0]).rev() {
        data.extend_from_slice(&frames.data()[k * per..(k + 1) * per]);
    }
    Tensor::new(d.to_vec(), data).expect("same dims")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    /// Split sizes for `n` samples; the test split takes the rounding slack.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {r:?} must be in [0, 1] and sum to 1"
            )));
        }
        let train = (n as f64 * self.train).round() as usize;
        let val = (n as f64 * self.val).round() as usize;
        if train + val > n {
            return Err(Error::Config(format!("split ratios {r:?} overflow {n} samples")));
        }
        Ok([train, val, n - train - val])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: String,
    pub caption: String,
    pub question: String,
    pub answer: String,
    pub split: Split,
}

/// Parameters of [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n: usize,
    pub seed: u64,
    pub ratios: SplitRatios,
    /// Question kinds to draw from, uniformly.
    pub qa_kinds: Vec<QaKind>,
}

impl CorpusSpec {
    pub const MIN_SAMPLES: usize = 10;

    pub fn new(n: usize, seed: u64) -> Self {
        CorpusSpec {
            n,
            seed,
            ratios: SplitRatios::default(),
            qa_kinds: QaKind::ALL.to_vec(),
        }
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Scenes and manifest entries for a corpus, without touching disk.
pub fn plan_corpus(spec: &CorpusSpec) -> Result<Vec<(Scene, ManifestEntry)>> {
    use rand::SeedableRng;
    if spec.n < CorpusSpec::MIN_SAMPLES {
        return Err(Error::Config(format!(
            "corpus needs at least {} samples, got {}",
            CorpusSpec::MIN_SAMPLES,
            spec.n
        )));
    }
    if spec.qa_kinds.is_empty() {
        return Err(Error::Config("at least one question kind is required".into()));
    }
    let [train, val, _] = spec.ratios.counts(spec.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let scene = Scene::random(&mut rng);
        let kind = spec.qa_kinds[rng.gen_range(0..spec.qa_kinds.len())];
        let (question, answer) = scene.qa(kind);
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        let id = format!("s{i:05}");
        out.push((
            scene,
            ManifestEntry {
                frames: format!("frames/{id}.tnsr"),
                id,
                caption: scene.caption(),
                question,
                answer,
                split,
            },
        ));
    }
    Ok(out)
}

/// Renders the corpus under `out`: `manifest.jsonl` plus one tensor file per
/// video. The output is a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec, out: &Path) -> Result<Vec<ManifestEntry>> {
    let plan = plan_corpus(spec)?;
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let manifest_path = out.join(MANIFEST);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest = BufWriter::new(file);
    let mut entries = Vec::with_capacity(plan.len());
    for (scene, entry) in plan {
        let path = out.join(&entry.frames);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_tensor(&mut w, &scene.render(RAW_FRAMES))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
        entries.push(entry);
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(entries)
}

/// Model-ready batch: frames `[B, T, 3, 16, 16]` in `[-1, 1]` plus token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub frames: Tensor,
    pub captions: Vec<TokenSeq>,
    pub questions: Vec<TokenSeq>,
    pub answers: Vec<TokenSeq>,
}

impl Batch {
    /// In-memory batch rendered straight at `t` frames, with `kind` questions.
    pub fn from_scenes(scenes: &[Scene], t: usize, kind: QaKind) -> Result<Batch> {
        let vocab = Vocab::new();
        let mut pixels = Vec::new();
        let (mut captions, mut questions, mut answers) = (Vec::new(), Vec::new(), Vec::new());
        for s in scenes {
            pixels.extend(s.render(t).data().iter().map(|&v| 2.0 * v - 1.0));
            captions.push(vocab.tokenize(&s.caption()));
            let (q, a) = s.qa(kind);
            questions.push(vocab.tokenize(&q));
            answers.push(vocab.tokenize(&a));
        }
        Ok(Batch {
            ids: (0..scenes.len()).map(|i| format!("mem{i:04}")).collect(),
            frames: Tensor::new(vec![scenes.len(), t, CHANNELS, FRAME_SIZE, FRAME_SIZE], pixels)?,
            captions,
            questions,
            answers,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A loaded corpus: manifest plus raw frames in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    frames: HashMap<String, Tensor>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Corpus> {
        let path = root.join(MANIFEST);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        let mut frames = HashMap::with_capacity(entries.len());
        for e in &entries {
            let p = root.join(&e.frames);
            let file = fs::File::open(&p)
                .map_err(|err| Error::Data(format!("frames of {} ({}): {err}", e.id, p.display())))?;
            let t = read_tensor(&mut BufReader::new(file))
                .map_err(|err| Error::Data(format!("frames of {}: {err}", e.id)))?;
            if t.dims().len() != 4 || t.dims()[1..] != [CHANNELS, FRAME_SIZE, FRAME_SIZE] {
                return Err(Error::Data(format!("frames of {} have dims {:?}", e.id, t.dims())));
            }
            frames.insert(e.id.clone(), t);
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            entries,
            frames,
            vocab: Vocab::new(),
        })
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Data(format!("unknown sample id {id}")))
    }

    pub fn raw_frames(&self, id: &str) -> Result<&Tensor> {
        self.frames
            .get(id)
            .ok_or_else(|| Error::Data(format!("no frames for sample {id}")))
    }

    /// Samples `t` frames per video and scales pixels to `[-1, 1]`.
    pub fn load_batch(&self, ids: &[String], t: usize, mode: &mut FrameMode<'_>) -> Result<Batch> {
        let per = CHANNELS * FRAME_SIZE * FRAME_SIZE;
        let mut pixels = Vec::with_capacity(ids.len() * t * per);
        let (mut captions, mut questions, mut answers) = (Vec::new(), Vec::new(), Vec::new());
        for id in ids {
            let entry = self.entry(id)?;
            let raw = self.raw_frames(id)?;
            for k in sample_frames(raw.dims()[0], t, mode)? {
                pixels.extend(raw.data()[k * per..(k + 1) * per].iter().map(|&v| 2.0 * v - 1.0));
            }
            captions.push(self.vocab.tokenize(&entry.caption));
            questions.push(self.vocab.tokenize(&entry.question));
            answers.push(self.vocab.tokenize(&entry.answer));
        }
        Ok(Batch {
            ids: ids.to_vec(),
            frames: Tensor::new(vec![ids.len(), t, CHANNELS, FRAME_SIZE, FRAME_SIZE], pixels)?,
            captions,
            questions,
            answers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn vocabulary_layout() {
        let v = Vocab::new();
        assert_eq!(v.size(), VOCAB_SIZE);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
        for id in v.content_ids() {
            assert!(!v.token(id).starts_with('['));
        }
        assert!(v.token(v.content_ids().end).starts_with("[unused"));
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::new();
        let s = v.tokenize("a red square moving left slow");
        assert_eq!(s.len(), 7);
        assert!(s.ids()[..6].iter().all(|&i| v.content_ids().contains(&i)));
        assert_eq!(s.ids()[6], EOS);
        assert_eq!(v.tokenize("a purple square").ids()[1], UNK);
        let text = "which way is the blue circle moving";
        assert_eq!(v.detokenize(v.tokenize(text).ids()), text);
    }

    #[test]
    fn every_caption_and_question_is_in_vocabulary() {
        let v = Vocab::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = Scene::random(&mut rng);
            let mut texts = vec![s.caption()];
            for &k in QaKind::ALL {
                let (q, a) = s.qa(k);
                texts.push(q);
                texts.push(a);
            }
            for t in texts {
                assert!(!v.tokenize(&t).ids().contains(&UNK), "{t}");
            }
        }
    }

    #[test]
    fn renderer_agrees_with_motion_checker_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = Scene::random(&mut rng);
            let frames = s.render(RAW_FRAMES);
            assert!(caption_matches_motion(&s.caption(), &frames), "{s:?}");
            let reversed = Scene {
                direction: s.direction.opposite(),
                ..s
            };
            assert!(caption_matches_motion(&reversed.caption(), &reverse_frames(&frames)));
            assert!(!caption_matches_motion(&s.caption(), &reverse_frames(&frames)));
        }
    }

    #[test]
    fn reversed_video_is_the_opposite_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = Scene::random(&mut rng);
            let opposite = Scene {
                direction: s.direction.opposite(),
                ..s
            };
            assert_eq!(reverse_frames(&s.render(RAW_FRAMES)), opposite.render(RAW_FRAMES));
        }
    }

    #[test]
    fn shapes_stay_inside_the_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let size = FRAME_SIZE as f64;
        for _ in 0..300 {
            let s = Scene::random(&mut rng);
            let frames = s.render(RAW_FRAMES);
            let per = CHANNELS * FRAME_SIZE * FRAME_SIZE;
            for k in 0..RAW_FRAMES {
                let (x, y) = s.position(k, RAW_FRAMES);
                for v in [x, y] {
                    assert!((SHAPE_RADIUS..=size - SHAPE_RADIUS).contains(&v), "{s:?} frame {k}");
                }
                let lit = frames.data()[k * per..(k + 1) * per].iter().filter(|&&v| v > 0.0).count();
                assert!(lit >= 6, "{s:?} frame {k}");
            }
        }
    }

    #[test]
    fn split_counts() {
        assert_eq!(SplitRatios::default().counts(100).unwrap(), [80, 10, 10]);
        let bad = SplitRatios {
            train: 0.9,
            val: 0.2,
            test: 0.1,
        };
        assert!(matches!(bad.counts(100), Err(Error::Config(_))));
        assert!(matches!(plan_corpus(&CorpusSpec::new(5, 1)), Err(Error::Config(_))));
    }
}
