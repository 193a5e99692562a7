//! Distractor-resistance evaluation on synthetic needle tasks.
//!
//! Each task shows `N` procedurally described images and asks about one of
//! them ("In Image X, ..."); the other `N - 1` are distractors. A question
//! counts as solved only if the adapter answers every option rotation and
//! every distractor resample correctly (CircularEval).
//!
//! Text is tokenized byte-wise: token `b` is byte `b`, and the placeholder
//! uses the configured image token.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::interleave::{build_sequence, CropPolicy, InterleavedSequence, Segment};
use crate::model::{features_for_sequence, Descriptor, Example, Model};
use crate::tensor::Matrix;

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "hexagon", "cross"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const N_OPTIONS: usize = 4;
pub const DEFAULT_N_VALUES: [usize; 8] = [1, 5, 10, 20, 50, 100, 200, 400];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Shape,
    Color,
}

impl Attribute {
    pub fn question(&self) -> &'static str {
        match self {
            Attribute::Shape => "what is the shape of the object?",
            Attribute::Color => "what is the color of the object?",
        }
    }

    pub fn value(&self, d: Descriptor) -> &'static str {
        match self {
            Attribute::Shape => SHAPES[d.shape as usize],
            Attribute::Color => COLORS[d.color as usize],
        }
    }

    fn palette(&self) -> &'static [&'static str] {
        match self {
            Attribute::Shape => &SHAPES,
            Attribute::Color => &COLORS,
        }
    }

    fn index(&self, d: Descriptor) -> u8 {
        match self {
            Attribute::Shape => d.shape,
            Attribute::Color => d.color,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleTask {
    pub id: u64,
    pub n_images: usize,
    /// 1-based index of the image the question is about.
    pub needle_index: usize,
    pub images: Vec<Descriptor>,
    pub attribute: Attribute,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl NeedleTask {
    pub fn needle(&self) -> Descriptor {
        self.images[self.needle_index - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_values: Vec<usize>,
    /// Option-order variants per question.
    pub rotations: usize,
    /// Distractor resamples per rotation.
    pub distractor_seeds: usize,
    /// Questions per value of `N`.
    pub questions: usize,
    pub rng_seed: u64,
    /// Chance that a distractor shares the needle's queried attribute.
    pub distractor_same_prob: f64,
    pub image_token: u32,
    pub patches_per_slot: usize,
    pub vision_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_values: DEFAULT_N_VALUES.to_vec(),
            rotations: N_OPTIONS,
            distractor_seeds: 1,
            questions: 50,
            rng_seed: 0,
            distractor_same_prob: 0.0,
            image_token: 511,
            patches_per_slot: 4,
            vision_dim: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return bad("n_values must be nonempty and positive");
        }
        if self.rotations == 0 || self.distractor_seeds == 0 || self.questions == 0 {
            return bad("rotations, distractor_seeds and questions must be positive");
        }
        if !(0.0..=1.0).contains(&self.distractor_same_prob) {
            return bad("distractor_same_prob must lie in [0, 1]");
        }
        if self.image_token < 256 {
            return bad("image_token must not collide with byte tokens (< 256)");
        }
        if self.patches_per_slot == 0 || self.vision_dim < 2 {
            return bad("patches_per_slot must be positive and vision_dim >= 2");
        }
        Ok(())
    }
}

fn hash_of(parts: impl Hash) -> u64 {
    let mut h = DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

fn random_descriptor<R: Rng>(rng: &mut R) -> Descriptor {
    Descriptor {
        shape: rng.gen_range(0..SHAPES.len() as u8),
        color: rng.gen_range(0..COLORS.len() as u8),
    }
}

/// A distractor that differs from the needle in `attr` unless the coin says otherwise.
fn distractor<R: Rng>(rng: &mut R, needle: Descriptor, attr: Attribute, same_prob: f64) -> Descriptor {
    let same = rng.gen_bool(same_prob);
    loop {
        let d = random_descriptor(rng);
        if (attr.index(d) == attr.index(needle)) == same {
            return d;
        }
    }
}

/// Tasks for every `N` in `config.n_values`, deterministic in `rng_seed`.
///
/// Needle positions are stratified (each of `1..=N` used equally often, up
/// to rounding) and then shuffled.
pub fn gen_tasks(config: &EvalConfig) -> Result<Vec<NeedleTask>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut tasks = Vec::new();
    for &n in &config.n_values {
        let mut needles: Vec<usize> = (0..config.questions).map(|i| i % n + 1).collect();
        needles.shuffle(&mut rng);
        for x in needles {
            let attribute = if rng.gen_bool(0.5) {
                Attribute::Shape
            } else {
                Attribute::Color
            };
            let needle = random_descriptor(&mut rng);
            let images = (1..=n)
                .map(|i| {
                    if i == x {
                        needle
                    } else {
                        distractor(&mut rng, needle, attribute, config.distractor_same_prob)
                    }
                })
                .collect();
            let correct = attribute.value(needle);
            let mut others: Vec<&str> = attribute.palette().iter().copied().filter(|v| *v != correct).collect();
            others.shuffle(&mut rng);
            let mut options: Vec<String> = others[..N_OPTIONS - 1].iter().map(|s| s.to_string()).collect();
            let answer_index = rng.gen_range(0..N_OPTIONS);
            options.insert(answer_index, correct.to_string());
            tasks.push(NeedleTask {
                id: rng.gen(),
                n_images: n,
                needle_index: x,
                images,
                attribute,
                question: attribute.question().to_string(),
                options,
                answer_index,
            });
        }
    }
    Ok(tasks)
}

/// The prompt text, with `<|image|>` marking each image.
pub fn prompt_text(task: &NeedleTask) -> String {
    let images: Vec<String> = (1..=task.n_images).map(|i| format!("Image {i}: <|image|>")).collect();
    format!(
        "{}. In Image {}, {}",
        images.join(" "),
        task.needle_index,
        task.question
    )
}

pub fn encode_text(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes of every non-placeholder token, in order.
pub fn decode_text(seq: &InterleavedSequence) -> String {
    let bytes: Vec<u8> = seq
        .tokens
        .iter()
        .filter(|&&t| t != seq.image_token)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// The text template and its interleaved sequence. Image ids carry the
/// descriptors and are unique per task and distractor resample.
pub fn render_prompt(task: &NeedleTask, image_token: u32) -> Result<(String, InterleavedSequence)> {
    render_images(task, &task.images, 0, image_token)
}

fn render_images(
    task: &NeedleTask,
    images: &[Descriptor],
    resample: usize,
    image_token: u32,
) -> Result<(String, InterleavedSequence)> {
    let text = prompt_text(task);
    let mut segments = Vec::with_capacity(2 * images.len() + 1);
    for (i, piece) in text.split("<|image|>").enumerate() {
        if !piece.is_empty() {
            segments.push(Segment::text(encode_text(piece)));
        }
        if let Some(d) = images.get(i) {
            let id = d.image_id(hash_of((task.id, resample, i)));
            segments.push(Segment::Image {
                image_id: id,
                width: 448,
                height: 448,
            });
        }
    }
    let seq = build_sequence(&segments, CropPolicy::Off, image_token)?;
    Ok((text, seq))
}

/// One evaluation variant of a task: distractors resampled for `resample > 0`,
/// options rotated left by `rotation`.
#[derive(Debug, Clone)]
pub struct TaskVariant {
    pub example: Example,
    pub options: Vec<String>,
    pub answer_index: usize,
}

pub fn task_variant(task: &NeedleTask, resample: usize, rotation: usize, config: &EvalConfig) -> Result<TaskVariant> {
    let images = if resample == 0 {
        task.images.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_of((task.id, resample)));
        let needle = task.needle();
        (1..=task.n_images)
            .map(|i| {
                if i == task.needle_index {
                    needle
                } else {
                    distractor(&mut rng, needle, task.attribute, config.distractor_same_prob)
                }
            })
            .collect()
    };
    let (_, seq) = render_images(task, &images, resample, config.image_token)?;
    let features = features_for_sequence(&seq, config.patches_per_slot, config.vision_dim, config.rng_seed);
    let k = task.options.len();
    let r = rotation % k;
    let options = (0..k).map(|i| task.options[(i + r) % k].clone()).collect();
    Ok(TaskVariant {
        example: Example { seq, features },
        options,
        answer_index: (task.answer_index + k - r) % k,
    })
}

/// A multiple-choice answerer.
pub trait ModelAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Index into `options`.
    fn answer(&self, prompt: &InterleavedSequence, features: &Matrix, options: &[String]) -> Result<usize>;

    /// Whether the harness may call [`Self::answer`] from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Parses `In Image X, ... shape|color ...` from the prompt text.
fn parse_question(prompt: &InterleavedSequence) -> Result<(usize, Attribute)> {
    let text = decode_text(prompt);
    let bad = || Error::Parse {
        line: 1,
        msg: "prompt has no `In Image X,` question".into(),
    };
    let tail = &text[text.rfind("In Image ").ok_or_else(bad)? + "In Image ".len()..];
    let digits: String = tail.chars().take_while(char::is_ascii_digit).collect();
    let x: usize = digits.parse().map_err(|_| bad())?;
    let attr = if tail.contains("shape") {
        Attribute::Shape
    } else if tail.contains("color") {
        Attribute::Color
    } else {
        return Err(bad());
    };
    Ok((x, attr))
}

/// Slot `slot`'s queried attribute, read from its first patch.
fn slot_value(prompt: &InterleavedSequence, features: &Matrix, slot: usize, attr: Attribute) -> Result<&'static str> {
    let slots = prompt.num_slots();
    if slot >= slots || !features.rows.is_multiple_of(slots.max(1)) {
        return Err(Error::FeatureMismatch(format!("no features for slot {slot}")));
    }
    let patches = features.rows / slots;
    let d = Descriptor::probe(features.row(slot * patches))
        .filter(|d| (d.shape as usize) < SHAPES.len() && (d.color as usize) < COLORS.len())
        .ok_or_else(|| Error::FeatureMismatch(format!("slot {slot} carries no descriptor")))?;
    Ok(attr.value(d))
}

/// Reads the needle's descriptor directly from the visual features.
pub struct OracleAdapter;

impl ModelAdapter for OracleAdapter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn answer(&self, prompt: &InterleavedSequence, features: &Matrix, options: &[String]) -> Result<usize> {
        let (x, attr) = parse_question(prompt)?;
        let want = slot_value(prompt, features, x.wrapping_sub(1), attr)?;
        options
            .iter()
            .position(|o| o == want)
            .ok_or_else(|| Error::FeatureMismatch(format!("`{want}` is not among the options")))
    }
}

/// Ignores the needle index and always describes the first image. When the
/// first image's value is not offered it picks option 0, which no rotation
/// set can reward every time.
pub struct FirstImageAdapter;

impl ModelAdapter for FirstImageAdapter {
    fn name(&self) -> &str {
        "first-image"
    }

    fn answer(&self, prompt: &InterleavedSequence, features: &Matrix, options: &[String]) -> Result<usize> {
        let (_, attr) = parse_question(prompt)?;
        let want = slot_value(prompt, features, 0, attr)?;
        Ok(options.iter().position(|o| o == want).unwrap_or(0))
    }
}

/// Uniform choice, derived from a hash of everything it is shown.
pub struct RandomAdapter {
    pub seed: u64,
}

impl ModelAdapter for RandomAdapter {
    fn name(&self) -> &str {
        "random"
    }

    fn answer(&self, prompt: &InterleavedSequence, features: &Matrix, options: &[String]) -> Result<usize> {
        let bits: Vec<u64> = features.data.iter().map(|v| v.to_bits()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(hash_of((self.seed, &prompt.tokens, bits, options)));
        Ok(rng.gen_range(0..options.len()))
    }
}

/// Scores each option by the language model's log-likelihood of
/// `" " + option` after the prompt.
pub struct ToyModelAdapter {
    pub model: Model,
}

impl ModelAdapter for ToyModelAdapter {
    fn name(&self) -> &str {
        "toy-model"
    }

    fn answer(&self, prompt: &InterleavedSequence, features: &Matrix, options: &[String]) -> Result<usize> {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, option) in options.iter().enumerate() {
            let mut seq = prompt.clone();
            let start = seq.len();
            seq.tokens.extend(encode_text(&format!(" {option}")));
            let out = self.model.forward(&Example {
                seq: seq.clone(),
                features: features.clone(),
            })?;
            let mut score = 0.0;
            for t in start..seq.len() {
                let row = out.logits.row(t - 1);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                score += row[seq.tokens[t] as usize] - lse;
            }
            if score > best.0 {
                best = (score, i);
            }
        }
        Ok(best.1)
    }
}

pub fn adapter_by_name(name: &str, seed: u64, toy: Option<Model>) -> Result<Box<dyn ModelAdapter>> {
    match name {
        "oracle" => Ok(Box::new(OracleAdapter)),
        "random" => Ok(Box::new(RandomAdapter { seed })),
        "first-image" => Ok(Box::new(FirstImageAdapter)),
        "toy-model" => toy
            .map(|model| Box::new(ToyModelAdapter { model }) as Box<dyn ModelAdapter>)
            .ok_or_else(|| Error::InvalidConfig("toy-model adapter needs a model".into())),
        other => Err(Error::InvalidConfig(format!(
            "unknown adapter `{other}` (oracle, random, first-image, toy-model)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NResult {
    pub n_images: usize,
    pub questions: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Adapter calls that errored or returned an invalid index (counted wrong).
    #[serde(skip)]
    pub failures: usize,
}

/// `(solved, failed calls)` for one question under CircularEval.
fn evaluate_task(adapter: &dyn ModelAdapter, task: &NeedleTask, config: &EvalConfig) -> (bool, usize) {
    for s in 0..config.distractor_seeds {
        for r in 0..config.rotations {
            let v = match task_variant(task, s, r, config) {
                Ok(v) => v,
                Err(_) => return (false, 1),
            };
            match adapter.answer(&v.example.seq, &v.example.features, &v.options) {
                Ok(i) if i == v.answer_index => {}
                Ok(i) if i < v.options.len() => return (false, 0),
                _ => return (false, 1),
            }
        }
    }
    (true, 0)
}

/// Accuracy per `N`, in ascending `N`.
pub fn circular_eval(adapter: &dyn ModelAdapter, tasks: &[NeedleTask], config: &EvalConfig) -> Result<Vec<NResult>> {
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no tasks to evaluate".into()));
    }
    config.validate()?;
    let outcomes = if adapter.concurrent() {
        exec::map_slice(tasks, |t| evaluate_task(adapter, t, config))
    } else {
        tasks.iter().map(|t| evaluate_task(adapter, t, config)).collect()
    };
    let mut by_n: BTreeMap<usize, NResult> = BTreeMap::new();
    for (task, (ok, failed)) in tasks.iter().zip(outcomes) {
        let e = by_n.entry(task.n_images).or_insert(NResult {
            n_images: task.n_images,
            questions: 0,
            correct: 0,
            accuracy: 0.0,
            failures: 0,
        });
        e.questions += 1;
        e.correct += usize::from(ok);
        e.failures += failed;
    }
    Ok(by_n
        .into_values()
        .map(|mut r| {
            r.accuracy = r.correct as f64 / r.questions as f64;
            r
        })
        .collect())
}

pub fn results_csv(results: &[NResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::EmptyReports);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_tasks(path: &Path, tasks: &[NeedleTask]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(tasks)?)?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<NeedleTask>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
