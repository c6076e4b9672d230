//! In-memory samples and the on-disk manifest layout
//! (`<root>/manifest.json` plus `<root>/tensors/*.ecgf`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, write_tensor, Precision};
use crate::error::{Error, Result};
use crate::heads::MAX_COUNT;
use crate::numkit::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";
const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Word,
    #[serde(alias = "count")]
    Number,
    Choice,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TaskKind::Word),
            "number" | "count" => Ok(TaskKind::Number),
            "choice" => Ok(TaskKind::Choice),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected word, count or choice)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Word => "word",
            TaskKind::Number => "number",
            TaskKind::Choice => "choice",
        })
    }
}

/// Input feature widths.
///
/// With `vocab` set, captions and questions are token ids embedded at width
/// `d_q`; the caption sentence encoder then outputs `d_c`. With `d_a` and `d_m`
/// set, video frames arrive as appearance and motion features that are
/// projected to `d_v`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub d_c: usize,
    pub d_v: usize,
    pub d_q: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_a: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
}

impl InputDims {
    /// Feature-mode dims with one shared width.
    pub fn uniform(dim: usize) -> Self {
        Self {
            d_c: dim,
            d_v: dim,
            d_q: dim,
            d_a: None,
            d_m: None,
            vocab: None,
        }
    }

    pub fn raw_video(&self) -> Option<(usize, usize)> {
        self.d_a.zip(self.d_m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.d_v == 0 || self.d_q == 0 {
            return Err(Error::Config(format!("zero input width in {self:?}")));
        }
        if self.d_a.is_some() != self.d_m.is_some() {
            return Err(Error::Config(
                "appearance and motion widths must be given together".into(),
            ));
        }
        if matches!(self.d_a, Some(0)) || matches!(self.d_m, Some(0)) || self.vocab == Some(0) {
            return Err(Error::Config(format!("zero input width in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Captions {
    /// `N_c × d_c` sentence features.
    Features(Tensor),
    /// One token sequence per caption.
    Tokens(Vec<Vec<u32>>),
}

impl Captions {
    pub fn len(&self) -> usize {
        match self {
            Captions::Features(t) => t.rows(),
            Captions::Tokens(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Video {
    /// `N_v × d_v` frame features.
    Features(Tensor),
    /// Per-frame appearance (`N_v × d_a`) and motion (`N_v × d_m`) features.
    Raw { appearance: Tensor, motion: Tensor },
}

impl Video {
    pub fn frames(&self) -> usize {
        match self {
            Video::Features(t) => t.rows(),
            Video::Raw { appearance, .. } => appearance.rows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Question {
    /// `N_q × d_q` word features.
    Features(Tensor),
    Tokens(Vec<u32>),
}

impl Question {
    pub fn len(&self) -> usize {
        match self {
            Question::Features(t) => t.rows(),
            Question::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The question followed by a candidate answer.
    pub fn concat(&self, candidate: &Question) -> Result<Question> {
        match (self, candidate) {
            (Question::Features(q), Question::Features(a)) => {
                if q.cols() != a.cols() {
                    return Err(Error::shape("question ‖ candidate", q.shape(), a.shape()));
                }
                let mut data = q.data().to_vec();
                data.extend_from_slice(a.data());
                Ok(Question::Features(Tensor::new(
                    vec![q.rows() + a.rows(), q.cols()],
                    data,
                )?))
            }
            (Question::Tokens(q), Question::Tokens(a)) => {
                Ok(Question::Tokens([q.as_slice(), a.as_slice()].concat()))
            }
            _ => Err(Error::Input(
                "question and candidate use different encodings".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub captions: Captions,
    pub video: Video,
    pub question: Question,
    /// Candidate answers; empty except for the choice task.
    pub candidates: Vec<Question>,
    /// Class id, count, or index of the correct candidate.
    pub answer: u32,
    /// Caption row carrying the planted answer signal, when the generator
    /// plants one.
    pub planted_row: Option<usize>,
}

fn check_width(what: &str, t: &Tensor, width: usize) -> Result<()> {
    if t.rank() != 2 || t.cols() != width {
        return Err(Error::Input(format!(
            "{what} has shape {:?}, expected width {width}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_tokens(what: &str, tokens: &[u32], vocab: Option<usize>) -> Result<()> {
    let Some(vocab) = vocab else {
        return Err(Error::Input(format!(
            "{what} given as tokens but no vocabulary is configured"
        )));
    };
    if tokens.is_empty() {
        return Err(Error::Input(format!("{what} is empty")));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Input(format!(
            "{what} token {t} outside vocabulary of size {vocab}"
        )));
    }
    Ok(())
}

impl Sample {
    pub fn validate(&self, task: TaskKind, classes: usize, dims: &InputDims) -> Result<()> {
        match (&self.captions, dims.vocab) {
            (Captions::Features(t), None) => check_width("caption features", t, dims.d_c)?,
            (Captions::Tokens(cs), Some(_)) => {
                if cs.is_empty() {
                    return Err(Error::Input("caption set is empty".into()));
                }
                for (i, c) in cs.iter().enumerate() {
                    check_tokens(&format!("caption {i}"), c, dims.vocab)?;
                }
            }
            _ => {
                return Err(Error::Input(
                    "caption encoding does not match the configured vocabulary".into(),
                ))
            }
        }
        match (&self.video, dims.raw_video()) {
            (Video::Features(t), None) => check_width("video features", t, dims.d_v)?,
            (Video::Raw { appearance, motion }, Some((d_a, d_m))) => {
                check_width("appearance features", appearance, d_a)?;
                check_width("motion features", motion, d_m)?;
                if appearance.rows() != motion.rows() {
                    return Err(Error::Input(format!(
                        "{} appearance frames but {} motion frames",
                        appearance.rows(),
                        motion.rows()
                    )));
                }
            }
            _ => {
                return Err(Error::Input(
                    "video encoding does not match the configured dims".into(),
                ))
            }
        }
        let check_question = |what: &str, q: &Question| match (q, dims.vocab) {
            (Question::Features(t), None) => check_width(what, t, dims.d_q),
            (Question::Tokens(t), Some(_)) => check_tokens(what, t, dims.vocab),
            _ => Err(Error::Input(format!(
                "{what} encoding does not match the configured vocabulary"
            ))),
        };
        check_question("question", &self.question)?;
        for (i, c) in self.candidates.iter().enumerate() {
            check_question(&format!("candidate {i}"), c)?;
        }
        if let Some(r) = self.planted_row {
            if r >= self.captions.len() {
                return Err(Error::Input(format!("planted row {r} outside caption set")));
            }
        }
        let a = self.answer as usize;
        match task {
            TaskKind::Word if a >= classes => Err(Error::Input(format!(
                "answer {a} outside 0..{classes}"
            ))),
            TaskKind::Number if self.answer > MAX_COUNT => Err(Error::Input(format!(
                "count {a} outside 0..={MAX_COUNT}"
            ))),
            TaskKind::Choice if self.candidates.len() != classes => Err(Error::Input(format!(
                "{} candidates, expected {classes}",
                self.candidates.len()
            ))),
            TaskKind::Choice if a >= classes => Err(Error::Input(format!(
                "correct candidate {a} outside 0..{classes}"
            ))),
            TaskKind::Word | TaskKind::Number if !self.candidates.is_empty() => Err(
                Error::Input(format!("{task} samples carry no candidates")),
            ),
            _ => Ok(()),
        }
    }
}

/// A generated or loaded task with its train and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    /// Answer-set size `C` for the word task, candidate count `K` for the
    /// choice task, `MAX_COUNT + 1` for counts.
    pub classes: usize,
    pub dims: InputDims,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        for split in [Split::Train, Split::Test] {
            for (i, s) in self.split(split).iter().enumerate() {
                s.validate(self.task, self.classes, &self.dims)
                    .map_err(|e| Error::Input(format!("{} sample {i}: {e}", split.name())))?;
            }
        }
        Ok(())
    }

    /// Copy whose training answers are permuted across samples.
    pub fn with_shuffled_labels(&self, seed: u64) -> Dataset {
        let mut out = self.clone();
        let mut answers: Vec<u32> = out.train.iter().map(|s| s.answer).collect();
        answers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (s, a) in out.train.iter_mut().zip(answers) {
            s.answer = a;
            s.planted_row = None;
        }
        out
    }

    /// Writes tensors, then the manifest via a temporary file and rename.
    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        let tensors = root.join(TENSOR_DIR);
        fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
        let mut writer = EntryWriter { root };
        let mut manifest = Manifest {
            format: MANIFEST_FORMAT,
            task: self.task,
            classes: self.classes,
            dims: self.dims.clone(),
            counts: Counts {
                train: self.train.len(),
                test: self.test.len(),
            },
            train: Vec::with_capacity(self.train.len()),
            test: Vec::with_capacity(self.test.len()),
        };
        for (i, s) in self.train.iter().enumerate() {
            manifest.train.push(writer.write(Split::Train, i, s)?);
        }
        for (i, s) in self.test.iter().enumerate() {
            manifest.test.push(writer.write(Split::Test, i, s)?);
        }
        let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        json.push(b'\n');
        let path = root.join(MANIFEST_FILE);
        let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Input(format!(
                "{}: unsupported manifest format {}",
                path.display(),
                manifest.format
            )));
        }
        if manifest.counts.train != manifest.train.len()
            || manifest.counts.test != manifest.test.len()
        {
            return Err(Error::Input(format!(
                "{}: counts do not match the listed samples",
                path.display()
            )));
        }
        let read = |entries: &[Entry]| -> Result<Vec<Sample>> {
            entries.iter().map(|e| e.read(root)).collect()
        };
        let ds = Dataset {
            task: manifest.task,
            classes: manifest.classes,
            dims: manifest.dims,
            train: read(&manifest.train)?,
            test: read(&manifest.test)?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct Counts {
    train: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    task: TaskKind,
    classes: usize,
    dims: InputDims,
    counts: Counts,
    train: Vec<Entry>,
    test: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CaptionRef {
    File { file: String },
    Tokens { tokens: Vec<Vec<u32>> },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VideoRef {
    File { file: String },
    Raw { appearance: String, motion: String },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum QuestionRef {
    File { file: String },
    Tokens { tokens: Vec<u32> },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    captions: CaptionRef,
    video: VideoRef,
    question: QuestionRef,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    candidates: Vec<QuestionRef>,
    answer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    planted_row: Option<usize>,
}

struct EntryWriter<'a> {
    root: &'a Path,
}

impl EntryWriter<'_> {
    fn tensor(&mut self, split: Split, index: usize, tag: &str, t: &Tensor) -> Result<String> {
        let rel = format!("{TENSOR_DIR}/{}-{index:06}-{tag}.ecgf", split.name());
        write_tensor(&self.root.join(&rel), t, Precision::F32)?;
        Ok(rel)
    }

    fn question(&mut self, split: Split, i: usize, tag: &str, q: &Question) -> Result<QuestionRef> {
        Ok(match q {
            Question::Features(t) => QuestionRef::File {
                file: self.tensor(split, i, tag, t)?,
            },
            Question::Tokens(t) => QuestionRef::Tokens { tokens: t.clone() },
        })
    }

    fn write(&mut self, split: Split, i: usize, s: &Sample) -> Result<Entry> {
        let captions = match &s.captions {
            Captions::Features(t) => CaptionRef::File {
                file: self.tensor(split, i, "c", t)?,
            },
            Captions::Tokens(c) => CaptionRef::Tokens { tokens: c.clone() },
        };
        let video = match &s.video {
            Video::Features(t) => VideoRef::File {
                file: self.tensor(split, i, "v", t)?,
            },
            Video::Raw { appearance, motion } => VideoRef::Raw {
                appearance: self.tensor(split, i, "a", appearance)?,
                motion: self.tensor(split, i, "m", motion)?,
            },
        };
        let question = self.question(split, i, "q", &s.question)?;
        let candidates = s
            .candidates
            .iter()
            .enumerate()
            .map(|(k, c)| self.question(split, i, &format!("k{k}"), c))
            .collect::<Result<_>>()?;
        Ok(Entry {
            captions,
            video,
            question,
            candidates,
            answer: s.answer,
            planted_row: s.planted_row,
        })
    }
}

fn resolve(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Input(format!(
            "manifest path {rel:?} must stay inside the dataset directory"
        )));
    }
    Ok(root.join(p))
}

impl Entry {
    fn read(&self, root: &Path) -> Result<Sample> {
        let load = |rel: &str| resolve(root, rel).and_then(|p| read_tensor(&p));
        let question = |q: &QuestionRef| -> Result<Question> {
            Ok(match q {
                QuestionRef::File { file } => Question::Features(load(file)?),
                QuestionRef::Tokens { tokens } => Question::Tokens(tokens.clone()),
            })
        };
        Ok(Sample {
            captions: match &self.captions {
                CaptionRef::File { file } => Captions::Features(load(file)?),
                CaptionRef::Tokens { tokens } => Captions::Tokens(tokens.clone()),
            },
            video: match &self.video {
                VideoRef::File { file } => Video::Features(load(file)?),
                VideoRef::Raw { appearance, motion } => Video::Raw {
                    appearance: load(appearance)?,
                    motion: load(motion)?,
                },
            },
            question: question(&self.question)?,
            candidates: self.candidates.iter().map(question).collect::<Result<_>>()?,
            answer: self.answer,
            planted_row: self.planted_row,
        })
    }
}
