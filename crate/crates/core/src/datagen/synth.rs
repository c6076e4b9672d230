//! Planted-signal generators for the three tasks, with closed-form oracle
//! probes that decode the planted answer without learning.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Captions, Dataset, InputDims, Question, Sample, TaskKind, Video};
use crate::error::{Error, Result};
use crate::heads::{argmax, MAX_COUNT};
use crate::numkit::Tensor;

/// Width of the class-code block and of the slot-marker block.
const BLOCK: usize = 16;
/// Number of distinct patterns in the choice task.
const CHOICE_PATTERNS: usize = 6;

/// Inclusive `[min, max]` sequence lengths per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRanges {
    pub captions: [usize; 2],
    pub frames: [usize; 2],
    pub question: [usize; 2],
}

impl SizeRanges {
    pub fn desk(task: TaskKind) -> Self {
        let frames = match task {
            // Every count up to MAX_COUNT must fit in the clip.
            TaskKind::Number => [MAX_COUNT as usize, 16],
            _ => [8, 16],
        };
        Self {
            captions: [3, 8],
            frames,
            question: [4, 10],
        }
    }

    fn validate(&self, task: TaskKind) -> Result<()> {
        for (name, [lo, hi]) in [
            ("captions", self.captions),
            ("frames", self.frames),
            ("question", self.question),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("invalid {name} range {lo}-{hi}")));
            }
        }
        match task {
            TaskKind::Word if self.captions[1] > BLOCK => Err(Error::Config(format!(
                "word task supports at most {BLOCK} captions"
            ))),
            TaskKind::Number if self.frames[0] < MAX_COUNT as usize => Err(Error::Config(
                format!("count task needs at least {MAX_COUNT} frames per clip"),
            )),
            TaskKind::Choice if self.captions[0] < 2 || self.frames[0] < 2 => Err(
                Error::Config("choice task needs at least 2 captions and 2 frames".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Parses `"3-8,8-16,4-10"` (captions, frames, question).
impl FromStr for SizeRanges {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("sizes {s:?}: expected e.g. 3-8,8-16,4-10"));
        let ranges: Vec<[usize; 2]> = s
            .split(',')
            .map(|part| {
                let (lo, hi) = part.trim().split_once('-').ok_or_else(bad)?;
                Ok([
                    lo.trim().parse().map_err(|_| bad())?,
                    hi.trim().parse().map_err(|_| bad())?,
                ])
            })
            .collect::<Result<_>>()?;
        match ranges[..] {
            [captions, frames, question] => Ok(Self {
                captions,
                frames,
                question,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub sizes: SizeRanges,
    /// Feature width of every modality.
    pub dim: usize,
    /// Half-width of the uniform noise added to every feature.
    pub noise: f64,
    /// Answer-set size for the word task; candidate count for the choice task.
    pub classes: usize,
}

impl SynthConfig {
    pub fn desk(task: TaskKind, seed: u64) -> Self {
        Self {
            seed,
            train: 2048,
            test: 512,
            sizes: SizeRanges::desk(task),
            dim: 32,
            noise: 0.25,
            classes: match task {
                TaskKind::Word => 4,
                TaskKind::Number => MAX_COUNT as usize + 1,
                TaskKind::Choice => 5,
            },
        }
    }

    fn validate(&self, task: TaskKind) -> Result<()> {
        self.sizes.validate(task)?;
        if !self.dim.is_power_of_two() || self.dim < 2 * BLOCK {
            return Err(Error::Config(format!(
                "synthetic feature width must be a power of two ≥ {}, got {}",
                2 * BLOCK,
                self.dim
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("invalid noise level {}", self.noise)));
        }
        match task {
            TaskKind::Word if !(2..=BLOCK).contains(&self.classes) => Err(Error::Config(
                format!("word task needs 2..={BLOCK} classes, got {}", self.classes),
            )),
            TaskKind::Choice if self.classes < 2 => Err(Error::Config(format!(
                "choice task needs at least 2 candidates, got {}",
                self.classes
            ))),
            TaskKind::Choice
                if self.classes > CHOICE_PATTERNS * (CHOICE_PATTERNS - 1) =>
            {
                Err(Error::Config(format!(
                    "choice task supports at most {} candidates",
                    CHOICE_PATTERNS * (CHOICE_PATTERNS - 1)
                )))
            }
            TaskKind::Number if self.classes != MAX_COUNT as usize + 1 => Err(Error::Config(
                format!("count task has {} answer values", MAX_COUNT + 1),
            )),
            _ => Ok(()),
        }
    }
}

/// Rows of the Sylvester Hadamard matrix of order `n` (a power of two).
pub fn hadamard(n: usize) -> Vec<Vec<f64>> {
    assert!(n.is_power_of_two());
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

/// Per-sample random stream; train and test draw from disjoint streams.
fn sample_rng(seed: u64, test: bool, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((test as u64) << 40) | index as u64);
    rng
}

struct Draw<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SynthConfig,
}

impl Draw<'_> {
    fn len(&mut self, [lo, hi]: [usize; 2]) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    fn noise(&mut self, rows: usize) -> Vec<Vec<f64>> {
        let (d, s) = (self.cfg.dim, self.cfg.noise);
        (0..rows)
            .map(|_| {
                (0..d)
                    .map(|_| if s > 0.0 { self.rng.gen_range(-s..=s) } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

fn add_into(row: &mut [f64], offset: usize, pattern: &[f64]) {
    for (r, p) in row[offset..].iter_mut().zip(pattern) {
        *r += p;
    }
}

/// Matrix with every entry rounded to `f32`, so files reload bit-identically.
fn matrix(rows: Vec<Vec<f64>>) -> Tensor {
    let t = Tensor::from_rows(&rows).expect("rectangular rows");
    super::tensor_file::quantize_f32(&t)
}

fn generate<F>(task: TaskKind, cfg: &SynthConfig, one: F) -> Result<Dataset>
where
    F: Fn(&mut Draw) -> Sample + Sync,
{
    cfg.validate(task)?;
    let split = |test: bool, n: usize| -> Vec<Sample> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut d = Draw {
                    rng: sample_rng(cfg.seed, test, i),
                    cfg,
                };
                one(&mut d)
            })
            .collect()
    };
    let ds = Dataset {
        task,
        classes: cfg.classes,
        dims: InputDims::uniform(cfg.dim),
        train: split(false, cfg.train),
        test: split(true, cfg.test),
    };
    ds.validate()?;
    Ok(ds)
}

/// Word task: one caption row carries a Hadamard code of the answer class in
/// dims `[0,16)`; every caption row carries its slot marker in `[16,32)`; the
/// question's last row repeats the planted row's slot marker; video is noise.
pub fn gen_word_task(cfg: &SynthConfig) -> Result<Dataset> {
    let codes = hadamard(BLOCK);
    generate(TaskKind::Word, cfg, |d| {
        let n_c = d.len(d.cfg.sizes.captions);
        let n_v = d.len(d.cfg.sizes.frames);
        let n_q = d.len(d.cfg.sizes.question);
        let answer = d.rng.gen_range(0..d.cfg.classes);
        let planted = d.rng.gen_range(0..n_c);

        let mut captions = d.noise(n_c);
        for (i, row) in captions.iter_mut().enumerate() {
            row[BLOCK + i] += 1.0;
        }
        add_into(&mut captions[planted], 0, &codes[answer]);
        let mut question = d.noise(n_q);
        question[n_q - 1][BLOCK + planted] += 1.0;
        let video: Vec<Vec<f64>> = (0..n_v)
            .map(|_| (0..d.cfg.dim).map(|_| d.rng.gen_range(-1.0..=1.0)).collect())
            .collect();

        Sample {
            captions: Captions::Features(matrix(captions)),
            video: Video::Features(matrix(video)),
            question: Question::Features(matrix(question)),
            candidates: Vec::new(),
            answer: answer as u32,
            planted_row: Some(planted),
        }
    })
}

fn count_patterns(dim: usize) -> (Vec<f64>, Vec<f64>) {
    let h = hadamard(dim);
    (h[1].clone(), h[2].clone())
}

/// Count task: `answer` frames carry the event pattern, the rest a background
/// pattern; caption row 0 holds a thermometer code of the count.
pub fn gen_count_task(cfg: &SynthConfig) -> Result<Dataset> {
    let (event, background) = count_patterns(cfg.dim);
    generate(TaskKind::Number, cfg, |d| {
        let n_c = d.len(d.cfg.sizes.captions);
        let n_v = d.len(d.cfg.sizes.frames);
        let n_q = d.len(d.cfg.sizes.question);
        let answer = d.rng.gen_range(0..=MAX_COUNT) as usize;
        let events = rand::seq::index::sample(&mut d.rng, n_v, answer);
        let mut is_event = vec![false; n_v];
        for i in events.iter() {
            is_event[i] = true;
        }

        let mut video = d.noise(n_v);
        for (row, &e) in video.iter_mut().zip(&is_event) {
            add_into(row, 0, if e { &event } else { &background });
        }
        let mut captions = d.noise(n_c);
        for v in &mut captions[0][..answer] {
            *v += 1.0;
        }
        let question = d.noise(n_q);

        Sample {
            captions: Captions::Features(matrix(captions)),
            video: Video::Features(matrix(video)),
            question: Question::Features(matrix(question)),
            candidates: Vec::new(),
            answer: answer as u32,
            planted_row: Some(0),
        }
    })
}

fn choice_patterns(dim: usize) -> Vec<Vec<f64>> {
    hadamard(dim)[1..=CHOICE_PATTERNS].to_vec()
}

/// Choice task: the first half of the clip shows pattern `a`, the second half
/// pattern `b`; captions 0 and 1 mention `a` and `b`. Each candidate is two
/// rows `[p_x; p_y]`; the correct one is `(a, b)` and distractors are other
/// ordered pattern pairs.
pub fn gen_choice_task(cfg: &SynthConfig) -> Result<Dataset> {
    let patterns = choice_patterns(cfg.dim);
    generate(TaskKind::Choice, cfg, |d| {
        let n_c = d.len(d.cfg.sizes.captions);
        let n_v = d.len(d.cfg.sizes.frames);
        let n_q = d.len(d.cfg.sizes.question);
        let k = d.cfg.classes;
        let pairs: Vec<(usize, usize)> = (0..CHOICE_PATTERNS)
            .flat_map(|a| (0..CHOICE_PATTERNS).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .collect();
        let chosen = rand::seq::index::sample(&mut d.rng, pairs.len(), k);
        let (a, b) = pairs[chosen.index(0)];
        let answer = d.rng.gen_range(0..k);
        let mut order: Vec<(usize, usize)> = chosen.iter().skip(1).map(|i| pairs[i]).collect();
        order.insert(answer, (a, b));

        let mut video = d.noise(n_v);
        let half = n_v / 2;
        for (i, row) in video.iter_mut().enumerate() {
            add_into(row, 0, &patterns[if i < half { a } else { b }]);
        }
        let mut captions = d.noise(n_c);
        add_into(&mut captions[0], 0, &patterns[a]);
        add_into(&mut captions[1], 0, &patterns[b]);
        let question = d.noise(n_q);
        let candidates = order
            .iter()
            .map(|&(x, y)| {
                let mut rows = d.noise(2);
                add_into(&mut rows[0], 0, &patterns[x]);
                add_into(&mut rows[1], 0, &patterns[y]);
                Question::Features(matrix(rows))
            })
            .collect();

        Sample {
            captions: Captions::Features(matrix(captions)),
            video: Video::Features(matrix(video)),
            question: Question::Features(matrix(question)),
            candidates,
            answer: answer as u32,
            planted_row: None,
        }
    })
}

pub fn generate_task(task: TaskKind, cfg: &SynthConfig) -> Result<Dataset> {
    match task {
        TaskKind::Word => gen_word_task(cfg),
        TaskKind::Number => gen_count_task(cfg),
        TaskKind::Choice => gen_choice_task(cfg),
    }
}

fn features(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    (0..t.rows()).map(move |i| t.row(i))
}

fn nearest(row: &[f64], patterns: &[Vec<f64>]) -> usize {
    let scores: Vec<f64> = patterns
        .iter()
        .map(|p| p.iter().zip(row).map(|(a, b)| a * b).sum())
        .collect();
    argmax(&scores)
}

/// Closed-form decoder of the planted signal; returns the predicted answer.
pub fn oracle_answer(task: TaskKind, sample: &Sample) -> Result<u32> {
    let (Captions::Features(c), Video::Features(v)) = (&sample.captions, &sample.video) else {
        return Err(Error::Input("oracle needs feature-mode samples".into()));
    };
    let dim = c.cols();
    Ok(match task {
        TaskKind::Word => {
            let row = sample
                .planted_row
                .ok_or_else(|| Error::Input("word sample without planted row".into()))?;
            nearest(&c.row(row)[..BLOCK], &hadamard(BLOCK)) as u32
        }
        TaskKind::Number => {
            let (event, background) = count_patterns(dim);
            let pats = [event, background];
            features(v).filter(|f| nearest(f, &pats) == 0).count() as u32
        }
        TaskKind::Choice => {
            let pats = choice_patterns(dim);
            let n = v.rows();
            let mean = |rows: std::ops::Range<usize>| -> Vec<f64> {
                let len = rows.len() as f64;
                let mut m = vec![0.0; dim];
                for i in rows {
                    for (o, x) in m.iter_mut().zip(v.row(i)) {
                        *o += x / len;
                    }
                }
                m
            };
            let a = nearest(&mean(0..n / 2), &pats);
            let b = nearest(&mean(n / 2..n), &pats);
            let hit = sample.candidates.iter().position(|cand| match cand {
                Question::Features(t) => {
                    nearest(t.row(0), &pats) == a && nearest(t.row(1), &pats) == b
                }
                Question::Tokens(_) => false,
            });
            hit.unwrap_or(0) as u32
        }
    })
}

/// Fraction of samples the oracle answers correctly.
pub fn oracle_accuracy(task: TaskKind, samples: &[Sample]) -> Result<f64> {
    let mut hits = 0;
    for s in samples {
        hits += (oracle_answer(task, s)? == s.answer) as usize;
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// Pearson chi-square statistic of the answer histogram against a uniform
/// distribution over `classes` values.
pub fn label_chi_square(samples: &[Sample], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for s in samples {
        counts[s.answer as usize] += 1;
    }
    let expected = samples.len() as f64 / classes as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

/// MSE of always predicting the sample mean, i.e. the answers' population
/// variance.
pub fn mean_predictor_mse(samples: &[Sample]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.answer as f64).sum::<f64>() / n;
    samples
        .iter()
        .map(|s| (s.answer as f64 - mean).powi(2))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskKind, noise: f64) -> SynthConfig {
        SynthConfig {
            train: 300,
            test: 50,
            noise,
            ..SynthConfig::desk(task, 5)
        }
    }

    #[test]
    fn hadamard_rows_are_orthogonal() {
        let h = hadamard(8);
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = h[i].iter().zip(&h[j]).map(|(a, b)| a * b).sum();
                assert_eq!(dot, if i == j { 8.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn noiseless_oracles_are_exact() {
        for task in [TaskKind::Word, TaskKind::Number, TaskKind::Choice] {
            let ds = generate_task(task, &small(task, 0.0)).unwrap();
            assert_eq!(oracle_accuracy(task, &ds.train).unwrap(), 1.0, "{task}");
        }
    }

    #[test]
    fn default_noise_oracles_stay_exact() {
        for task in [TaskKind::Word, TaskKind::Number, TaskKind::Choice] {
            let ds = generate_task(task, &small(task, 0.25)).unwrap();
            assert_eq!(oracle_accuracy(task, &ds.train).unwrap(), 1.0, "{task}");
        }
    }

    #[test]
    fn word_labels_are_uniform() {
        let cfg = SynthConfig {
            test: 0,
            ..SynthConfig::desk(TaskKind::Word, 11)
        };
        let ds = gen_word_task(&cfg).unwrap();
        // 0.999 quantile of chi-square with 3 degrees of freedom.
        assert!(label_chi_square(&ds.train, 4) < 16.27);
    }

    #[test]
    fn count_extremes_and_mean_predictor() {
        let ds = gen_count_task(&small(TaskKind::Number, 0.0)).unwrap();
        let zero = ds.train.iter().find(|s| s.answer == 0).unwrap();
        assert_eq!(oracle_answer(TaskKind::Number, zero).unwrap(), 0);
        let ten = ds.train.iter().find(|s| s.answer == 10).unwrap();
        assert_eq!(oracle_answer(TaskKind::Number, ten).unwrap(), 10);

        let answers: Vec<f64> = ds.train.iter().map(|s| s.answer as f64).collect();
        let mean = answers.iter().sum::<f64>() / answers.len() as f64;
        let direct = answers.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / answers.len() as f64;
        assert!((mean_predictor_mse(&ds.train) - direct).abs() < 1e-12);
        // Uniform over 0..=10 has variance 10.
        assert!((direct - 10.0).abs() < 1.5);
    }

    #[test]
    fn choice_has_five_distinct_candidates() {
        let ds = gen_choice_task(&small(TaskKind::Choice, 0.0)).unwrap();
        assert_eq!(ds.classes, 5);
        for s in &ds.train {
            assert_eq!(s.candidates.len(), 5);
            let keys: std::collections::BTreeSet<Vec<u64>> = s
                .candidates
                .iter()
                .map(|c| match c {
                    Question::Features(t) => t.data().iter().map(|v| v.to_bits()).collect(),
                    Question::Tokens(_) => unreachable!(),
                })
                .collect();
            assert_eq!(keys.len(), 5);
        }
        assert!(label_chi_square(&ds.train, 5) < 18.47);
    }

    #[test]
    fn shuffled_labels_break_the_oracle() {
        let ds = gen_choice_task(&small(TaskKind::Choice, 0.0)).unwrap();
        let shuffled = ds.with_shuffled_labels(3);
        let acc = oracle_accuracy(TaskKind::Choice, &shuffled.train).unwrap();
        assert!((acc - 0.2).abs() < 0.08, "{acc}");
    }

    #[test]
    fn same_seed_same_data_different_seed_different_data() {
        let cfg = small(TaskKind::Word, 0.25);
        assert_eq!(gen_word_task(&cfg).unwrap(), gen_word_task(&cfg).unwrap());
        let other = SynthConfig { seed: 6, ..cfg };
        assert_ne!(gen_word_task(&small(TaskKind::Word, 0.25)).unwrap(), gen_word_task(&other).unwrap());
    }

    #[test]
    fn sizes_parse_and_validate() {
        let s: SizeRanges = "3-8, 10-16,4-10".parse().unwrap();
        assert_eq!(s.frames, [10, 16]);
        assert!("3-8,8-16".parse::<SizeRanges>().is_err());
        assert!("a-b,1-2,3-4".parse::<SizeRanges>().is_err());
        let cfg = SynthConfig {
            sizes: "3-8,4-16,4-10".parse().unwrap(),
            ..small(TaskKind::Number, 0.0)
        };
        assert!(matches!(gen_count_task(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            classes: 1,
            ..small(TaskKind::Word, 0.0)
        };
        assert!(gen_word_task(&cfg).is_err());
    }

    #[test]
    fn generated_lengths_respect_ranges() {
        let ds = gen_word_task(&small(TaskKind::Word, 0.1)).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert!((3..=8).contains(&s.captions.len()));
            assert!((8..=16).contains(&s.video.frames()));
            assert!((4..=10).contains(&s.question.len()));
        }
    }
}
