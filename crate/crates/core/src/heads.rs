//! Answer predictors and their losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numkit::{ParamId, ParamSet, Tape, Var};

/// Largest count the number head can predict.
pub const MAX_COUNT: u32 = 10;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rounds half away from zero, then clamps to `[0, MAX_COUNT]`.
pub fn round_count(raw: f64) -> u32 {
    if raw.is_nan() {
        return 0;
    }
    raw.round().clamp(0.0, MAX_COUNT as f64) as u32
}

#[derive(Clone, Copy, Debug)]
pub struct WordOutput {
    pub logits: Var,
    pub loss: Option<Var>,
    pub prediction: usize,
}

/// Softmax classifier over a fixed answer set.
#[derive(Clone, Copy, Debug)]
pub struct WordHead {
    pub linear: Linear,
    pub classes: usize,
}

impl WordHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "word head needs at least 2 classes, got {classes}"
            )));
        }
        let linear = Linear::new(
            params,
            "head.word.w",
            Some("head.word.b"),
            classes,
            input_dim,
            rng,
        )?;
        Ok(Self { linear, classes })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.linear.ids()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        s_a: Var,
        target: Option<usize>,
    ) -> Result<WordOutput> {
        let logits = self.linear.apply(tape, params, s_a)?;
        let loss = match target {
            Some(t) if t >= self.classes => {
                return Err(Error::Input(format!(
                    "answer class {t} outside 0..{}",
                    self.classes
                )))
            }
            Some(t) => Some(tape.softmax_cross_entropy(logits, t)?),
            None => None,
        };
        let prediction = argmax(tape.value(logits).data());
        Ok(WordOutput {
            logits,
            loss,
            prediction,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NumberOutput {
    pub raw: Var,
    pub loss: Option<Var>,
    pub prediction: u32,
}

/// Scalar regressor for counts in `[0, MAX_COUNT]`.
#[derive(Clone, Copy, Debug)]
pub struct NumberHead {
    pub linear: Linear,
}

impl NumberHead {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, input_dim: usize, rng: &mut R) -> Result<Self> {
        let linear = Linear::new(
            params,
            "head.number.w",
            Some("head.number.b"),
            1,
            input_dim,
            rng,
        )?;
        Ok(Self { linear })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.linear.ids()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        s_a: Var,
        target: Option<u32>,
    ) -> Result<NumberOutput> {
        let raw = self.linear.apply(tape, params, s_a)?;
        let raw = tape.reshape(raw, &[1])?;
        let loss = match target {
            Some(t) if t > MAX_COUNT => {
                return Err(Error::Input(format!(
                    "count {t} outside 0..={MAX_COUNT}"
                )))
            }
            Some(t) => {
                let diff = tape.add_scalar(raw, -(t as f64))?;
                Some(tape.mul(diff, diff)?)
            }
            None => None,
        };
        let prediction = round_count(tape.value(raw).item());
        Ok(NumberOutput {
            raw,
            loss,
            prediction,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChoiceOutput {
    /// `K × 1` candidate scores.
    pub scores: Var,
    pub loss: Option<Var>,
    pub prediction: usize,
}

/// Shared scoring affine over candidate representations, trained with the
/// pairwise hinge loss.
#[derive(Clone, Copy, Debug)]
pub struct ChoiceHead {
    pub linear: Linear,
}

impl ChoiceHead {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, input_dim: usize, rng: &mut R) -> Result<Self> {
        let linear = Linear::new(params, "head.choice.w", None, 1, input_dim, rng)?;
        Ok(Self { linear })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.linear.ids()
    }

    /// `reps` holds one `1 × 3d` representation per candidate.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        reps: &[Var],
        correct: Option<usize>,
    ) -> Result<ChoiceOutput> {
        if reps.len() < 2 {
            return Err(Error::Input(format!(
                "choice head needs at least 2 candidates, got {}",
                reps.len()
            )));
        }
        let stacked = tape.concat(reps, 0)?;
        let scores = self.linear.apply(tape, params, stacked)?;
        let loss = match correct {
            Some(p) if p >= reps.len() => {
                return Err(Error::Input(format!(
                    "correct candidate {p} outside 0..{}",
                    reps.len()
                )))
            }
            Some(p) => Some(hinge_loss(tape, scores, p)?),
            None => None,
        };
        let prediction = argmax(tape.value(scores).data());
        Ok(ChoiceOutput {
            scores,
            loss,
            prediction,
        })
    }
}

/// `Σ_{i≠p} max(0, 1 + s_i − s_p)` over a column of scores.
pub fn hinge_loss(tape: &mut Tape, scores: Var, positive: usize) -> Result<Var> {
    let k = tape.value(scores).numel();
    let s_p = tape.element(scores, positive)?;
    let mut terms = Vec::with_capacity(k - 1);
    for i in (0..k).filter(|&i| i != positive) {
        let s_n = tape.element(scores, i)?;
        let gap = tape.sub(s_n, s_p)?;
        let margin = tape.add_scalar(gap, 1.0)?;
        terms.push(tape.relu(margin)?);
    }
    let all = tape.concat(&terms, 0)?;
    tape.sum(all)
}
