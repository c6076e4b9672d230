//! Question-guided multi-step fusion under an LSTM controller, and the final
//! answer representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numkit::{ParamId, ParamSet, Tape, Tensor, Var};

/// Additive attention over the rows of a feature matrix, conditioned on the
/// question state and the controller state.
#[derive(Clone, Copy, Debug)]
pub struct TemporalAttention {
    pub score: Linear,
    /// Question term; absent when attention is not question guided.
    pub w_q: Option<Linear>,
    pub w_h: Linear,
    /// Feature projection; carries the shared bias.
    pub w_feat: Linear,
    pub dim: usize,
}

impl TemporalAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        question_guided: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let score = Linear::new(params, &format!("{prefix}.w"), None, 1, dim, rng)?;
        let w_q = if question_guided {
            Some(Linear::new(params, &format!("{prefix}.w_q"), None, dim, dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            score,
            w_q,
            w_h: Linear::new(params, &format!("{prefix}.w_h"), None, dim, dim, rng)?,
            w_feat: Linear::new(
                params,
                &format!("{prefix}.w_feat"),
                Some(&format!("{prefix}.b")),
                dim,
                dim,
                rng,
            )?,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.score.ids();
        ids.extend(self.w_q.iter().flat_map(Linear::ids));
        ids.extend(self.w_h.ids());
        ids.extend(self.w_feat.ids());
        ids
    }

    /// Returns the attention row (`1 × N`) and the pooled features (`1 × d`).
    pub fn attend(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        feat: Var,
        q_last: Var,
        h_prev: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(feat).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("temporal attention", &shape, &[self.dim]));
        }
        let n = shape[0];
        let mut cond = self.w_h.apply(tape, params, h_prev)?;
        if let Some(w_q) = &self.w_q {
            let q = w_q.apply(tape, params, q_last)?;
            cond = tape.add(cond, q)?;
        }
        let proj = self.w_feat.apply(tape, params, feat)?;
        let pre = tape.add_row(proj, cond)?;
        let act = tape.tanh(pre)?;
        let logits = self.score.apply(tape, params, act)?;
        let logits = tape.reshape(logits, &[1, n])?;
        let att = tape.softmax_rows(logits)?;
        let pooled = tape.matmul(att, feat)?;
        Ok((att, pooled))
    }
}

/// Learned per-step weighting of the pooled modality vectors.
///
/// Modalities are ordered caption, video, question; with the caption absent
/// only video and question are mixed.
#[derive(Clone, Debug)]
pub struct ModalityMix {
    /// `m × m·d` map from the joint tanh space to one logit per modality.
    pub w_alpha: Linear,
    pub alpha_proj: Vec<Linear>,
    /// `m·d × d` controller term with the `m·d` bias.
    pub alpha_h: Linear,
    pub x_proj: Vec<Linear>,
    /// Controller term of `x_t`, with bias `b^x`.
    pub x_h: Linear,
    pub dim: usize,
}

impl ModalityMix {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        with_caption: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let names: &[&str] = if with_caption { &["c", "v", "q"] } else { &["v", "q"] };
        let m = names.len();
        let mut alpha_proj = Vec::with_capacity(m);
        for n in names {
            let name = format!("{prefix}.alpha.w_{n}");
            alpha_proj.push(Linear::new(params, &name, None, dim, dim, rng)?);
        }
        let alpha_h = Linear::new(
            params,
            &format!("{prefix}.alpha.w_h"),
            Some(&format!("{prefix}.alpha.b")),
            m * dim,
            dim,
            rng,
        )?;
        let w_alpha = Linear::new(params, &format!("{prefix}.alpha.w"), None, m, m * dim, rng)?;
        let mut x_proj = Vec::with_capacity(m);
        for n in names {
            let name = format!("{prefix}.x.w_{n}");
            x_proj.push(Linear::new(params, &name, None, dim, dim, rng)?);
        }
        let x_h = Linear::new(
            params,
            &format!("{prefix}.x.w_h"),
            Some(&format!("{prefix}.x.b")),
            dim,
            dim,
            rng,
        )?;
        Ok(Self {
            w_alpha,
            alpha_proj,
            alpha_h,
            x_proj,
            x_h,
            dim,
        })
    }

    pub fn modalities(&self) -> usize {
        self.alpha_proj.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(&self.w_alpha)
            .chain(&self.alpha_proj)
            .chain(std::iter::once(&self.alpha_h))
            .chain(&self.x_proj)
            .chain(std::iter::once(&self.x_h))
            .flat_map(Linear::ids)
            .collect()
    }

    /// Returns `α` (`1 × m`) and `x_t` (`1 × d`) for pooled vectors given in
    /// modality order.
    pub fn mix(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pooled: &[Var],
        h_prev: Var,
    ) -> Result<(Var, Var)> {
        if pooled.len() != self.modalities() {
            return Err(Error::Contract(format!(
                "modality mix built for {} modalities, given {}",
                self.modalities(),
                pooled.len()
            )));
        }
        let mut projected = Vec::with_capacity(pooled.len());
        for (lin, &p) in self.alpha_proj.iter().zip(pooled) {
            projected.push(lin.apply(tape, params, p)?);
        }
        let joint = tape.concat(&projected, 1)?;
        let h_term = self.alpha_h.apply(tape, params, h_prev)?;
        let pre = tape.add(joint, h_term)?;
        let act = tape.tanh(pre)?;
        let logits = self.w_alpha.apply(tape, params, act)?;
        let alpha = tape.softmax_rows(logits)?;

        let mut acc = self.x_h.apply(tape, params, h_prev)?;
        for (i, (lin, &p)) in self.x_proj.iter().zip(pooled).enumerate() {
            let proj = lin.apply(tape, params, p)?;
            let a = tape.element(alpha, i)?;
            let weighted = tape.scale_by(proj, a)?;
            acc = tape.add(acc, weighted)?;
        }
        let x = tape.tanh(acc)?;
        Ok((alpha, x))
    }
}

/// Standard LSTM cell; gates are packed `[i, f, g, o]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            input: Linear::new(
                params,
                &format!("{prefix}.w"),
                Some(&format!("{prefix}.b")),
                4 * dim,
                input_dim,
                rng,
            )?,
            recurrent: Linear::new(params, &format!("{prefix}.u"), None, 4 * dim, dim, rng)?,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.input.ids(), self.recurrent.ids()].concat()
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let d = self.dim;
        let xi = self.input.apply(tape, params, x)?;
        let hh = self.recurrent.apply(tape, params, h)?;
        let gates = tape.add(xi, hh)?;
        let i = tape.slice_cols(gates, 0, d)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, d, d)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * d, d)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * d, d)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// How the reasoned modalities are combined into `h_final`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// The full multi-step, question-guided loop.
    QuestionGuided,
    /// The same loop without the question term in the step attention.
    Unguided,
    /// One-shot mean pooling of each modality, no controller.
    MeanPool,
}

/// Tape handles of one fusion step.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub att_c: Option<Var>,
    pub att_v: Var,
    pub att_q: Var,
    pub alpha: Var,
    pub h: Var,
}

#[derive(Clone, Debug, Default)]
pub struct FusionTrace {
    pub steps: Vec<StepTrace>,
}

/// Numeric attention data of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub steps: Vec<StepWeights>,
    pub final_att_c: Option<Vec<f64>>,
    pub final_att_v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepWeights {
    pub att_c: Option<Vec<f64>>,
    pub att_v: Vec<f64>,
    pub att_q: Vec<f64>,
    /// Always `[caption, video, question]`; an absent caption has weight 0.
    pub alpha: [f64; 3],
    pub h: Vec<f64>,
}

impl FusionTrace {
    pub fn weights(&self, tape: &Tape) -> Vec<StepWeights> {
        let data = |v: Var| tape.value(v).data().to_vec();
        self.steps
            .iter()
            .map(|s| {
                let a = data(s.alpha);
                let alpha = match s.att_c {
                    Some(_) => [a[0], a[1], a[2]],
                    None => [0.0, a[0], a[1]],
                };
                StepWeights {
                    att_c: s.att_c.map(data),
                    att_v: data(s.att_v),
                    att_q: data(s.att_q),
                    alpha,
                    h: data(s.h),
                }
            })
            .collect()
    }
}

/// Output of the final temporal attention.
#[derive(Clone, Copy, Debug)]
pub struct FinalRepresentation {
    /// `1 × 3d`: `[pooled caption ‖ pooled video ‖ h_final]`.
    pub s_a: Var,
    pub att_c: Option<Var>,
    pub att_v: Var,
}

/// The multi-step attend, mix and update loop.
#[derive(Clone, Debug)]
pub struct FusionLoop {
    pub caption: Option<TemporalAttention>,
    pub video: TemporalAttention,
    pub question: TemporalAttention,
    pub mix: ModalityMix,
    pub controller: LstmCell,
    pub steps: usize,
}

/// `tanh(Σ_m W_m mean(m̂) + b)`.
#[derive(Clone, Debug)]
pub struct MeanPoolFusion {
    /// One projection per present modality; the video one carries the bias.
    pub proj: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub enum Fuser {
    Loop(FusionLoop),
    MeanPool(MeanPoolFusion),
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub fuser: Fuser,
    pub final_caption: Option<TemporalAttention>,
    pub final_video: TemporalAttention,
    pub dim: usize,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        dim: usize,
        steps: usize,
        mode: FusionMode,
        with_caption: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("fusion needs at least one step".into()));
        }
        let fuser = match mode {
            FusionMode::MeanPool => {
                let names: &[&str] = if with_caption { &["c", "v", "q"] } else { &["v", "q"] };
                let mut proj = Vec::new();
                for n in names {
                    let bias = (*n == "v").then(|| "fusion.pool.b".to_string());
                    proj.push(Linear::new(
                        params,
                        &format!("fusion.pool.w_{n}"),
                        bias.as_deref(),
                        dim,
                        dim,
                        rng,
                    )?);
                }
                Fuser::MeanPool(MeanPoolFusion { proj })
            }
            FusionMode::QuestionGuided | FusionMode::Unguided => {
                let guided = mode == FusionMode::QuestionGuided;
                let caption = if with_caption {
                    Some(TemporalAttention::new(params, "fusion.att_c", dim, guided, rng)?)
                } else {
                    None
                };
                Fuser::Loop(FusionLoop {
                    caption,
                    video: TemporalAttention::new(params, "fusion.att_v", dim, guided, rng)?,
                    question: TemporalAttention::new(params, "fusion.att_q", dim, guided, rng)?,
                    mix: ModalityMix::new(params, "fusion.mix", dim, with_caption, rng)?,
                    controller: LstmCell::new(params, "fusion.lstm", dim, dim, rng)?,
                    steps,
                })
            }
        };
        let final_caption = if with_caption {
            Some(TemporalAttention::new(params, "final.att_c", dim, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            fuser,
            final_caption,
            final_video: TemporalAttention::new(params, "final.att_v", dim, true, rng)?,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = match &self.fuser {
            Fuser::Loop(l) => {
                let mut ids: Vec<ParamId> =
                    l.caption.iter().flat_map(TemporalAttention::param_ids).collect();
                ids.extend(l.video.param_ids());
                ids.extend(l.question.param_ids());
                ids.extend(l.mix.param_ids());
                ids.extend(l.controller.param_ids());
                ids
            }
            Fuser::MeanPool(p) => p.proj.iter().flat_map(Linear::ids).collect(),
        };
        ids.extend(self.final_caption.iter().flat_map(TemporalAttention::param_ids));
        ids.extend(self.final_video.param_ids());
        ids
    }

    fn check_caption(&self, captions: Option<Var>) -> Result<()> {
        if captions.is_some() != self.final_caption.is_some() {
            return Err(Error::Contract(
                "caption features must be given exactly when the model has a caption branch"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Runs the fusion loop from a zero controller state.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        captions: Option<Var>,
        video: Var,
        question: Var,
        q_last: Var,
    ) -> Result<(Var, FusionTrace)> {
        self.check_caption(captions)?;
        let l = match &self.fuser {
            Fuser::Loop(l) => l,
            Fuser::MeanPool(p) => {
                let mut acc = None;
                for (lin, m) in p.proj.iter().zip(captions.into_iter().chain([video, question])) {
                    let mean = tape.mean_rows(m)?;
                    let proj = lin.apply(tape, params, mean)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, proj)?,
                        None => proj,
                    });
                }
                let h = tape.tanh(acc.expect("at least two modalities"))?;
                return Ok((h, FusionTrace::default()));
            }
        };
        let mut h = tape.constant(Tensor::zeros(&[1, self.dim]));
        let mut c = h;
        let mut trace = FusionTrace::default();
        for _ in 0..l.steps {
            let mut pooled = Vec::with_capacity(3);
            let att_c = match (captions, &l.caption) {
                (Some(cs), Some(att)) => {
                    let (a, p) = att.attend(tape, params, cs, q_last, h)?;
                    pooled.push(p);
                    Some(a)
                }
                _ => None,
            };
            let (att_v, v) = l.video.attend(tape, params, video, q_last, h)?;
            let (att_q, q) = l.question.attend(tape, params, question, q_last, h)?;
            pooled.extend([v, q]);
            let (alpha, x) = l.mix.mix(tape, params, &pooled, h)?;
            (h, c) = l.controller.step(tape, params, x, h, c)?;
            trace.steps.push(StepTrace {
                att_c,
                att_v,
                att_q,
                alpha,
                h,
            });
        }
        Ok((h, trace))
    }

    /// Temporal attention over the contextual caption and video features,
    /// then `[pooled_c ‖ pooled_v ‖ h_final]`. A missing caption pools to
    /// zeros.
    pub fn final_representation(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        captions: Option<Var>,
        video: Var,
        q_last: Var,
        h_final: Var,
    ) -> Result<FinalRepresentation> {
        self.check_caption(captions)?;
        let (att_c, pooled_c) = match (captions, &self.final_caption) {
            (Some(cs), Some(att)) => {
                let (a, p) = att.attend(tape, params, cs, q_last, h_final)?;
                (Some(a), p)
            }
            _ => (None, tape.constant(Tensor::zeros(&[1, self.dim]))),
        };
        let (att_v, pooled_v) = self
            .final_video
            .attend(tape, params, video, q_last, h_final)?;
        let s_a = tape.concat(&[pooled_c, pooled_v, h_final], 1)?;
        Ok(FinalRepresentation { s_a, att_c, att_v })
    }
}
