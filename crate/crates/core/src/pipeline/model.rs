use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ModelConfig;
use crate::cross_modal::CrossModalRound;
use crate::datagen::{Captions, Question, Sample, TaskKind, Video};
use crate::encoders::{encode_caption_set, EmbeddingTable, Gru, VisualProjection};
use crate::error::{Error, Result};
use crate::fusion::{AttentionTrace, FinalRepresentation, Fusion, FusionTrace};
use crate::graph::GraphLayer;
use crate::heads::{ChoiceHead, NumberHead, WordHead};
use crate::numkit::{ParamId, ParamSet, Tape, Var};

#[derive(Clone, Debug)]
pub enum Head {
    Word(WordHead),
    Number(NumberHead),
    Choice(ChoiceHead),
}

impl Head {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Head::Word(h) => h.param_ids(),
            Head::Number(h) => h.param_ids(),
            Head::Choice(h) => h.param_ids(),
        }
    }
}

/// Graph layers per modality, in layer order.
#[derive(Clone, Debug, Default)]
pub struct ModalityGraphs {
    pub captions: Vec<GraphLayer>,
    pub video: Vec<GraphLayer>,
    pub question: Vec<GraphLayer>,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub embedding: Option<EmbeddingTable>,
    /// Sentence encoder turning caption tokens into `d_c` features.
    pub caption_sentence: Option<Gru>,
    pub visual: Option<VisualProjection>,
    pub caption_context: Option<Gru>,
    pub video_context: Gru,
    pub question_context: Gru,
    pub graphs: ModalityGraphs,
    /// One round per entry of `cross_modal_after`; empty under the no-CMR ablation.
    pub rounds: Vec<CrossModalRound>,
    pub fusion: Fusion,
    pub head: Head,
}

impl Architecture {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.embedding.iter().map(|e| e.table));
        ids.extend(self.caption_sentence.iter().flat_map(Gru::param_ids));
        ids.extend(self.visual.iter().flat_map(VisualProjection::param_ids));
        ids.extend(self.caption_context.iter().flat_map(Gru::param_ids));
        ids.extend(self.video_context.param_ids());
        ids.extend(self.question_context.param_ids());
        for layers in [&self.graphs.captions, &self.graphs.video, &self.graphs.question] {
            ids.extend(layers.iter().flat_map(GraphLayer::param_ids));
        }
        ids.extend(self.rounds.iter().flat_map(CrossModalRound::param_ids));
        ids.extend(self.fusion.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub arch: Architecture,
}

/// Caption and video features after the contextual encoders.
#[derive(Clone, Copy, Debug)]
struct SharedContext {
    captions: Option<Var>,
    video: Var,
}

/// Everything computed for one question (or question ‖ candidate).
#[derive(Clone, Debug)]
pub struct Representation {
    /// Adjacency of every graph layer in evaluation order.
    pub adjacency: Vec<Var>,
    pub cam_weights: Vec<Var>,
    pub fusion: FusionTrace,
    pub last: FinalRepresentation,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub loss: Option<Var>,
    pub prediction: u32,
    /// Raw regression output for the number head.
    pub raw: Option<f64>,
    /// One entry per question variant: a single one, or `K` for the choice task.
    pub representations: Vec<Representation>,
}

/// Serialized attention trace of one sample.
#[derive(Clone, Debug, Serialize)]
pub struct SampleAttention {
    pub task: TaskKind,
    pub prediction: u32,
    pub answer: u32,
    /// Candidate whose trace is reported (the predicted one), choice task only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    #[serde(flatten)]
    pub trace: AttentionTrace,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut ps = ParamSet::new();
        let d = config.hidden;
        let dims = &config.dims;
        let eps = config.layer_norm_eps;
        let with_caption = config.ablation.has_caption();

        let embedding = match dims.vocab {
            Some(vocab) => Some(EmbeddingTable::new(&mut ps, "embedding", vocab, dims.d_q, rng)?),
            None => None,
        };
        let caption_sentence = match (embedding, with_caption) {
            (Some(_), true) => Some(Gru::new(&mut ps, "caption_sentence", dims.d_q, dims.d_c, rng)?),
            _ => None,
        };
        let visual = match dims.raw_video() {
            Some((d_a, d_m)) => Some(VisualProjection::new(
                &mut ps,
                "visual",
                d_a,
                d_m,
                config.visual_hidden(),
                dims.d_v,
                rng,
            )?),
            None => None,
        };
        let caption_context = if with_caption {
            Some(Gru::new(&mut ps, "context.caption_gru", dims.d_c, d, rng)?)
        } else {
            None
        };
        let video_context = Gru::new(&mut ps, "context.video_gru", dims.d_v, d, rng)?;
        let question_context = Gru::new(&mut ps, "context.question_gru", dims.d_q, d, rng)?;

        let mut graphs = ModalityGraphs::default();
        for l in 1..=config.layers {
            if with_caption {
                graphs
                    .captions
                    .push(GraphLayer::new(&mut ps, &format!("graph.caption.{l}"), d, eps, rng)?);
            }
            graphs
                .video
                .push(GraphLayer::new(&mut ps, &format!("graph.video.{l}"), d, eps, rng)?);
            graphs
                .question
                .push(GraphLayer::new(&mut ps, &format!("graph.question.{l}"), d, eps, rng)?);
        }

        let mut rounds = Vec::new();
        if config.ablation.has_cross_modal() {
            for &l in &config.cross_modal_after {
                rounds.push(CrossModalRound::new(
                    &mut ps,
                    &format!("cmr.{l}"),
                    d,
                    eps,
                    with_caption,
                    rng,
                )?);
            }
        }

        let fusion = Fusion::new(
            &mut ps,
            d,
            config.fusion_steps,
            config.ablation.fusion_mode(),
            with_caption,
            rng,
        )?;
        let width = config.representation_width();
        let head = match config.task {
            TaskKind::Word => Head::Word(WordHead::new(&mut ps, width, config.classes, rng)?),
            TaskKind::Number => Head::Number(NumberHead::new(&mut ps, width, rng)?),
            TaskKind::Choice => Head::Choice(ChoiceHead::new(&mut ps, width, rng)?),
        };

        Ok(Self {
            config,
            params: ps,
            arch: Architecture {
                embedding,
                caption_sentence,
                visual,
                caption_context,
                video_context,
                question_context,
                graphs,
                rounds,
                fusion,
                head,
            },
        })
    }

    pub fn check_sample(&self, sample: &Sample) -> Result<()> {
        sample.validate(self.config.task, self.config.classes, &self.config.dims)
    }

    fn shared_context(&self, tape: &mut Tape, ps: &ParamSet, sample: &Sample) -> Result<SharedContext> {
        let arch = &self.arch;
        let captions = match &arch.caption_context {
            None => None,
            Some(gru) => {
                let raw = match (&sample.captions, &arch.embedding, &arch.caption_sentence) {
                    (Captions::Features(t), _, _) => tape.constant(t.clone()),
                    (Captions::Tokens(cs), Some(emb), Some(sentence)) => {
                        encode_caption_set(tape, ps, cs, emb, sentence)?
                    }
                    (Captions::Tokens(_), _, _) => {
                        return Err(Error::Input(
                            "caption tokens given to a model without a vocabulary".into(),
                        ))
                    }
                };
                Some(gru.encode(tape, ps, raw, None)?.0)
            }
        };
        let frames = match (&sample.video, &arch.visual) {
            (Video::Features(t), None) => tape.constant(t.clone()),
            (Video::Raw { appearance, motion }, Some(proj)) => {
                let a = tape.constant(appearance.clone());
                let m = tape.constant(motion.clone());
                proj.project(tape, ps, a, m)?
            }
            (Video::Features(_), Some(_)) => {
                return Err(Error::Input(
                    "model expects raw appearance and motion features".into(),
                ))
            }
            (Video::Raw { .. }, None) => {
                return Err(Error::Input("model expects projected frame features".into()))
            }
        };
        let (video, _) = arch.video_context.encode(tape, ps, frames, None)?;
        Ok(SharedContext { captions, video })
    }

    fn represent(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        shared: SharedContext,
        question: &Question,
    ) -> Result<(Var, Representation)> {
        let arch = &self.arch;
        let words = match (question, &arch.embedding) {
            (Question::Features(t), _) => tape.constant(t.clone()),
            (Question::Tokens(tokens), Some(emb)) => emb.lookup(tape, ps, tokens)?,
            (Question::Tokens(_), None) => {
                return Err(Error::Input(
                    "question tokens given to a model without a vocabulary".into(),
                ))
            }
        };
        let (q1, q_last) = arch.question_context.encode(tape, ps, words, None)?;

        let (mut c, mut v, mut q) = (shared.captions, shared.video, q1);
        let mut rounds = arch.rounds.iter();
        let mut adjacency = Vec::new();
        let mut cam_weights = Vec::new();
        let mut reason = |tape: &mut Tape, layer: &GraphLayer, x: Var| -> Result<Var> {
            let g = layer.adjacency(tape, ps, x)?;
            adjacency.push(g);
            layer.gcn_update(tape, ps, x, g)
        };
        for l in 0..self.config.layers {
            if let Some(cs) = c {
                c = Some(reason(tape, &arch.graphs.captions[l], cs)?);
            }
            v = reason(tape, &arch.graphs.video[l], v)?;
            q = reason(tape, &arch.graphs.question[l], q)?;
            if self.config.cross_modal_after.contains(&(l + 1)) {
                if let Some(round) = rounds.next() {
                    let out = round.apply(tape, ps, c, v, q)?;
                    (c, v, q) = (out.captions, out.video, out.question);
                    cam_weights.extend(out.cam_weights);
                }
            }
        }

        let (h, fusion) = arch.fusion.fuse(tape, ps, c, v, q, q_last)?;
        let last = arch
            .fusion
            .final_representation(tape, ps, shared.captions, shared.video, q_last, h)?;
        Ok((
            last.s_a,
            Representation {
                adjacency,
                cam_weights,
                fusion,
                last,
            },
        ))
    }

    /// Full forward pass. With `with_loss` the head loss against the sample's
    /// answer is attached.
    pub fn forward(&self, tape: &mut Tape, sample: &Sample, with_loss: bool) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.params, sample, with_loss)
    }

    /// [`Model::forward`] with the architecture's parameters read from `ps`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        sample: &Sample,
        with_loss: bool,
    ) -> Result<ForwardOutput> {
        self.check_sample(sample)?;
        let shared = self.shared_context(tape, ps, sample)?;
        match &self.arch.head {
            Head::Word(head) => {
                let (s_a, rep) = self.represent(tape, ps, shared, &sample.question)?;
                let out = head.forward(tape, ps, s_a, with_loss.then_some(sample.answer as usize))?;
                Ok(ForwardOutput {
                    loss: out.loss,
                    prediction: out.prediction as u32,
                    raw: None,
                    representations: vec![rep],
                })
            }
            Head::Number(head) => {
                let (s_a, rep) = self.represent(tape, ps, shared, &sample.question)?;
                let out = head.forward(tape, ps, s_a, with_loss.then_some(sample.answer))?;
                Ok(ForwardOutput {
                    loss: out.loss,
                    prediction: out.prediction,
                    raw: Some(tape.value(out.raw).data()[0]),
                    representations: vec![rep],
                })
            }
            Head::Choice(head) => {
                let mut reps = Vec::with_capacity(sample.candidates.len());
                let mut traces = Vec::with_capacity(sample.candidates.len());
                for cand in &sample.candidates {
                    let joint = sample.question.concat(cand)?;
                    let (s_a, rep) = self.represent(tape, ps, shared, &joint)?;
                    reps.push(s_a);
                    traces.push(rep);
                }
                let out = head.forward(tape, ps, &reps, with_loss.then_some(sample.answer as usize))?;
                Ok(ForwardOutput {
                    loss: out.loss,
                    prediction: out.prediction as u32,
                    raw: None,
                    representations: traces,
                })
            }
        }
    }

    pub fn predict(&self, sample: &Sample) -> Result<u32> {
        let mut tape = Tape::new();
        Ok(self.forward(&mut tape, sample, false)?.prediction)
    }

    /// Loss value and parameter gradients for one sample.
    pub fn sample_gradients(&self, sample: &Sample) -> Result<(f64, crate::numkit::Gradients)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, true)?;
        let loss = out.loss.expect("loss requested");
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        Ok((value, tape.gradients(loss)?))
    }

    pub fn attention(&self, sample: &Sample) -> Result<SampleAttention> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, false)?;
        let (candidate, rep) = match self.config.task {
            TaskKind::Choice => {
                let k = out.prediction as usize;
                (Some(k), &out.representations[k])
            }
            _ => (None, &out.representations[0]),
        };
        let row = |v: Var| tape.value(v).data().to_vec();
        Ok(SampleAttention {
            task: self.config.task,
            prediction: out.prediction,
            answer: sample.answer,
            candidate,
            trace: AttentionTrace {
                steps: rep.fusion.weights(&tape),
                final_att_c: rep.last.att_c.map(row),
                final_att_v: row(rep.last.att_v),
            },
        })
    }
}
