//! Cross-modal attention and the reasoning block that mixes the other two
//! modalities into each graph between graph layers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numkit::{ParamId, ParamSet, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct CamOutput {
    pub attended: Var,
    pub weights: Var,
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d) V` on projected inputs.
pub fn cam(tape: &mut Tape, queries: Var, keys: Var, values: Var) -> Result<CamOutput> {
    let (ks, vs) = (tape.shape(keys).to_vec(), tape.shape(values).to_vec());
    if tape.value(keys).rows() != tape.value(values).rows() {
        return Err(Error::shape("cam keys/values", &ks, &vs));
    }
    let d = tape.value(keys).cols() as f64;
    let scores = tape.matmul_nt(queries, keys)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let attended = tape.matmul(weights, values)?;
    Ok(CamOutput { attended, weights })
}

/// Key and value projections of one source modality.
#[derive(Clone, Copy, Debug)]
pub struct SourceProjection {
    pub key: Linear,
    pub value: Linear,
}

/// Parameters of the reasoning block for one target modality.
#[derive(Clone, Debug)]
pub struct CrossModalBlock {
    pub query: Linear,
    pub sources: Vec<SourceProjection>,
    pub ff_hidden: Linear,
    pub ff_out: Linear,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl CrossModalBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        source_names: &[&str],
        dim: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let query = Linear::new(params, &format!("{prefix}.w_q"), None, dim, dim, rng)?;
        let mut source = |name: &str, rng: &mut R| -> Result<SourceProjection> {
            Ok(SourceProjection {
                key: Linear::new(params, &format!("{prefix}.w_k.{name}"), None, dim, dim, rng)?,
                value: Linear::new(params, &format!("{prefix}.w_v.{name}"), None, dim, dim, rng)?,
            })
        };
        if source_names.is_empty() {
            return Err(Error::Config("cross-modal block needs a source".into()));
        }
        let sources = source_names
            .iter()
            .map(|n| source(n, rng))
            .collect::<Result<Vec<_>>>()?;
        let joint = (sources.len() + 1) * dim;
        let ff_hidden = Linear::new(
            params,
            &format!("{prefix}.ff1.w"),
            Some(&format!("{prefix}.ff1.b")),
            dim,
            joint,
            rng,
        )?;
        let ff_out = Linear::new(
            params,
            &format!("{prefix}.ff2.w"),
            Some(&format!("{prefix}.ff2.b")),
            dim,
            dim,
            rng,
        )?;
        let norm = LayerNorm::new(params, &format!("{prefix}.ln"), dim, eps)?;
        Ok(Self {
            query,
            sources,
            ff_hidden,
            ff_out,
            norm,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.query.ids();
        for s in &self.sources {
            ids.extend(s.key.ids());
            ids.extend(s.value.ids());
        }
        ids.extend(self.ff_hidden.ids());
        ids.extend(self.ff_out.ids());
        ids.extend([self.norm.gain, self.norm.bias]);
        ids
    }

    /// `layer_norm(FF([cam_a ‖ cam_b ‖ target]) + target)`, with one CAM per
    /// source in order.
    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        target: Var,
        sources: &[Var],
    ) -> Result<(Var, Vec<CamOutput>)> {
        if sources.len() != self.sources.len() {
            return Err(Error::Contract(format!(
                "cross-modal block built for {} sources, given {}",
                self.sources.len(),
                sources.len()
            )));
        }
        for &v in std::iter::once(&target).chain(sources) {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.dim {
                return Err(Error::shape("cross-modal block input", s, &[self.dim]));
            }
        }
        let q = self.query.apply(tape, params, target)?;
        let mut cams = Vec::with_capacity(sources.len());
        for (proj, &src) in self.sources.iter().zip(sources) {
            let k = proj.key.apply(tape, params, src)?;
            let v = proj.value.apply(tape, params, src)?;
            cams.push(cam(tape, q, k, v)?);
        }
        let mut parts: Vec<Var> = cams.iter().map(|c| c.attended).collect();
        parts.push(target);
        let joint = tape.concat(&parts, 1)?;
        let h = self.ff_hidden.apply(tape, params, joint)?;
        let h = tape.relu(h)?;
        let h = self.ff_out.apply(tape, params, h)?;
        let residual = tape.add(h, target)?;
        let out = self.norm.apply(tape, params, residual)?;
        Ok((out, cams))
    }
}

/// One reasoning round over all graphs.
///
/// Source orders: video attends to (question, caption), caption to
/// (video, question), question to (video, caption). Without a caption graph
/// video and question attend only to each other.
#[derive(Clone, Debug)]
pub struct CrossModalRound {
    pub caption: Option<CrossModalBlock>,
    pub video: CrossModalBlock,
    pub question: CrossModalBlock,
}

/// Updated node features of one round.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub captions: Option<Var>,
    pub video: Var,
    pub question: Var,
    /// Attention weights of every CAM evaluated in the round.
    pub cam_weights: Vec<Var>,
}

impl CrossModalRound {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        eps: f64,
        with_caption: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut block = |target: &str, sources: &[&str], rng: &mut R| {
            CrossModalBlock::new(params, &format!("{prefix}.{target}"), sources, dim, eps, rng)
        };
        if with_caption {
            let video = block("video", &["question", "caption"], rng)?;
            let caption = block("caption", &["video", "question"], rng)?;
            let question = block("question", &["video", "caption"], rng)?;
            Ok(Self {
                caption: Some(caption),
                video,
                question,
            })
        } else {
            let video = block("video", &["question"], rng)?;
            let question = block("question", &["video"], rng)?;
            Ok(Self {
                caption: None,
                video,
                question,
            })
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.video.param_ids();
        ids.extend(self.caption.iter().flat_map(CrossModalBlock::param_ids));
        ids.extend(self.question.param_ids());
        ids
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        captions: Option<Var>,
        video: Var,
        question: Var,
    ) -> Result<RoundOutput> {
        match (captions, &self.caption) {
            (Some(c), Some(block)) => {
                let (v, cv) = self.video.apply(tape, params, video, &[question, c])?;
                let (c_out, cc) = block.apply(tape, params, c, &[video, question])?;
                let (q, cq) = self.question.apply(tape, params, question, &[video, c])?;
                Ok(RoundOutput {
                    captions: Some(c_out),
                    video: v,
                    question: q,
                    cam_weights: [cv, cc, cq].iter().flatten().map(|o| o.weights).collect(),
                })
            }
            (None, None) => {
                let (v, cv) = self.video.apply(tape, params, video, &[question])?;
                let (q, cq) = self.question.apply(tape, params, question, &[video])?;
                Ok(RoundOutput {
                    captions: None,
                    video: v,
                    question: q,
                    cam_weights: [cv, cq].iter().flatten().map(|o| o.weights).collect(),
                })
            }
            _ => Err(Error::Contract(
                "caption features must be given exactly when the round has a caption block"
                    .into(),
            )),
        }
    }
}
