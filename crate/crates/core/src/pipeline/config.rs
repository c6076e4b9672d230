use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, InputDims, TaskKind};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::heads::MAX_COUNT;
use crate::numkit::LAYER_NORM_EPS;

/// Structural ablations of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Drop the caption modality (video and question only).
    #[serde(alias = "vid")]
    Cap,
    /// Skip the cross-modal rounds.
    Cmr,
    /// Replace the fusion loop by mean pooling.
    Mmf,
    /// Keep the fusion loop but remove question guidance from its attention.
    Qmmf,
}

impl Ablation {
    pub fn has_caption(self) -> bool {
        self != Ablation::Cap
    }

    pub fn has_cross_modal(self) -> bool {
        self != Ablation::Cmr
    }

    pub fn fusion_mode(self) -> FusionMode {
        match self {
            Ablation::Mmf => FusionMode::MeanPool,
            Ablation::Qmmf => FusionMode::Unguided,
            _ => FusionMode::QuestionGuided,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "cap" | "vid" => Ok(Ablation::Cap),
            "cmr" => Ok(Ablation::Cmr),
            "mmf" => Ok(Ablation::Mmf),
            "qmmf" => Ok(Ablation::Qmmf),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected vid, cap, cmr, mmf or qmmf)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Cap => "cap",
            Ablation::Cmr => "cmr",
            Ablation::Mmf => "mmf",
            Ablation::Qmmf => "qmmf",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskKind,
    /// Answer-set size (word), candidate count (choice) or `MAX_COUNT + 1`.
    pub classes: usize,
    pub dims: InputDims,
    /// Shared contextual width `d`.
    pub hidden: usize,
    /// Hidden width of the visual projection; defaults to `d_v`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_hidden: Option<usize>,
    pub layers: usize,
    /// Graph layers (1-based) followed by a cross-modal round.
    pub cross_modal_after: Vec<usize>,
    pub fusion_steps: usize,
    #[serde(default)]
    pub ablation: Ablation,
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

impl ModelConfig {
    /// Small configuration for CPU training on synthetic data.
    pub fn desk(task: TaskKind, classes: usize, dims: InputDims) -> Self {
        Self {
            task,
            classes,
            dims,
            hidden: 32,
            visual_hidden: None,
            layers: 3,
            cross_modal_after: vec![1, 2],
            fusion_steps: 3,
            ablation: Ablation::None,
            seed: 0,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }

    /// Full-width configuration: `d = 512`, appearance 2048, motion 4096,
    /// projected video 4096, word vectors 300.
    pub fn reference(task: TaskKind, classes: usize) -> Self {
        let dims = InputDims {
            d_c: 512,
            d_v: 4096,
            d_q: 300,
            d_a: Some(2048),
            d_m: Some(4096),
            vocab: None,
        };
        Self {
            hidden: 512,
            ..Self::desk(task, classes, dims)
        }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        Self::desk(ds.task, ds.classes, ds.dims.clone())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn visual_hidden(&self) -> usize {
        self.visual_hidden.unwrap_or(self.dims.d_v)
    }

    /// Width of the final representation `s_a`.
    pub fn representation_width(&self) -> usize {
        3 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.hidden == 0 || self.layers == 0 || self.fusion_steps == 0 {
            return Err(Error::Config(
                "hidden width, layer count and fusion steps must be positive".into(),
            ));
        }
        if self.visual_hidden == Some(0) {
            return Err(Error::Config("visual hidden width must be positive".into()));
        }
        let mut prev = 0;
        for &l in &self.cross_modal_after {
            if l <= prev || l >= self.layers {
                return Err(Error::Config(format!(
                    "cross-modal rounds {:?} must be increasing and lie in 1..{}",
                    self.cross_modal_after, self.layers
                )));
            }
            prev = l;
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer-norm eps must be positive".into()));
        }
        match self.task {
            TaskKind::Word | TaskKind::Choice if self.classes < 2 => Err(Error::Config(format!(
                "{} task needs at least 2 classes",
                self.task
            ))),
            TaskKind::Number if self.classes != MAX_COUNT as usize + 1 => Err(Error::Config(
                format!("number task has {} answer values", MAX_COUNT + 1),
            )),
            _ => Ok(()),
        }
    }

    /// Checks that a dataset can be fed to a model with this configuration.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.task != self.task || ds.classes != self.classes || ds.dims != self.dims {
            return Err(Error::Config(format!(
                "dataset (task {}, classes {}, dims {:?}) does not match model (task {}, classes {}, dims {:?})",
                ds.task, ds.classes, ds.dims, self.task, self.classes, self.dims
            )));
        }
        Ok(())
    }

    /// Trainable scalar count, in closed form.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let dims = &self.dims;
        let gru = |input: usize, h: usize| 3 * (h * input + h) + 3 * h * h;
        let with_caption = self.ablation.has_caption();
        let m = if with_caption { 3 } else { 2 };

        let mut n = 0;
        if let Some(vocab) = dims.vocab {
            n += vocab * dims.d_q;
            if with_caption {
                n += gru(dims.d_q, dims.d_c);
            }
        }
        if let Some((d_a, d_m)) = dims.raw_video() {
            let hv = self.visual_hidden();
            n += (d_a + d_m) * hv + hv + hv * dims.d_v + dims.d_v;
        }
        if with_caption {
            n += gru(dims.d_c, d);
        }
        n += gru(dims.d_v, d) + gru(dims.d_q, d);

        n += m * self.layers * (2 * d * d + 3 * d);

        if self.ablation.has_cross_modal() {
            let block = |sources: usize| (3 * sources + 3) * d * d + 4 * d;
            let round = if with_caption { 3 * block(2) } else { 2 * block(1) };
            n += self.cross_modal_after.len() * round;
        }

        let attention = |guided: bool| if guided { 3 * d * d + 2 * d } else { 2 * d * d + 2 * d };
        match self.ablation.fusion_mode() {
            FusionMode::MeanPool => n += m * d * d + d,
            mode => {
                n += m * attention(mode == FusionMode::QuestionGuided);
                n += m * d * d + (m * d * d + m * d) + m * m * d;
                n += m * d * d + d * d + d;
                n += 8 * d * d + 4 * d;
            }
        }
        n += if with_caption { 2 } else { 1 } * attention(true);

        let s = self.representation_width();
        n += match self.task {
            TaskKind::Word => self.classes * s + self.classes,
            TaskKind::Number => s + 1,
            TaskKind::Choice => s,
        };
        n
    }
}
