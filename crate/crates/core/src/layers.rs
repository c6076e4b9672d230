//! Parameter bundles shared by the model components.

use rand::Rng;

use crate::error::Result;
use crate::numkit::{ParamId, ParamSet, Tape, Var};

/// `x · wᵀ + b` with `w: out × in`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Registers `{name}` (glorot) and, when `bias_name` is given, a zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        bias_name: Option<&str>,
        d_out: usize,
        d_in: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add_glorot(name, d_out, d_in, rng)?;
        let bias = match bias_name {
            Some(b) => Some(params.add_zeros(b, &[d_out])?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = self.bias.map(|b| tape.param(params, b));
        tape.affine(x, w, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Per-row layer normalization parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: params.add_ones(format!("{prefix}.gain"), &[dim])?,
            bias: params.add_zeros(format!("{prefix}.bias"), &[dim])?,
            eps,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gain);
        let b = tape.param(params, self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}
