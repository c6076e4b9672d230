use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::numkit::{grad_check, GradCheckReport, ParamId};

/// Central-difference check of the sample loss at one random coordinate of
/// each of `count` distinct, randomly chosen parameters.
pub fn model_gradcheck(
    model: &mut Model,
    sample: &Sample,
    count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params.ids().collect();
    if count > ids.len() {
        return Err(Error::Config(format!(
            "cannot sample {count} of {} parameters",
            ids.len()
        )));
    }
    let coords: Vec<(ParamId, usize)> = index::sample(&mut rng, ids.len(), count)
        .into_iter()
        .map(|i| {
            let id = ids[i];
            (id, rng.gen_range(0..model.params.value(id).numel()))
        })
        .collect();
    let probe = model.clone();
    grad_check(&mut model.params, &coords, |tape, ps| {
        let out = probe.forward_with(tape, ps, sample, true)?;
        Ok(out.loss.expect("loss requested"))
    })
}
