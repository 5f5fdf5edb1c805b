//! End-to-end finite-difference check of the training loss gradient.

use dbswin_tensor::gradcheck::rel_err;
use dbswin_tensor::{BackwardFault, ParamId, Tape};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::DbSwin;
use crate::training::sample_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Central-difference step for whole-model checks. The mean-reduced loss
/// leaves many gradients near 1e-8, where a 1e-5 step is dominated by
/// roundoff in the loss value.
pub const MODEL_FD_STEP: f64 = 1e-4;

/// Whether the gradient of `name[index]` is zero by construction: key
/// biases shift a whole logit row, which softmax ignores.
fn identically_zero(model: &DbSwin, id: ParamId, index: usize) -> bool {
    let p = model.params().get(id);
    if !p.name().ends_with("attn.qkv.bias") {
        return false;
    }
    let c = p.value().numel() / 3;
    (c..2 * c).contains(&index)
}

fn loss(model: &DbSwin, sample: &Sample) -> Result<f64> {
    let mut tape = Tape::new();
    let l = sample_loss(&mut tape, model, sample)?;
    Ok(tape.value(l).item().expect("scalar loss"))
}

/// Compares backpropagated and central-difference gradients of the BCE
/// loss on `count` distinct parameter entries. Tensors are drawn uniformly,
/// then an entry within each, so small tensors are covered too. `fault`
/// corrupts one backward rule for mutation testing.
pub fn model_gradcheck(
    model: &DbSwin,
    sample: &Sample,
    count: usize,
    seed: u64,
    step: f64,
    fault: Option<BackwardFault>,
) -> Result<GradcheckReport> {
    let ids: Vec<ParamId> = model.params().ids().collect();
    let available: usize = model.params().numel();
    if count == 0 || count > available {
        return Err(Error::Config(format!(
            "cannot sample {count} of {available} parameter entries"
        )));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut picks: Vec<(ParamId, usize)> = Vec::with_capacity(count);
    while picks.len() < count {
        let id = ids[rng.random_range(0..ids.len())];
        let index = rng.random_range(0..model.params().value(id).numel());
        if !identically_zero(model, id, index) && !picks.contains(&(id, index)) {
            picks.push((id, index));
        }
    }

    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let l = sample_loss(&mut tape, model, sample)?;
    let grads = tape.backward(l)?;

    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(count);
    for (id, index) in picks {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[index]);
        let orig = probe.params().value(id).data()[index];
        probe.params_mut().value_mut(id).data_mut()[index] = orig + step;
        let up = loss(&probe, sample)?;
        probe.params_mut().value_mut(id).data_mut()[index] = orig - step;
        let down = loss(&probe, sample)?;
        probe.params_mut().value_mut(id).data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * step);
        entries.push(GradcheckEntry {
            name: model.params().get(id).name().to_string(),
            index,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(GradcheckReport { entries })
}
