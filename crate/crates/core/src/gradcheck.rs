//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{self, ByteSequence};
use crate::config::GradcheckConfig;
use crate::error::Result;
use crate::tensor::{BackwardFault, Tape, Tensor, Var};
use crate::transformer::{param_group, Model, ModelConfig, Seq2SeqExample};

/// A central difference of a loss `f` carries round-off of roughly
/// `ε·|f| / h`. Errors within this many such units count as agreement.
pub const NOISE_UNITS: f64 = 10.0;

pub const GROUPS: [&str; 8] = ["embedding", "conv", "scorer", "attention", "ffn", "norm", "position", "output"];

/// Gradient magnitude below which the finite difference of a loss of size
/// `loss` cannot be resolved to `tolerance` with step `h`.
pub fn resolution_floor(loss: f64, h: f64, tolerance: f64) -> f64 {
    NOISE_UNITS * f64::EPSILON * loss.abs().max(1.0) / (h * tolerance)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Max relative error between the tape gradient of `f` and central
/// differences with step `h`, over every coordinate of every input. The
/// denominator floor is [`resolution_floor`] at `tolerance`.
pub fn check_fn(
    inputs: &[Tensor],
    h: f64,
    tolerance: f64,
    fault: Option<BackwardFault>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    if let Some(fault) = fault {
        tape.inject_fault(fault);
    }
    let vars = inputs.iter().map(|t| tape.variable(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let floor = resolution_floor(tape.value(out).data()[0], h, tolerance);
    let grads = tape.backward(out)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[j];
            xs[k].data_mut()[j] = x0 + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[j] = x0 - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[j] = x0;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h), floor));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Random printable input of `len` bytes with one span corrupted.
pub fn random_example(len: usize, rng: &mut impl Rng) -> Result<Seq2SeqExample> {
    let ids: Vec<u8> = (0..len).map(|_| rng.random_range(32u8..127)).collect();
    let ex = bytes::corrupt_spans(&ByteSequence::from_ids(ids), 0.25, 3.0, rng.random())?;
    Ok(Seq2SeqExample::from(&ex))
}

fn model_loss(model: &Model, ex: &Seq2SeqExample) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, ex)?;
    Ok(tape.value(loss).data()[0])
}

/// Checks `gc.samples` coordinates of every parameter tensor of a model built
/// from `cfg` and `seed`, against the summed cross-entropy of one random
/// example. Half of the coordinates come from the support of the analytic
/// gradient (embedding and position tables are mostly untouched rows), the
/// rest uniformly.
pub fn check_model(cfg: &ModelConfig, seed: u64, gc: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<Vec<GroupReport>> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let ex = random_example(gc.input_length, &mut rng)?;

    let mut tape = Tape::new();
    if let Some(fault) = fault {
        tape.inject_fault(fault);
    }
    let (loss, _) = model.loss(&mut tape, &ex)?;
    let floor = resolution_floor(tape.value(loss).data()[0], gc.step, gc.tolerance);
    let grads = tape.backward(loss)?;
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params);

    let mut reports: Vec<GroupReport> = Vec::new();
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (group, analytic) = {
            let p = model.params.get(id);
            (param_group(&p.name), p.grad.clone())
        };
        let support: Vec<usize> = (0..analytic.len()).filter(|&j| analytic[j] != 0.0).collect();
        let mut coords = Vec::with_capacity(gc.samples);
        for s in 0..gc.samples {
            let j = if s % 2 == 0 && !support.is_empty() {
                support[rng.random_range(0..support.len())]
            } else {
                rng.random_range(0..analytic.len())
            };
            coords.push(j);
        }
        let mut worst = 0.0f64;
        for j in coords {
            let x0 = model.params.get(id).value.data()[j];
            model.params.get_mut(id).value.data_mut()[j] = x0 + gc.step;
            let up = model_loss(&model, &ex)?;
            model.params.get_mut(id).value.data_mut()[j] = x0 - gc.step;
            let down = model_loss(&model, &ex)?;
            model.params.get_mut(id).value.data_mut()[j] = x0;
            worst = worst.max(relative_error(analytic[j], (up - down) / (2.0 * gc.step), floor));
        }
        match reports.iter_mut().find(|r| r.group == group) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(worst);
                r.checked += gc.samples;
            }
            None => reports.push(GroupReport { group, max_rel_error: worst, checked: gc.samples }),
        }
    }
    reports.sort_by_key(|r| GROUPS.iter().position(|g| *g == r.group).unwrap_or(GROUPS.len()));
    Ok(reports)
}

/// Runs [`check_model`] for seeds `base_seed .. base_seed + gc.seeds` and
/// keeps the worst error per group.
pub fn check_model_seeds(cfg: &ModelConfig, base_seed: u64, gc: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<Vec<GroupReport>> {
    let mut merged: Vec<GroupReport> = Vec::new();
    for s in 0..gc.seeds as u64 {
        for r in check_model(cfg, base_seed + s, gc, fault)? {
            match merged.iter_mut().find(|m| m.group == r.group) {
                Some(m) => {
                    m.max_rel_error = m.max_rel_error.max(r.max_rel_error);
                    m.checked += r.checked;
                }
                None => merged.push(r),
            }
        }
    }
    Ok(merged)
}
