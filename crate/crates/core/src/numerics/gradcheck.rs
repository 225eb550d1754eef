//! Central finite-difference gradient checking.

use rand::seq::index;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{Fault, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Negative control: corrupt one backward rule of the analytic pass.
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    /// `None` when the probe straddled a ReLU or max-pool switch point.
    pub numeric: Option<f64>,
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn skipped(&self) -> usize {
        self.probes.iter().filter(|p| p.numeric.is_none()).count()
    }

    pub fn checked(&self) -> usize {
        self.probes.len() - self.skipped()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `model_fn` against central differences at
/// `probe_count` distinct random coordinates of `params`.
///
/// `model_fn` receives a fresh tape with `params` bound as leaves (in store
/// order) and returns the scalar loss. It must be deterministic; a repeated
/// forward pass that differs bitwise is reported as an error. Probes whose
/// ±step evaluations take a different ReLU / max branch than the base point
/// are skipped.
pub fn grad_check<F, R>(
    mut model_fn: F,
    params: &mut ParamStore,
    probe_count: usize,
    rng: &mut R,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut eval = |params: &ParamStore, grad: bool| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = match (grad, cfg.fault) {
            (true, Some(f)) => Tape::with_fault(f),
            _ => Tape::new(),
        };
        let vars = params.bind(&mut tape, grad);
        let loss = model_fn(&mut tape, &vars)?;
        Ok((tape, loss, vars))
    };

    let (mut tape, loss, vars) = eval(params, true)?;
    let base_loss = tape.value(loss).item()?;
    let base_sig = tape.branch_signature();
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|t| t.into_data()).unwrap_or_default())
        .collect();
    drop(tape);

    let (again, loss2, _) = eval(params, false)?;
    if again.value(loss2).item()?.to_bits() != base_loss.to_bits() {
        return Err(Error::GradCheck(
            "model function is not deterministic".into(),
        ));
    }

    let total = params.total_elements();
    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for i in 0..params.len() {
        offsets.push(acc);
        acc += params.tensor_at(i).numel();
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut flat: Vec<usize> = index::sample(rng, total, probe_count.min(total)).into_vec();
    flat.sort_unstable();

    let mut probes = Vec::with_capacity(flat.len());
    let mut max_rel: f64 = 0.0;
    for f in flat {
        let ti = offsets.partition_point(|&o| o <= f) - 1;
        let ei = f - offsets[ti];
        let orig = params.tensor_at(ti).data()[ei];
        let mut side = |delta: f64| -> Result<(f64, u64)> {
            params.tensor_at_mut(ti).data_mut()[ei] = orig + delta;
            let (t, l, _) = eval(params, false)?;
            Ok((t.value(l).item()?, t.branch_signature()))
        };
        let plus = side(cfg.step);
        let minus = side(-cfg.step);
        params.tensor_at_mut(ti).data_mut()[ei] = orig;
        let ((lp, sp), (lm, sm)) = (plus?, minus?);
        let analytic = grads[ti][ei];
        let (numeric, rel_error) = if sp == base_sig && sm == base_sig {
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let rel = relative_error(analytic, numeric);
            max_rel = max_rel.max(rel);
            (Some(numeric), Some(rel))
        } else {
            (None, None)
        };
        probes.push(Probe {
            param: names[ti].clone(),
            index: ei,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        probes,
    })
}
