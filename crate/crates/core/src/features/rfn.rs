use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Relaxed instance frequency-wise normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfnConfig {
    /// Weight of the layer-norm branch; `1 - rho` goes to the per-frequency
    /// instance-norm branch.
    pub rho: f64,
    /// Floor applied to every variance before taking its square root.
    pub epsilon: f64,
}

impl Default for RfnConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            epsilon: 1e-10,
        }
    }
}

impl RfnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "rfn needs 0 <= rho <= 1 and epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Normalizes the trailing `(bins, frames)` plane of every instance:
/// `rho * LN(x) + (1 - rho) * IFN(x)`, where LN standardizes the whole plane
/// and IFN standardizes each frequency row over time. Variances are biased
/// (divide by count). No learned affine parameters.
pub fn rfn(x: &Tensor, cfg: RfnConfig) -> Result<Tensor> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape(
            "rfn",
            format!("need (.., bins, frames), got {shape:?}"),
        ));
    }
    let frames = shape[shape.len() - 1];
    let bins = shape[shape.len() - 2];
    let plane = bins * frames;
    let mut out = vec![0.0; x.numel()];
    let standardize = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        (mean, 1.0 / var.max(cfg.epsilon).sqrt())
    };
    for (src, dst) in x.data().chunks(plane).zip(out.chunks_mut(plane)) {
        let (mean, inv) = standardize(src);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = cfg.rho * (s - mean) * inv;
        }
        for (row, drow) in src.chunks(frames).zip(dst.chunks_mut(frames)) {
            let (m, i) = standardize(row);
            for (d, s) in drow.iter_mut().zip(row) {
                *d += (1.0 - cfg.rho) * (s - m) * i;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}
