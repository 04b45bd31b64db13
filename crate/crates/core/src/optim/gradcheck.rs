use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_gradients, ce_loss, Example, OptimError};
use crate::net::{Model, Real};

const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub layer: String,
    /// `"A"` or `"B"`
    pub matrix: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

/// Compares backprop gradients of the batch loss against central differences
/// at `per_layer` random adapter coordinates of every adapted layer.
///
/// The model is promoted to f64 for both routes so the difference quotient is
/// not swamped by single-precision rounding.
pub fn grad_check<T: Real>(
    model: &Model<T>,
    batch: &[Example],
    per_layer: usize,
    seed: u64,
) -> Result<GradCheckReport, OptimError> {
    let m64: Model<f64> = model.cast();
    let refs: Vec<&Example> = batch.iter().collect();
    let (grads, _) = batch_gradients(&m64, &refs, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (slot, lin) in m64.linears().into_iter().enumerate() {
        let Some(ad) = &lin.lora else { continue };
        let (na, nb) = (ad.a.data.len(), ad.b.data.len());
        if na + nb == 0 {
            continue;
        }
        for _ in 0..per_layer {
            let flat = rng.random_range(0..na + nb);
            let (is_a, idx) = if flat < na { (true, flat) } else { (false, flat - na) };
            let eval = |delta: f64| -> Result<f64, OptimError> {
                let mut m = m64.clone();
                let ad = m.linears_mut().swap_remove(slot).lora.as_mut().expect("adapter present");
                let t = if is_a { &mut ad.a } else { &mut ad.b };
                t.data[idx] += delta;
                ce_loss(&m, batch)
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let g = &grads[slot];
            let analytic = if is_a { g.a.data[idx] } else { g.b.data[idx] };
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            samples.push(GradSample {
                layer: lin.name.clone(),
                matrix: if is_a { "A" } else { "B" }.to_string(),
                index: idx,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        samples,
    })
}
