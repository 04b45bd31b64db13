use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at, Example, OptimError, TrainConfig};
use crate::net::{AdapterGrad, Model, Real};
use crate::synth::derive_seed;

/// Adam over adapter matrices only. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(model: &Model<T>) -> Self {
        let sizes: Vec<usize> = model
            .linears()
            .iter()
            .flat_map(|l| match &l.lora {
                Some(ad) => [ad.a.data.len(), ad.b.data.len()],
                None => [0, 0],
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step<T: Real>(&mut self, model: &mut Model<T>, grads: &[AdapterGrad<T>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (l, g) in model.linears_mut().into_iter().zip(grads) {
            let Some(ad) = l.lora.as_mut() else { continue };
            let slot = 2 * l.slot;
            for (k, (p, gm)) in [(&mut ad.a, &g.a), (&mut ad.b, &g.b)].into_iter().enumerate() {
                let (m, v) = (&mut self.m[slot + k], &mut self.v[slot + k]);
                for (i, (w, &gi)) in p.data.iter_mut().zip(&gm.data).enumerate() {
                    let gi = gi.f64();
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                    *w = T::lit(w.f64() - upd);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: super::Stage,
    pub epochs: usize,
    pub updates: usize,
    pub curve: Vec<LossPoint>,
}

impl TrainReport {
    /// `step,lr,loss` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for p in &self.curve {
            s.push_str(&format!("{},{:e},{:.9}\n", p.step, p.lr, p.loss));
        }
        s
    }

    /// Mean loss of the first and the last epoch.
    pub fn first_last_epoch_loss(&self) -> Option<(f64, f64)> {
        if self.curve.is_empty() || self.epochs == 0 {
            return None;
        }
        let per = self.curve.len() / self.epochs;
        let mean = |ps: &[LossPoint]| ps.iter().map(|p| p.loss).sum::<f64>() / ps.len() as f64;
        Some((mean(&self.curve[..per]), mean(&self.curve[self.curve.len() - per..])))
    }
}

/// Summed gradients of `Σ nll / pairs` over `examples`, computed in
/// `grad_accum` sequential micro-batches. Returns `(grads, mean loss)`.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    examples: &[&Example],
    grad_accum: usize,
) -> Result<(Vec<AdapterGrad<T>>, f64), OptimError> {
    let pairs: usize = examples.iter().map(|e| e.seqs.len()).sum();
    if pairs == 0 {
        return Err(OptimError::EmptyBatch);
    }
    let weight = T::lit(1.0 / pairs as f64);
    let micro = examples.len().div_ceil(grad_accum.max(1)).max(1);
    let mut total = model.zero_grads();
    let mut nll = 0.0;
    for chunk in examples.chunks(micro) {
        let mut g = model.zero_grads();
        for ex in chunk {
            nll += model.clip_backward(&ex.mel, &ex.seqs, weight, &mut g)?;
        }
        for (t, gi) in total.iter_mut().zip(&g) {
            t.a.add_assign(&gi.a);
            t.b.add_assign(&gi.b);
        }
    }
    Ok((total, nll / pairs as f64))
}

/// Trains the adapters of `model` on `data` for `cfg.epochs` epochs.
///
/// Each epoch visits the examples in a seed-determined order, `cfg.batch`
/// examples per update. The base weights are never written.
pub fn train_stage<T: Real>(
    model: &mut Model<T>,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport, OptimError> {
    cfg.validate()?;
    if data.is_empty() || data.iter().all(|e| e.seqs.is_empty()) {
        return Err(OptimError::EmptyBatch);
    }
    let per_epoch = data.len().div_ceil(cfg.batch);
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::new(model);
    let mut curve = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let stage_tag = cfg.stage as usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage_tag, epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let step = epoch * per_epoch + b;
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            if batch.iter().all(|e| e.seqs.is_empty()) {
                continue;
            }
            let (grads, loss) = batch_gradients(model, &batch, cfg.grad_accum)?;
            let finite = grads.iter().all(|g| g.a.all_finite() && g.b.all_finite());
            if !loss.is_finite() || !finite {
                return Err(OptimError::NonFiniteLoss {
                    step,
                    epoch,
                    loss,
                    detail: format!(
                        "{} examples in batch, gradients {}",
                        batch.len(),
                        if finite { "finite" } else { "non-finite" }
                    ),
                });
            }
            // updates are numbered from 1 so the first one already moves the adapters
            let lr = lr_at(step + 1, total, cfg);
            adam.step(model, &grads, lr);
            curve.push(LossPoint { step, lr, loss });
            epoch_loss += loss;
        }
        log::info!(
            "{} epoch {}/{}: mean loss {:.4}",
            cfg.stage.as_str(),
            epoch + 1,
            cfg.epochs,
            epoch_loss / per_epoch as f64
        );
    }
    Ok(TrainReport {
        stage: cfg.stage,
        epochs: cfg.epochs,
        updates: curve.len(),
        curve,
    })
}
