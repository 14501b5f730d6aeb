//! Central finite-difference check of [`S5Model::loss_and_grad`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{random_example, ModelConfig, S5Model};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
/// Coordinates checked per tensor; smaller tensors are checked fully.
pub const MAX_PER_TENSOR: usize = 24;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

/// `|a - f| / max(|a|, |f|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every tensor of a 64-bit model on a two-example batch. The head
/// is rescaled so the loss is far from uniform and all gradients are
/// well above the finite-difference noise floor.
pub fn gradient_check(cfg: ModelConfig, seed: u64) -> GradCheckReport {
    let mut model = S5Model::<f64>::init(cfg.clone());
    let layout = model.layout();
    for v in &mut model.params[layout.head_w.clone()] {
        *v *= 100.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = vec![random_example(&cfg, &mut rng), random_example(&cfg, &mut rng)];
    let (_, grad) = model.loss_and_grad(&batch);

    let mut tensors = Vec::new();
    let mut overall: f64 = 0.0;
    for t in &layout.tensors {
        let r = t.range();
        let mut idx: Vec<usize> = if r.len() <= MAX_PER_TENSOR {
            r.clone().collect()
        } else {
            sample(&mut rng, r.len(), MAX_PER_TENSOR).into_iter().map(|i| r.start + i).collect()
        };
        if t.name == "embed" {
            // rows of tokens that occur, the rest have zero gradient
            let h = cfg.h;
            idx.extend(batch[0].tokens.iter().take(4).map(|&tok| r.start + tok as usize * h));
        }
        idx.sort_unstable();
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = model.params[i];
            model.params[i] = orig + FD_STEP;
            let lp = model.loss(&batch);
            model.params[i] = orig - FD_STEP;
            let lm = model.loss(&batch);
            model.params[i] = orig;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad[i], fd));
        }
        overall = overall.max(worst);
        tensors.push(TensorCheck {
            name: t.name.clone(),
            checked: idx.len(),
            max_rel_err: worst,
        });
    }
    GradCheckReport {
        tensors,
        max_rel_err: overall,
    }
}
