//! Central finite-difference check of the analytic gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{extract_patches, MatcherModel};
use super::{Fusion, MatcherConfig};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst per-entry error for every parameter tensor.
    pub groups: Vec<(String, f64)>,
    pub worst: f64,
    pub worst_group: String,
}

/// Builds a model from `config` (seeded by `seed`) with randomized norms,
/// biases, and alphas, feeds it random images of `grid` patches per view,
/// and compares the gradient of
/// `MSE(correspondence) + BCE(early, biased) + BCE(late)` with central
/// differences. Each entry's error is `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn gradcheck(config: &MatcherConfig, grid: (usize, usize), seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MatcherConfig {
        seed,
        ..config.clone()
    };
    let mut model = MatcherModel::new(&cfg)?;
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let (nu, nv) = (grid.1 * cfg.patch_size, grid.0 * cfg.patch_size);
    let mut image = || -> Result<_> {
        let px: Vec<f64> = (0..nu * nv).map(|_| rng.gen_range(0.0..1.0)).collect();
        extract_patches(&px, nu, nv, cfg.patch_size)
    };
    let p1 = image()?;
    let p2 = image()?;
    let n = p1.len();
    let target = Array2::from_shape_simple_fn((n, n), || rng.gen_range(0.0..1.0));
    let bias = Array2::from_shape_simple_fn((n, n), || rng.gen_range(0.0..1.0));
    let label = rng.gen_bool(0.5);

    let loss_grad = |m: &MatcherModel| -> Result<(f64, MatcherModel)> {
        let (a, mut g) = m.correspondence_loss_grad(&p1, &p2, &target)?;
        let (b, gb) = m.class_loss_grad(&p1, &p2, label, Fusion::Early, Some(&bias))?;
        let (c, gc) = m.class_loss_grad(&p1, &p2, label, Fusion::Late, None)?;
        g.accumulate(&gb);
        g.accumulate(&gc);
        Ok((a + b + c, g))
    };

    let (_, analytic) = loss_grad(&model)?;
    let names: Vec<String> = analytic.tensors().into_iter().map(|t| t.0).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|t| t.2.to_vec()).collect();
    let mut groups = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grads[ti].len() {
            let orig = model.tensors_mut()[ti][i];
            model.tensors_mut()[ti][i] = orig + FD_STEP;
            let up = loss_grad(&model)?.0;
            model.tensors_mut()[ti][i] = orig - FD_STEP;
            let down = loss_grad(&model)?.0;
            model.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grads[ti][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            worst = worst.max(err);
        }
        groups.push((name, worst));
    }
    let (worst_group, worst) = groups
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, g| if g.1 > acc.1 { g } else { acc });
    Ok(GradcheckReport {
        groups,
        worst,
        worst_group,
    })
}
