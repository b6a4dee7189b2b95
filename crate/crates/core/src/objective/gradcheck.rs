//! Central-difference verification of the analytic gradients.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{L2Form, LossInputs, ObjectiveError, TrainBatch};
use crate::bigraph::{build_normalized, NormalizedBigraph};
use crate::corpus::{popularity_counts, InteractionTable};
use crate::model::{gammas_at, BundleItems, ModelParams, TABLE_NAMES};

/// Coordinates whose analytic and numeric gradients are both below this are skipped.
pub const GRAD_FLOOR: f64 = 1e-8;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Coordinates above the gradient floor.
    pub checked: usize,
    pub total: usize,
}

impl TableCheck {
    pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let errors: Vec<f64> = analytic
            .iter()
            .zip(numeric)
            .filter(|(a, n)| a.abs().max(n.abs()) > GRAD_FLOOR)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
            .collect();
        let max = errors.iter().copied().fold(0.0, f64::max);
        let mean = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        Self {
            name: name.to_string(),
            max_rel_error: max,
            mean_rel_error: mean,
            checked: errors.len(),
            total: analytic.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: Option<u64>,
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    pub dim: usize,
    pub layers: usize,
    pub step: f64,
    pub tolerance: f64,
    pub tables: Vec<TableCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares `inputs.loss_and_gradients` with central differences of
/// `inputs.loss` on every coordinate of every table.
pub fn finite_diff_check(
    inputs: &LossInputs<'_>,
    params: &ModelParams,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, ObjectiveError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(ObjectiveError::InvalidInput(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (_, analytic) = inputs.loss_and_gradients(params)?;
    let mut tables = Vec::with_capacity(4);
    for (t, name) in TABLE_NAMES.iter().enumerate() {
        let base = params.tables()[t].as_slice().to_vec();
        let mut failure = None;
        let numeric = central_difference(
            |x| {
                let mut probe = params.clone();
                probe.tables_mut()[t].as_mut_slice().copy_from_slice(x);
                match inputs.loss(&probe) {
                    Ok(l) => l.total,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &base,
            step,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        tables.push(TableCheck::compare(
            name,
            analytic.tables()[t].as_slice(),
            &numeric,
        ));
    }
    let max_rel_error = tables.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed: None,
        users: params.users(),
        bundles: params.bundles(),
        items: params.items(),
        dim: params.dim(),
        layers: inputs.layers,
        step,
        tolerance,
        tables,
        max_rel_error,
        passed: max_rel_error < tolerance,
    })
}

/// A 5-user, 4-bundle, 6-item problem with random graphs and a batch that
/// covers every user. Bundle 3 never appears in user-bundle interactions,
/// so its view weight is zero.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub seed: u64,
    pub ub: InteractionTable,
    pub ui: InteractionTable,
    pub bi: InteractionTable,
    pub ub_graph: NormalizedBigraph,
    pub ui_graph: NormalizedBigraph,
    pub bundle_items: BundleItems,
    pub batch: TrainBatch,
    pub gammas: Vec<f64>,
    pub params: ModelParams,
}

pub const TINY_USERS: usize = 5;
pub const TINY_BUNDLES: usize = 4;
pub const TINY_ITEMS: usize = 6;

pub fn tiny_instance(seed: u64, dim: usize) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nu, nb, ni) = (TINY_USERS, TINY_BUNDLES, TINY_ITEMS);
    let warm: Vec<usize> = (0..nb - 1).collect();

    let mut ub = Vec::new();
    for u in 0..nu {
        // Every user keeps at least one warm positive and one warm non-positive.
        let keep = rng.random_range(1..warm.len());
        let mut shuffled = warm.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        ub.extend(shuffled[..keep].iter().map(|&b| (u, b)));
    }
    let mut ui = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random::<f64>() < 0.4 {
                ui.push((u, i));
            }
        }
    }
    let mut bi = Vec::new();
    for b in 0..nb {
        let size = rng.random_range(1..=3);
        for _ in 0..size {
            bi.push((b, rng.random_range(0..ni)));
        }
    }
    let ub = InteractionTable::new(ub, nu, nb).expect("ids in range");
    let ui = InteractionTable::new(ui, nu, ni).expect("ids in range");
    let bi = InteractionTable::new(bi, nb, ni).expect("ids in range");

    let positives = ub.right_lists();
    let mut triplets = Vec::new();
    for &(u, p) in ub.pairs() {
        let negatives: Vec<usize> = (0..nb).filter(|b| !positives[u].contains(b)).collect();
        let n = *negatives.choose(&mut rng).expect("a non-positive exists");
        triplets.push((u, p, n));
    }
    let psi = rng.random_range(0.5..4.0);
    let gammas = gammas_at(&popularity_counts(&ub), psi);
    let params = ModelParams::init(nu, nb, ni, dim, seed.wrapping_add(1));

    TinyInstance {
        seed,
        ub_graph: build_normalized(&ub),
        ui_graph: build_normalized(&ui),
        bundle_items: BundleItems::from_table(&bi).expect("every bundle has an item"),
        batch: TrainBatch::new(triplets),
        gammas,
        params,
        ub,
        ui,
        bi,
    }
}

impl TinyInstance {
    pub fn inputs(&self, lambda1: f64, lambda2: f64, layers: usize, l2_form: L2Form) -> LossInputs<'_> {
        LossInputs {
            ub_graph: &self.ub_graph,
            ui_graph: &self.ui_graph,
            bundle_items: &self.bundle_items,
            batch: &self.batch,
            gammas: &self.gammas,
            lambda1,
            lambda2,
            layers,
            l2_form,
        }
    }

    /// Runs the standard check and stamps the instance seed on the report.
    pub fn check(
        &self,
        lambda1: f64,
        lambda2: f64,
        layers: usize,
        step: f64,
        tolerance: f64,
    ) -> Result<GradCheckReport, ObjectiveError> {
        let mut report = finite_diff_check(
            &self.inputs(lambda1, lambda2, layers, L2Form::Squared),
            &self.params,
            step,
            tolerance,
        )?;
        report.seed = Some(self.seed);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = sum_i c_i x_i^2 + x_0 x_1, gradient 2 c_i x_i + cross terms.
        let c = [1.5, -0.5, 2.0];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(xi, ci)| ci * xi * xi).sum::<f64>() + x[0] * x[1];
        let x = [0.3, -1.2, 0.7];
        let analytic = [2.0 * c[0] * x[0] + x[1], 2.0 * c[1] * x[1] + x[0], 2.0 * c[2] * x[2]];
        let numeric = central_difference(f, &x, 1e-5);
        let check = TableCheck::compare("q", &analytic, &numeric);
        assert!(check.max_rel_error < 1e-9, "{check:?}");
        assert_eq!(check.checked, 3);
    }

    #[test]
    fn zero_step_rejected() {
        let inst = tiny_instance(0, 4);
        let inputs = inst.inputs(0.5, 1e-4, 1, L2Form::Squared);
        assert!(finite_diff_check(&inputs, &inst.params, 0.0, 1e-4).is_err());
    }

    #[test]
    fn tiny_instance_shape() {
        let inst = tiny_instance(3, 8);
        assert_eq!(inst.batch.unique_users.len(), TINY_USERS);
        assert_eq!(inst.gammas[TINY_BUNDLES - 1], 0.0);
        assert!(inst.batch.unique_bundles.len() >= 2);
    }
}
