//! Recall@k, nDCG@k and the per-scenario evaluation protocol.
//!
//! Relevance is binary. nDCG uses a base-2 log discount on 1-based positions.
//! Users with no held-out positives are left out of the means.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionTable, Scenario, ScenarioSplit};
use crate::model::{rank_topk, BundleScorer, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no user has a held-out positive")]
    NoEvaluableUsers,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[inline]
fn is_relevant(relevant: &[usize], b: usize) -> bool {
    relevant.binary_search(&b).is_ok()
}

/// `|top-k ∩ relevant| / |relevant|`; `relevant` is sorted ascending.
/// `None` when there is nothing relevant.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|&&b| is_relevant(relevant, b))
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

#[inline]
fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

/// DCG over hits in the top `k` divided by the ideal DCG of `min(k, |relevant|)` hits.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    if k == 0 {
        return Some(0.0);
    }
    // Folding from +0.0 keeps a ranking without hits at +0.0 rather than -0.0.
    let dcg = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &b)| is_relevant(relevant, b))
        .fold(0.0, |acc, (p, _)| acc + discount(p + 1));
    let idcg = (1..=k.min(relevant.len())).fold(0.0, |acc, p| acc + discount(p));
    Some(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    AllBundles,
    ColdBundles,
}

/// Which bundles are ranked and which are removed per user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePolicy {
    pub candidates: CandidateSet,
    pub mask_train_positives: bool,
}

impl CandidatePolicy {
    /// Cold ranks only bundles without training interactions; warm and all
    /// rank every bundle. Training positives are masked in each case.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let candidates = match scenario {
            Scenario::Cold => CandidateSet::ColdBundles,
            Scenario::Warm | Scenario::All => CandidateSet::AllBundles,
        };
        Self {
            candidates,
            mask_train_positives: true,
        }
    }

    pub fn candidate_ids(&self, split: &ScenarioSplit) -> Vec<usize> {
        match self.candidates {
            CandidateSet::AllBundles => (0..split.train.n_right()).collect(),
            CandidateSet::ColdBundles => split.cold_bundles.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub target: EvalTarget,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
    pub n_candidates: usize,
    pub candidate_policy: CandidatePolicy,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "scenario,target,k,recall,ndcg,users_evaluated,n_candidates";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scenario,
            match self.target {
                EvalTarget::Validation => "val",
                EvalTarget::Test => "test",
            },
            self.k,
            self.recall,
            self.ndcg,
            self.users_evaluated,
            self.n_candidates
        )
    }

    /// Recall expected from a uniformly random ranking of the candidates.
    pub fn random_recall(&self) -> f64 {
        random_ranking_recall(self.k, self.n_candidates)
    }
}

/// `min(k, n) / n`: the expected fraction of relevant candidates a random
/// ordering places in the top `k`.
pub fn random_ranking_recall(k: usize, n_candidates: usize) -> f64 {
    if n_candidates == 0 {
        return 0.0;
    }
    k.min(n_candidates) as f64 / n_candidates as f64
}

/// Ranks `candidates` for every user with a positive in `held_out` and
/// averages Recall@k and nDCG@k.
pub fn evaluate_pairs<S: BundleScorer + ?Sized>(
    scorer: &S,
    held_out: &InteractionTable,
    train: &InteractionTable,
    candidates: &[usize],
    mask_train: bool,
    k: usize,
) -> Result<(f64, f64, usize), MetricsError> {
    let relevant = held_out.right_lists();
    let masks = if mask_train {
        train.right_lists()
    } else {
        vec![Vec::new(); train.n_left()]
    };
    let users: Vec<usize> = (0..relevant.len()).filter(|&u| !relevant[u].is_empty()).collect();
    if users.is_empty() {
        return Err(MetricsError::NoEvaluableUsers);
    }
    let per_user: Vec<(f64, f64)> = users
        .par_iter()
        .map(|&u| {
            let ranked = rank_topk(scorer, u, candidates, &masks[u], k)?;
            let rel = &relevant[u];
            Ok((
                recall_at_k(&ranked, rel, k).expect("non-empty"),
                ndcg_at_k(&ranked, rel, k).expect("non-empty"),
            ))
        })
        .collect::<Result<_, ModelError>>()?;
    // Sequential sums keep the result independent of thread scheduling.
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for (r, n) in &per_user {
        recall += r;
        ndcg += n;
    }
    let n = per_user.len() as f64;
    Ok((recall / n, ndcg / n, per_user.len()))
}

pub fn evaluate<S: BundleScorer + ?Sized>(
    scorer: &S,
    split: &ScenarioSplit,
    target: EvalTarget,
    k: usize,
) -> Result<EvalReport, MetricsError> {
    let policy = CandidatePolicy::for_scenario(split.scenario);
    let candidates = policy.candidate_ids(split);
    let held_out = match target {
        EvalTarget::Validation => &split.val,
        EvalTarget::Test => &split.test,
    };
    let (recall, ndcg, users_evaluated) = evaluate_pairs(
        scorer,
        held_out,
        &split.train,
        &candidates,
        policy.mask_train_positives,
        k,
    )?;
    Ok(EvalReport {
        scenario: split.scenario,
        target,
        k,
        recall,
        ndcg,
        users_evaluated,
        n_candidates: candidates.len(),
        candidate_policy: policy,
    })
}

/// Mean and population standard deviation over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
}

pub fn summarize_runs(reports: &[EvalReport]) -> Option<RunSummary> {
    if reports.is_empty() {
        return None;
    }
    let stats = |xs: Vec<f64>| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (recall_mean, recall_std) = stats(reports.iter().map(|r| r.recall).collect());
    let (ndcg_mean, ndcg_std) = stats(reports.iter().map(|r| r.ndcg).collect());
    Some(RunSummary {
        runs: reports.len(),
        recall_mean,
        recall_std,
        ndcg_mean,
        ndcg_std,
    })
}
