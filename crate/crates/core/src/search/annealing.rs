use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{build_initial_solution, candidate_pool};
use crate::analysis::{RedundancyProfile, SetPartition};
use crate::error::{Error, Result};
use crate::plan::{block_disjoint, RemovalElement};
use crate::rng::{stream, Rng, Stream};

/// Lower bound applied to selection weights before normalising.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Resampling budget for a block-disjoint swap.
pub const PROPOSAL_RETRIES: usize = 32;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealingSchedule {
    pub t0: f64,
    pub alpha: f64,
    pub t_min: f64,
    pub seed: u64,
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        Self {
            t0: 15.0,
            alpha: 0.85,
            t_min: 0.05,
            seed: DEFAULT_SEED,
        }
    }
}

impl AnnealingSchedule {
    /// `T0 < T_min` is allowed and yields zero iterations.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument(format!(
                "alpha = {} must lie in (0, 1)",
                self.alpha
            )));
        }
        if !(self.t_min > 0.0 && self.t_min.is_finite()) {
            return Err(Error::Argument(format!(
                "T_min = {} must be positive",
                self.t_min
            )));
        }
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::Argument(format!(
                "T0 = {} must be positive",
                self.t0
            )));
        }
        Ok(())
    }

    /// The temperatures the loop visits, one per iteration.
    pub fn temperatures(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut t = self.t0;
        while t >= self.t_min {
            out.push(t);
            t *= self.alpha;
        }
        out
    }

    pub fn iterations(&self) -> usize {
        self.temperatures().len()
    }
}

/// `p_i = ω_i / Σ ω` with every weight floored at [`WEIGHT_FLOOR`].
pub fn selection_probabilities(
    elements: &[RemovalElement],
    redundancy: &[f64],
) -> Result<Vec<f64>> {
    if elements.is_empty() {
        return Err(Error::Argument("no elements to select from".into()));
    }
    let w: Vec<f64> = elements
        .iter()
        .map(|e| e.weight(redundancy).max(WEIGHT_FLOOR))
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Probability of moving from `f_s` to `f_new` at temperature `t`.
pub fn acceptance_probability(f_s: f64, f_new: f64, t: f64) -> Result<f64> {
    if t.is_nan() || t <= 0.0 {
        return Err(Error::Argument(format!("temperature {t} must be positive")));
    }
    if f_new >= f_s {
        Ok(1.0)
    } else {
        Ok((-(f_s - f_new) / t).exp())
    }
}

fn weighted_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Swaps one uniformly chosen element of `current` for an unused one drawn
/// by selection weight. Returns `None` when no disjoint swap turns up within
/// the retry budget.
pub fn propose_neighbor(
    current: &[RemovalElement],
    pool: &[RemovalElement],
    redundancy: &[f64],
    rng: &mut Rng,
) -> Result<Option<Vec<RemovalElement>>> {
    let unused: Vec<RemovalElement> = pool
        .iter()
        .filter(|e| !current.contains(e))
        .copied()
        .collect();
    if unused.is_empty() || current.is_empty() {
        return Ok(None);
    }
    let probs = selection_probabilities(&unused, redundancy)?;
    for _ in 0..PROPOSAL_RETRIES {
        let out = rng.gen_range(0..current.len());
        let incoming = unused[weighted_index(&probs, rng)];
        let mut cand = current.to_vec();
        cand[out] = incoming;
        if block_disjoint(&cand) {
            cand.sort();
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub iteration: usize,
    pub temperature: f64,
    /// `None` when the proposal stagnated and the step was skipped.
    pub candidate: Option<Vec<RemovalElement>>,
    pub f: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub current: Vec<RemovalElement>,
    pub f_current: f64,
    pub best: Vec<RemovalElement>,
    pub f_best: f64,
    pub temperature: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealingOutcome {
    pub initial: Vec<RemovalElement>,
    pub initial_f: f64,
    pub best: Vec<RemovalElement>,
    pub best_f: f64,
    pub iterations: usize,
    pub audit: Vec<AuditEntry>,
}

/// Annealed search from the initial solution. `objective` scores a removal
/// set; the best set ever evaluated is returned.
pub fn run_annealing<F>(
    partition: &SetPartition,
    profile: &RedundancyProfile,
    k: usize,
    schedule: &AnnealingSchedule,
    mut objective: F,
) -> Result<AnnealingOutcome>
where
    F: FnMut(&[RemovalElement]) -> Result<f64>,
{
    schedule.validate()?;
    let pool = candidate_pool(partition);
    if pool.len() < k {
        return Err(Error::Infeasible(format!(
            "k = {k} exceeds the {} removal elements",
            pool.len()
        )));
    }
    let initial = build_initial_solution(partition, profile, k)?;
    let initial_f = objective(&initial)?;
    let mut state = SearchState {
        current: initial.clone(),
        f_current: initial_f,
        best: initial.clone(),
        f_best: initial_f,
        temperature: schedule.t0,
        iteration: 0,
    };
    let mut rng = stream(schedule.seed, Stream::Search);
    let mut audit = Vec::new();
    while state.temperature >= schedule.t_min {
        state.iteration += 1;
        let t = state.temperature;
        match propose_neighbor(&state.current, &pool, &profile.redundancy, &mut rng)? {
            Some(cand) => {
                let f = objective(&cand)?;
                let p = acceptance_probability(state.f_current, f, t)?;
                let accepted = p >= 1.0 || rng.gen::<f64>() < p;
                if f > state.f_best {
                    state.f_best = f;
                    state.best = cand.clone();
                }
                if accepted {
                    state.current = cand.clone();
                    state.f_current = f;
                }
                audit.push(AuditEntry {
                    iteration: state.iteration,
                    temperature: t,
                    candidate: Some(cand),
                    f: Some(f),
                    accepted,
                });
            }
            None => {
                log::debug!("annealing step {} stagnated", state.iteration);
                audit.push(AuditEntry {
                    iteration: state.iteration,
                    temperature: t,
                    candidate: None,
                    f: None,
                    accepted: false,
                });
            }
        }
        state.temperature *= schedule.alpha;
    }
    Ok(AnnealingOutcome {
        initial,
        initial_f,
        best: state.best,
        best_f: state.f_best,
        iterations: state.iteration,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::build_partition;

    #[test]
    fn default_schedule_runs_36_steps() {
        let s = AnnealingSchedule::default();
        assert_eq!(s.iterations(), 36);
        let n = s.iterations() as i32;
        assert!(15.0 * 0.85f64.powi(n) < 0.05);
        assert!(15.0 * 0.85f64.powi(n - 1) >= 0.05);
    }

    #[test]
    fn schedule_validation() {
        let ok = AnnealingSchedule::default();
        for bad in [
            AnnealingSchedule { alpha: 1.0, ..ok },
            AnnealingSchedule { alpha: 0.0, ..ok },
            AnnealingSchedule { t_min: 0.0, ..ok },
            AnnealingSchedule { t0: -1.0, ..ok },
        ] {
            assert!(bad.validate().is_err());
        }
        let cold = AnnealingSchedule { t0: 0.01, ..ok };
        assert!(cold.validate().is_ok());
        assert_eq!(cold.iterations(), 0);
    }

    #[test]
    fn probability_examples() {
        let elems = [
            RemovalElement::Prune { block: 0 },
            RemovalElement::Distill { first: 1 },
        ];
        let p = selection_probabilities(&elems, &[0.9, 0.8, 0.9]).unwrap();
        assert!((p[0] - 0.9 / 1.75).abs() < 1e-15);
        assert!((p[1] - 0.85 / 1.75).abs() < 1e-15);
        assert_eq!(
            selection_probabilities(&elems[..1], &[0.3]).unwrap(),
            vec![1.0]
        );
        let four: Vec<_> = (0..4)
            .map(|block| RemovalElement::Prune { block })
            .collect();
        assert_eq!(
            selection_probabilities(&four, &[0.5; 4]).unwrap(),
            vec![0.25; 4]
        );
        assert!(selection_probabilities(&[], &[]).is_err());
        let neg = selection_probabilities(&elems, &[-0.5, 0.2, 0.4]).unwrap();
        assert!(neg[0] > 0.0 && (neg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(acceptance_probability(0.62, 0.65, 1.0).unwrap(), 1.0);
        assert!((acceptance_probability(0.62, 0.60, 1.0).unwrap() - 0.980199).abs() < 1e-6);
        assert!(acceptance_probability(0.62, 0.60, 1e-6).unwrap() < 1e-100);
        assert!(acceptance_probability(0.6, 0.5, 0.0).is_err());
        assert!(acceptance_probability(0.6, 0.5, -1.0).is_err());
    }

    #[test]
    fn proposals_swap_exactly_one_element() {
        let pool: Vec<_> = (0..6)
            .map(|block| RemovalElement::Prune { block })
            .collect();
        let current = vec![pool[0], pool[3]];
        let r = [0.5; 6];
        let mut rng = stream(1, Stream::Search);
        for _ in 0..200 {
            let cand = propose_neighbor(&current, &pool, &r, &mut rng)
                .unwrap()
                .unwrap();
            let diff = cand.iter().filter(|e| !current.contains(e)).count()
                + current.iter().filter(|e| !cand.contains(e)).count();
            assert_eq!(diff, 2);
        }
        let only: Vec<_> = vec![pool[0], pool[3], pool[5]];
        for _ in 0..20 {
            let cand = propose_neighbor(&current, &only, &r, &mut rng)
                .unwrap()
                .unwrap();
            assert!(cand.contains(&pool[5]));
        }
    }

    #[test]
    fn overlapping_swaps_never_surface() {
        // Pool with overlapping elements: distill(1) overlaps prune(1), prune(2).
        let pool = vec![
            RemovalElement::Prune { block: 0 },
            RemovalElement::Prune { block: 1 },
            RemovalElement::Distill { first: 1 },
            RemovalElement::Prune { block: 3 },
        ];
        let current = vec![
            RemovalElement::Prune { block: 1 },
            RemovalElement::Prune { block: 3 },
        ];
        let r = [0.5, 0.5, 0.5, 0.5];
        let mut rng = stream(9, Stream::Search);
        for _ in 0..200 {
            if let Some(c) = propose_neighbor(&current, &pool, &r, &mut rng).unwrap() {
                assert!(block_disjoint(&c));
            }
        }
        let blocked = vec![
            RemovalElement::Prune { block: 1 },
            RemovalElement::Prune { block: 2 },
        ];
        let pool2 = vec![blocked[0], blocked[1], RemovalElement::Distill { first: 1 }];
        assert_eq!(
            propose_neighbor(&blocked, &pool2, &[0.5; 3], &mut rng).unwrap(),
            None
        );
    }

    fn toy() -> (RedundancyProfile, SetPartition) {
        let prof = RedundancyProfile {
            redundancy: vec![0.3, 0.92, 0.5, 0.97, 0.96, 0.4, 0.88, 0.7, 0.2, 0.6],
            pair_metric: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.96, 0.5, 0.5, 0.97],
        };
        let part = build_partition(&prof, 3, 0.95).unwrap();
        (prof, part)
    }

    #[test]
    fn separable_objective_finds_optimum() {
        let prof = RedundancyProfile {
            redundancy: vec![0.3, 0.92, 0.5, 0.97, 0.96, 0.4],
            pair_metric: vec![0.5, 0.6, 0.7, 0.8, 0.96],
        };
        let part = build_partition(&prof, 2, 0.95).unwrap();
        let score = |e: &RemovalElement| ((e.first_block() * 7 + 3) % 11) as f64 / 10.0;
        let obj = |s: &[RemovalElement]| Ok(s.iter().map(score).sum::<f64>());
        for seed in 0..20 {
            let schedule = AnnealingSchedule {
                seed,
                ..AnnealingSchedule::default()
            };
            let out = run_annealing(&part, &prof, 2, &schedule, obj).unwrap();
            let brute =
                crate::search::brute_force_optimum(&part, 2, obj, crate::search::DEFAULT_CAP)
                    .unwrap();
            assert_eq!(out.best_f, brute.best_f, "seed {seed}");
        }
    }

    #[test]
    fn audit_records_every_step() {
        let (prof, part) = toy();
        let score = |e: &RemovalElement| ((e.first_block() * 7 + 3) % 11) as f64 / 10.0;
        let obj = |s: &[RemovalElement]| Ok(s.iter().map(score).sum::<f64>());
        let out = run_annealing(&part, &prof, 3, &AnnealingSchedule::default(), obj).unwrap();
        assert_eq!(out.iterations, 36);
        assert_eq!(out.audit.len(), 36);
        assert!(out.best_f >= out.initial_f);
        let mut best = f64::MIN;
        for e in &out.audit {
            if let Some(f) = e.f {
                best = best.max(f);
            }
            let c = e.candidate.as_ref().unwrap();
            assert_eq!(c.len(), 3);
            assert!(block_disjoint(c));
        }
        assert_eq!(best.max(out.initial_f), out.best_f);
    }

    #[test]
    fn deterministic_and_zero_iteration() {
        let (prof, part) = toy();
        let obj = |s: &[RemovalElement]| Ok(s.iter().map(|e| e.first_block() as f64).sum::<f64>());
        let a = run_annealing(&part, &prof, 3, &AnnealingSchedule::default(), obj).unwrap();
        let b = run_annealing(&part, &prof, 3, &AnnealingSchedule::default(), obj).unwrap();
        assert_eq!(a, b);
        let cold = AnnealingSchedule {
            t0: 0.01,
            ..AnnealingSchedule::default()
        };
        let z = run_annealing(&part, &prof, 3, &cold, obj).unwrap();
        assert_eq!(z.iterations, 0);
        assert_eq!(z.best, z.initial);
        assert!(matches!(
            run_annealing(&part, &prof, 11, &AnnealingSchedule::default(), obj),
            Err(Error::Infeasible(_))
        ));
    }
}
