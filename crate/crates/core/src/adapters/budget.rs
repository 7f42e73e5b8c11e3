//! Bottleneck sizing for parameter budgets.

use super::{param_shapes, AdapterKind, AdapterSpec};
use crate::error::{LabError, Result};

/// Upper end of the bottleneck search. Budgets at desk scale exceed what a
/// `b <= model_dim` adapter can hold, so the bottleneck is allowed to widen
/// past the host dimension up to this cap.
pub const MAX_BOTTLENECK_DIM: usize = 8192;

pub const DEFAULT_TOLERANCE: f64 = 0.02;

/// Points in a split may differ from the equal-share bottleneck by this much.
const SPLIT_SPREAD: usize = 3;

pub fn count_for_spec(spec: &AdapterSpec) -> usize {
    param_shapes(spec)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

fn count_at(kind: AdapterKind, model_dim: usize, b: usize) -> usize {
    count_for_spec(&AdapterSpec::new(kind, model_dim, b))
}

pub fn minimum_count(kind: AdapterKind, model_dim: usize) -> usize {
    count_at(kind, model_dim, 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSolution {
    pub spec: AdapterSpec,
    pub realized: usize,
    pub target: usize,
    /// False when no bottleneck lands within tolerance; the closest is returned.
    pub within_tolerance: bool,
}

impl BudgetSolution {
    pub fn relative_error(&self) -> f64 {
        rel(self.realized, self.target)
    }
}

fn rel(realized: usize, target: usize) -> f64 {
    (realized as f64 - target as f64).abs() / target.max(1) as f64
}

/// Bottleneck whose count is closest to `target` (ties go to the smaller one),
/// by binary search on the strictly increasing count.
fn closest_b(kind: AdapterKind, model_dim: usize, target: usize) -> usize {
    let (mut lo, mut hi) = (1usize, MAX_BOTTLENECK_DIM);
    if count_at(kind, model_dim, hi) <= target {
        return hi;
    }
    // invariant: count(hi) > target; find the first b with count(b) >= target
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if count_at(kind, model_dim, mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if lo > 1 {
        let below = count_at(kind, model_dim, lo - 1);
        let above = count_at(kind, model_dim, lo);
        if target - below <= above - target {
            return lo - 1;
        }
    }
    lo
}

pub fn solve_bottleneck_for_budget(
    kind: AdapterKind,
    model_dim: usize,
    target_params: usize,
    tolerance_frac: f64,
) -> Result<BudgetSolution> {
    if model_dim == 0 {
        return Err(LabError::Config("model_dim must be positive".into()));
    }
    let minimum = minimum_count(kind, model_dim);
    if target_params < minimum {
        return Err(LabError::InfeasibleBudget {
            target: target_params as u64,
            minimum: minimum as u64,
        });
    }
    let b = closest_b(kind, model_dim, target_params);
    let spec = AdapterSpec::new(kind, model_dim, b);
    let realized = count_for_spec(&spec);
    let within_tolerance = rel(realized, target_params) <= tolerance_frac;
    if !within_tolerance {
        log::warn!(
            "{kind} d={model_dim}: closest count {realized} misses target {target_params} by more than {:.1}%",
            tolerance_frac * 100.0
        );
    }
    Ok(BudgetSolution {
        spec,
        realized,
        target: target_params,
        within_tolerance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSolution {
    pub specs: Vec<AdapterSpec>,
    pub counts: Vec<usize>,
    pub realized: usize,
    pub target: usize,
    pub within_tolerance: bool,
}

impl SplitSolution {
    pub fn relative_error(&self) -> f64 {
        rel(self.realized, self.target)
    }
}

/// Sizes `points` adapters whose counts sum to `total_target`.
///
/// Each point gets an equal share of the budget. Because counts move in coarse
/// steps, individual bottlenecks may deviate from the equal-share solution by
/// a few units; among those nondecreasing assignments the one whose total is
/// closest to the target wins (ties prefer the smaller spread).
pub fn solve_split(
    kind: AdapterKind,
    model_dim: usize,
    total_target: usize,
    points: usize,
    tolerance_frac: f64,
) -> Result<SplitSolution> {
    if points == 0 {
        return Err(LabError::Config("cannot split a budget over zero points".into()));
    }
    let share = total_target / points;
    let minimum = minimum_count(kind, model_dim);
    if share < minimum {
        return Err(LabError::InfeasibleBudget {
            target: total_target as u64,
            minimum: (minimum * points) as u64,
        });
    }
    let b0 = closest_b(kind, model_dim, share);
    let lo = b0.saturating_sub(SPLIT_SPREAD).max(1);
    let hi = (b0 + SPLIT_SPREAD).min(MAX_BOTTLENECK_DIM);
    let table: Vec<usize> = (lo..=hi).map(|b| count_at(kind, model_dim, b)).collect();

    let mut best: Option<(usize, usize, Vec<usize>)> = None;
    let mut visit = |bs: &[usize]| {
        let total: usize = bs.iter().map(|&b| table[b - lo]).sum();
        let key = (total.abs_diff(total_target), bs[bs.len() - 1] - bs[0]);
        if best.as_ref().map_or(true, |(e, s, _)| key < (*e, *s)) {
            best = Some((key.0, key.1, bs.to_vec()));
        }
    };
    enumerate_nondecreasing(lo, hi, points, &mut Vec::with_capacity(points), &mut visit);
    let bs = best.map(|(_, _, bs)| bs).unwrap_or_else(|| vec![b0; points]);

    let specs: Vec<AdapterSpec> = bs
        .iter()
        .map(|&b| AdapterSpec::new(kind, model_dim, b))
        .collect();
    let counts: Vec<usize> = specs.iter().map(count_for_spec).collect();
    let realized = counts.iter().sum();
    let within_tolerance = rel(realized, total_target) <= tolerance_frac;
    Ok(SplitSolution {
        specs,
        counts,
        realized,
        target: total_target,
        within_tolerance,
    })
}

fn enumerate_nondecreasing(
    lo: usize,
    hi: usize,
    len: usize,
    prefix: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if prefix.len() == len {
        visit(prefix);
        return;
    }
    let start = prefix.last().copied().unwrap_or(lo);
    for b in start..=hi {
        prefix.push(b);
        enumerate_nondecreasing(lo, hi, len, prefix, visit);
        prefix.pop();
    }
}
