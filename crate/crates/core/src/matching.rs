//! Optimal bipartite assignment between the K predictions and the
//! no-entity-padded gold set, plus the likelihood training loss.

use crate::autodiff::Var;
use crate::corpus::{Entity, EntitySet};
use crate::denoiser::{DenoiserOutput, Session, TracedDenoise};
use crate::error::{Error, Result};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Assignment of each prediction row to a gold index or no-entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Matching {
    pub fn matched_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

/// Pairwise cost between prediction row `k` and a gold entity (or no-entity):
/// zero for no-entity, otherwise the negated sum of the three probabilities
/// the prediction puts on the gold boundaries and type.
pub fn matching_cost(output: &DenoiserOutput, k: usize, gold: Option<&Entity>) -> f64 {
    match gold {
        None => 0.0,
        Some(g) => {
            -(output.p_left[[k, g.left]]
                + output.p_right[[k, g.right]]
                + output.p_class[[k, g.label]])
        }
    }
}

/// Minimum-cost assignment via the Hungarian algorithm on the `K x K`
/// no-entity-padded cost matrix. Ties are resolved deterministically; equal
/// cost swaps are canonicalized toward the lexicographically smallest
/// assignment vector (no-entity ordered after every gold index).
pub fn hungarian_match(output: &DenoiserOutput, gold: &EntitySet) -> Result<Matching> {
    let k = output.k();
    let n = gold.len();
    if k < n {
        return Err(Error::Validation(format!(
            "cannot match K = {k} predictions against N = {n} gold entities (need K >= N)"
        )));
    }
    for g in &gold.entities {
        if g.left >= output.p_left.ncols()
            || g.right >= output.p_right.ncols()
            || g.label + 1 >= output.p_class.ncols()
        {
            return Err(Error::Validation(format!(
                "gold entity ({}, {}, {}) out of range for the prediction tables",
                g.left, g.right, g.label
            )));
        }
    }

    // columns 0..n are real golds, the rest are no-entity slots at cost 0
    let cost = |row: usize, col: usize| -> f64 {
        if col < n {
            matching_cost(output, row, Some(&gold.entities[col]))
        } else {
            0.0
        }
    };

    let mut assignment = solve_square_assignment(k, &cost);
    canonicalize_ties(&mut assignment, &cost, n);

    let total_cost = assignment
        .iter()
        .enumerate()
        .map(|(row, a)| match a {
            Some(col) => cost(row, *col),
            None => 0.0,
        })
        .sum();
    Ok(Matching { assignment, total_cost })
}

/// Shortest-augmenting-path Hungarian algorithm (O(n^3)), deterministic scan
/// order. Returns, per row, the column index mapped to `Some(gold)` for real
/// columns by the caller.
fn solve_square_assignment(size: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    if size == 0 {
        return Vec::new();
    }
    let n = size;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut rows = vec![0usize; n];
    for j in 1..=n {
        rows[p[j] - 1] = j - 1;
    }
    rows.into_iter().map(Some).collect()
}

/// Swap equal-cost target pairs until the assignment vector (with no-entity
/// greater than any gold index) is locally lexicographically minimal.
fn canonicalize_ties(
    assignment: &mut [Option<usize>],
    cost: &dyn Fn(usize, usize) -> f64,
    n_gold: usize,
) {
    // padded columns are interchangeable no-entity slots
    for a in assignment.iter_mut() {
        if a.map_or(false, |c| c >= n_gold) {
            *a = None;
        }
    }
    let order = |a: Option<usize>| a.unwrap_or(usize::MAX);
    let eff_cost = |row: usize, a: Option<usize>| -> f64 {
        match a {
            Some(c) => cost(row, c),
            None => 0.0,
        }
    };
    loop {
        let mut swapped = false;
        for i in 0..assignment.len() {
            for j in i + 1..assignment.len() {
                let (a, b) = (assignment[i], assignment[j]);
                if order(b) >= order(a) {
                    continue;
                }
                let current = eff_cost(i, a) + eff_cost(j, b);
                let flipped = eff_cost(i, b) + eff_cost(j, a);
                if flipped == current {
                    assignment.swap(i, j);
                    swapped = true;
                }
            }
        }
        if !swapped {
            break;
        }
    }
}

/// Negative log-likelihood of the matched targets. Matched rows contribute
/// all three terms; no-entity rows are supervised on the no-entity class
/// only, scaled by `null_weight`. Probabilities are floored at 1e-12.
pub fn diffusion_loss(
    output: &DenoiserOutput,
    gold: &EntitySet,
    matching: &Matching,
    null_weight: f64,
) -> f64 {
    let null_class = output.p_class.ncols() - 1;
    let mut loss = 0.0;
    for (k, a) in matching.assignment.iter().enumerate() {
        match a {
            Some(g) => {
                let g = &gold.entities[*g];
                loss -= output.p_left[[k, g.left]].max(PROB_FLOOR).ln();
                loss -= output.p_right[[k, g.right]].max(PROB_FLOOR).ln();
                loss -= output.p_class[[k, g.label]].max(PROB_FLOOR).ln();
            }
            None => {
                loss -= null_weight * output.p_class[[k, null_class]].max(PROB_FLOOR).ln();
            }
        }
    }
    loss
}

/// Tape-level training objective. The first part is `diffusion_loss`
/// verbatim (matching held constant). The second suppresses the boundary
/// probability of every non-target word on matched rows — without it, the
/// positive-only likelihood admits the degenerate optimum of saturating
/// every sigmoid at 1, which zeroes the boundary loss while making argmax
/// decoding meaningless. Computed from the raw logits (`-ln(1 - sigmoid(z))
/// = softplus(z)`) so saturated probabilities keep a gradient.
pub fn traced_training_loss(
    s: &mut Session,
    traced: &TracedDenoise,
    gold: &EntitySet,
    matching: &Matching,
    null_weight: f64,
    boundary_negative_weight: f64,
) -> Var {
    let base = traced_diffusion_loss(s, traced, gold, matching, null_weight);
    if boundary_negative_weight == 0.0 {
        return base;
    }
    let m = s.tape.value(traced.p_left).ncols();
    let mut left_neg = Vec::new();
    let mut right_neg = Vec::new();
    for (k, a) in matching.assignment.iter().enumerate() {
        if let Some(g) = a {
            let g = &gold.entities[*g];
            for col in 0..m {
                if col != g.left {
                    left_neg.push((k, col));
                }
                if col != g.right {
                    right_neg.push((k, col));
                }
            }
        }
    }
    if left_neg.is_empty() && right_neg.is_empty() {
        return base;
    }
    let l_sel = s.tape.gather_elems(traced.left_logits, &left_neg);
    let r_sel = s.tape.gather_elems(traced.right_logits, &right_neg);
    let l_sp = s.tape.softplus(l_sel);
    let r_sp = s.tape.softplus(r_sel);
    let l_sum = s.tape.sum_all(l_sp);
    let r_sum = s.tape.sum_all(r_sp);
    let neg = s.tape.add(l_sum, r_sum);
    let neg = s.tape.scale(neg, boundary_negative_weight);
    s.tape.add(base, neg)
}

/// Tape-level version of `diffusion_loss`; the matching itself is treated as
/// a constant of the loss.
pub fn traced_diffusion_loss(
    s: &mut Session,
    traced: &TracedDenoise,
    gold: &EntitySet,
    matching: &Matching,
    null_weight: f64,
) -> Var {
    let null_class = s.tape.value(traced.p_class).ncols() - 1;
    let mut left_coords = Vec::new();
    let mut right_coords = Vec::new();
    let mut class_coords = Vec::new();
    let mut null_coords = Vec::new();
    for (k, a) in matching.assignment.iter().enumerate() {
        match a {
            Some(g) => {
                let g = &gold.entities[*g];
                left_coords.push((k, g.left));
                right_coords.push((k, g.right));
                class_coords.push((k, g.label));
            }
            None => null_coords.push((k, null_class)),
        }
    }

    let lp_left = s.tape.log_clamped(traced.p_left, PROB_FLOOR);
    let lp_right = s.tape.log_clamped(traced.p_right, PROB_FLOOR);
    let lp_class = s.tape.log_clamped(traced.p_class, PROB_FLOOR);

    let l_sel = s.tape.gather_elems(lp_left, &left_coords);
    let r_sel = s.tape.gather_elems(lp_right, &right_coords);
    let c_sel = s.tape.gather_elems(lp_class, &class_coords);
    let n_sel = s.tape.gather_elems(lp_class, &null_coords);

    let l_sum = s.tape.sum_all(l_sel);
    let r_sum = s.tape.sum_all(r_sel);
    let c_sum = s.tape.sum_all(c_sel);
    let n_sum = s.tape.sum_all(n_sel);

    let matched = s.tape.add(l_sum, r_sum);
    let matched = s.tape.add(matched, c_sum);
    let weighted_null = s.tape.scale(n_sum, null_weight);
    let total = s.tape.add(matched, weighted_null);
    s.tape.scale(total, -1.0)
}
