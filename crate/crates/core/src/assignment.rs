//! Exact minimum-cost bipartite matching and slot correspondence across
//! augmented views.

use crate::error::{Result, SlotError};
use ndarray::prelude::*;

/// Square cost matrix; entry (i, j) is the cost of pairing row item i with
/// column item j.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(SlotError::Validation(format!(
                "cost matrix must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SlotError::NonFinite("cost matrix".into()));
        }
        Ok(CostMatrix { values })
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// A minimum-cost assignment: `sigma[i]` is the column matched to row i.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

impl MatchAssignment {
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.sigma.len()];
        for (i, &j) in self.sigma.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }
}

/// O(K^3) Hungarian algorithm (Jonker-style shortest augmenting paths with
/// dual potentials). Ties resolve to the lexicographically smallest
/// assignment among optima because rows are inserted in order and equal-cost
/// columns are scanned left to right.
pub fn hungarian(cost: &CostMatrix) -> MatchAssignment {
    let n = cost.size();
    if n == 0 {
        return MatchAssignment {
            sigma: Vec::new(),
            total_cost: 0.0,
        };
    }
    let c = &cost.values;
    let inf = f64::INFINITY;
    // 1-based arrays; p[j] = row assigned to column j, column 0 is virtual.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            sigma[p[j] - 1] = j - 1;
        }
    }
    let total_cost = sigma
        .iter()
        .enumerate()
        .map(|(i, &j)| c[[i, j]])
        .sum();
    MatchAssignment { sigma, total_cost }
}

/// Cosine similarity between two vectors; zero-norm inputs yield 0 and bump
/// the warning counter.
fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>, zero_norm_warnings: &mut usize) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        *zero_norm_warnings += 1;
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Outcome of matching two slot sets: the permutation, the total similarity
/// of matched pairs, and how many zero-norm slots were encountered.
#[derive(Clone, Debug)]
pub struct SlotMatch {
    pub assignment: MatchAssignment,
    pub total_similarity: f64,
    pub zero_norm_warnings: usize,
}

/// Match slots of view a to slots of view b by maximizing total cosine
/// similarity (minimizing negative cosine). Matching happens on raw slots,
/// not projections.
pub fn match_slots(slots_a: ArrayView2<f64>, slots_b: ArrayView2<f64>) -> Result<SlotMatch> {
    if slots_a.nrows() != slots_b.nrows() {
        return Err(SlotError::Validation(format!(
            "slot sets differ in size: {} vs {}",
            slots_a.nrows(),
            slots_b.nrows()
        )));
    }
    let k = slots_a.nrows();
    let mut warnings = 0usize;
    let mut cost = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            cost[[i, j]] = -cosine(slots_a.row(i), slots_b.row(j), &mut warnings);
        }
    }
    let assignment = hungarian(&CostMatrix::new(cost)?);
    let total_similarity = -assignment.total_cost;
    Ok(SlotMatch {
        assignment,
        total_similarity,
        zero_norm_warnings: warnings,
    })
}

/// Exhaustive minimum over all permutations; test oracle for `hungarian`.
pub fn brute_force_min_cost(c: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = c.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    permute(&mut perm, 0, &mut |p| {
        let cost: f64 = p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        match &best {
            Some((_, b)) if cost >= *b => {}
            _ => best = Some((p.to_vec(), cost)),
        }
    });
    best.unwrap_or((Vec::new(), 0.0))
}

fn permute(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        f(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, f);
        perm.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_by_one() {
        let m = hungarian(&CostMatrix::new(array![[0.0]]).unwrap());
        assert_eq!(m.sigma, vec![0]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn three_by_three_known() {
        // Oracle: exhaustive search over all 6 permutations gives
        // sigma = (0->1, 1->0, 2->2), cost 1 + 2 + 2 = 5.
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let (bs, bc) = brute_force_min_cost(&c);
        assert_eq!(bs, vec![1, 0, 2]);
        assert_eq!(bc, 5.0);
        let m = hungarian(&CostMatrix::new(c).unwrap());
        assert_eq!(m.sigma, vec![1, 0, 2]);
        assert_eq!(m.total_cost, 5.0);
    }

    #[test]
    fn identity_dominant() {
        let mut c = Array2::from_elem((4, 4), 1.0);
        for i in 0..4 {
            c[[i, i]] = 0.0;
        }
        let m = hungarian(&CostMatrix::new(c).unwrap());
        assert_eq!(m.sigma, vec![0, 1, 2, 3]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let c = array![[f64::NAN, 0.0], [0.0, 0.0]];
        assert!(CostMatrix::new(c).is_err());
    }

    #[test]
    fn matches_brute_force_on_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for k in 2..=6 {
            for _ in 0..100 {
                let c = Array2::from_shape_fn((k, k), |_| rng.gen_range(-5.0..5.0));
                let m = hungarian(&CostMatrix::new(c.clone()).unwrap());
                let (_, bc) = brute_force_min_cost(&c);
                assert!(
                    (m.total_cost - bc).abs() < 1e-9,
                    "k={k} hungarian {} vs brute {}",
                    m.total_cost,
                    bc
                );
            }
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        // All-equal costs: any permutation is optimal; identity expected.
        let c = Array2::from_elem((4, 4), 1.0);
        let m = hungarian(&CostMatrix::new(c).unwrap());
        assert_eq!(m.sigma, vec![0, 1, 2, 3]);
    }

    #[test]
    fn match_slots_identity_on_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let slots = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        let m = match_slots(slots.view(), slots.view()).unwrap();
        assert_eq!(m.assignment.sigma, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn match_slots_recovers_permutation() {
        // Orthogonal unit rows permuted; exhaustively checkable for K<=5.
        let k = 5;
        let eye = Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Array2::zeros((k, k));
        for (i, &pi) in perm.iter().enumerate() {
            permuted.row_mut(i).assign(&eye.row(pi));
        }
        // slots_b[i] = slots_a[perm[i]] so sigma should send a-row j to the
        // b-row holding it: sigma[perm[i]] = i.
        let m = match_slots(eye.view(), permuted.view()).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            assert_eq!(m.assignment.sigma[pi], i);
        }
        assert!((m.total_similarity - k as f64).abs() < 1e-12);
    }

    #[test]
    fn identical_slots_tie_break_identity() {
        let slots = Array2::from_elem((4, 6), 0.7);
        let m = match_slots(slots.view(), slots.view()).unwrap();
        assert_eq!(m.assignment.sigma, vec![0, 1, 2, 3]);
    }

    #[test]
    fn scale_invariance_of_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
            let m1 = match_slots(a.view(), b.view()).unwrap();
            let mut a2 = a.clone();
            let row = rng.gen_range(0..4);
            let scale = rng.gen_range(0.1..10.0);
            a2.row_mut(row).mapv_inplace(|x| x * scale);
            let m2 = match_slots(a2.view(), b.view()).unwrap();
            assert_eq!(m1.assignment.sigma, m2.assignment.sigma);
        }
    }

    #[test]
    fn symmetry_of_unique_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Array2::from_shape_fn((5, 7), |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((5, 7), |_| rng.gen_range(-1.0..1.0));
            let fwd = match_slots(a.view(), b.view()).unwrap();
            let bwd = match_slots(b.view(), a.view()).unwrap();
            // random continuous costs make the optimum unique a.s.
            assert_eq!(fwd.assignment.inverse(), bwd.assignment.sigma);
        }
    }

    #[test]
    fn zero_norm_slot_counted() {
        let mut a = Array2::from_elem((3, 4), 1.0);
        a.row_mut(1).fill(0.0);
        let b = Array2::from_elem((3, 4), 1.0);
        let m = match_slots(a.view(), b.view()).unwrap();
        assert!(m.zero_norm_warnings > 0);
    }
}
