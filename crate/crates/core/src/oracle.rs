//! Ground-truth baselines on discrete uniform samples: exact optimal
//! transport via the assignment problem, a brute-force checker, log-domain
//! entropic (Sinkhorn) transport, and barycentric projection maps.
//!
//! Every value uses the half-quadratic cost `c(x, y) = 0.5 ||x - y||^2`, so
//! numbers are directly comparable with the restricted-dual estimates.

use ndarray::Array2;

use crate::distributions::SampleSet;
use crate::exec;
use crate::{Error, Result};

/// Dense N x N work above this size is refused outright.
pub const DENSE_LIMIT: usize = 20_000;

/// A discrete coupling with its transport cost.
#[derive(Debug, Clone)]
pub struct Coupling {
    /// n_mu x n_nu nonnegative matrix with row sums 1/n_mu and column sums
    /// 1/n_nu (up to solver tolerance).
    pub matrix: Array2<f64>,
    /// sum_ij pi_ij * 0.5 ||x_i - y_j||^2.
    pub value: f64,
}

impl Coupling {
    /// Largest absolute deviation of any row or column sum from its uniform
    /// target.
    pub fn marginal_violation(&self) -> f64 {
        let (n, m) = self.matrix.dim();
        let target_row = 1.0 / n as f64;
        let target_col = 1.0 / m as f64;
        let mut worst = 0.0f64;
        for i in 0..n {
            let s: f64 = self.matrix.row(i).sum();
            worst = worst.max((s - target_row).abs());
        }
        for j in 0..m {
            let s: f64 = self.matrix.column(j).sum();
            worst = worst.max((s - target_col).abs());
        }
        worst
    }
}

fn half_sq_dist(a: &SampleSet, i: usize, b: &SampleSet, j: usize) -> f64 {
    let d = a.dim();
    let mut acc = 0.0;
    for c in 0..d {
        let diff = a.points()[[i, c]] - b.points()[[j, c]];
        acc += diff * diff;
    }
    0.5 * acc
}

fn cost_matrix(s_mu: &SampleSet, s_nu: &SampleSet) -> Result<Array2<f64>> {
    if s_mu.dim() != s_nu.dim() {
        return Err(Error::invalid("cost matrix: dimension mismatch"));
    }
    let n = s_mu.count();
    let m = s_nu.count();
    if n.max(m) > DENSE_LIMIT {
        return Err(Error::TooLarge {
            n: n.max(m),
            limit: DENSE_LIMIT,
        });
    }
    let rows = exec::map_indices(n, |i| {
        let mut row = vec![0.0f64; m];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = half_sq_dist(s_mu, i, s_nu, j);
        }
        row
    });
    let mut c = Array2::<f64>::zeros((n, m));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            c[[i, j]] = *v;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub w2: f64,
    pub w2_squared: f64,
    /// permutation[i] = index of the nu sample matched to mu sample i.
    pub permutation: Vec<usize>,
}

/// Exact squared distance between equal-size uniform empirical measures via
/// the assignment problem (shortest-augmenting-path Hungarian, O(N^3)).
pub fn exact_w2_assignment(s_mu: &SampleSet, s_nu: &SampleSet) -> Result<AssignmentResult> {
    let n = s_mu.count();
    if n != s_nu.count() {
        return Err(Error::invalid(format!(
            "exact transport needs equal sample counts (got {n} and {})",
            s_nu.count()
        )));
    }
    let cost = cost_matrix(s_mu, s_nu)?;
    let permutation = hungarian_min_assignment(&cost);
    let total: f64 = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum();
    let w2_squared = total / n as f64;
    Ok(AssignmentResult {
        w2: w2_squared.max(0.0).sqrt(),
        w2_squared,
        permutation,
    })
}

/// Shortest-augmenting-path assignment with dual potentials. Returns the
/// column matched to each row.
fn hungarian_min_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut match_row = vec![0usize; n + 1]; // row matched to each column
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        match_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = match_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[match_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if match_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_row[j0] = match_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[match_row[j] - 1] = j - 1;
    }
    perm
}

/// Exhaustive minimum over all assignments; the oracle for the oracle.
/// Refuses N > 8.
pub fn brute_force_w2(s_mu: &SampleSet, s_nu: &SampleSet) -> Result<f64> {
    let n = s_mu.count();
    if n != s_nu.count() {
        return Err(Error::invalid("brute force needs equal sample counts"));
    }
    if n > 8 {
        return Err(Error::invalid(format!(
            "brute force limited to N <= 8 (got {n})"
        )));
    }
    let cost = cost_matrix(s_mu, s_nu)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if total < best {
            best = total;
        }
    });
    Ok(best / n as f64)
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub coupling: Coupling,
    pub marginal_violation: f64,
    pub sweeps: usize,
}

/// Log-domain Sinkhorn on the half-quadratic cost with uniform marginals.
/// One sweep updates the row potentials then the column potentials; both
/// updates are stabilized log-sum-exp computations, so no scaling factor can
/// overflow regardless of epsilon.
pub fn sinkhorn(
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    epsilon: f64,
    iters: usize,
) -> Result<SinkhornResult> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("sinkhorn: epsilon must be positive"));
    }
    if iters == 0 {
        return Err(Error::invalid("sinkhorn: need at least one sweep"));
    }
    let cost = cost_matrix(s_mu, s_nu)?;
    let (n, m) = cost.dim();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];

    for _ in 0..iters {
        let new_f = exec::map_indices(n, |i| {
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..m {
                maxv = maxv.max((g[j] - cost[[i, j]]) / epsilon);
            }
            let mut sum = 0.0;
            for j in 0..m {
                sum += ((g[j] - cost[[i, j]]) / epsilon - maxv).exp();
            }
            epsilon * (log_a - maxv - sum.ln())
        });
        f = new_f;
        let new_g = exec::map_indices(m, |j| {
            let mut maxv = f64::NEG_INFINITY;
            for i in 0..n {
                maxv = maxv.max((f[i] - cost[[i, j]]) / epsilon);
            }
            let mut sum = 0.0;
            for i in 0..n {
                sum += ((f[i] - cost[[i, j]]) / epsilon - maxv).exp();
            }
            epsilon * (log_b - maxv - sum.ln())
        });
        g = new_g;
    }

    let mut pi = Array2::<f64>::zeros((n, m));
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = ((f[i] + g[j] - cost[[i, j]]) / epsilon).exp();
            pi[[i, j]] = p;
            value += p * cost[[i, j]];
        }
    }
    let coupling = Coupling { matrix: pi, value };
    let marginal_violation = coupling.marginal_violation();
    Ok(SinkhornResult {
        coupling,
        marginal_violation,
        sweeps: iters,
    })
}

/// Conditional-mean map under a coupling: row i of the output is
/// `sum_j pi_ij y_j / sum_j pi_ij`, the barycentric projection at x_i.
pub fn barycentric_map(
    coupling: &Coupling,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
) -> Result<SampleSet> {
    let (n, m) = coupling.matrix.dim();
    if n != s_mu.count() || m != s_nu.count() {
        return Err(Error::invalid("barycentric: coupling shape mismatch"));
    }
    let d = s_nu.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let mass: f64 = coupling.matrix.row(i).sum();
        if !(mass > 0.0) {
            return Err(Error::invalid(format!(
                "barycentric: zero row mass at sample {i}"
            )));
        }
        for j in 0..m {
            let w = coupling.matrix[[i, j]];
            if w != 0.0 {
                for c in 0..d {
                    out[[i, c]] += w * s_nu.points()[[j, c]];
                }
            }
        }
        for c in 0..d {
            out[[i, c]] /= mass;
        }
    }
    SampleSet::new(out)
}

/// Mean Euclidean distance between corresponding rows of two maps evaluated
/// at the same source points.
pub fn map_error(estimated: &SampleSet, reference: &SampleSet) -> Result<f64> {
    if estimated.count() != reference.count() || estimated.dim() != reference.dim() {
        return Err(Error::invalid("map error: shape mismatch"));
    }
    let n = estimated.count();
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        for c in 0..estimated.dim() {
            let diff = estimated.points()[[i, c]] - reference.points()[[i, c]];
            acc += diff * diff;
        }
        total += acc.sqrt();
    }
    Ok(total / n as f64)
}

/// The permutation coupling induced by an assignment.
pub fn permutation_coupling(assignment: &AssignmentResult, n: usize) -> Coupling {
    let mut pi = Array2::<f64>::zeros((n, n));
    let mass = 1.0 / n as f64;
    for (i, &j) in assignment.permutation.iter().enumerate() {
        pi[[i, j]] = mass;
    }
    Coupling {
        matrix: pi,
        value: assignment.w2_squared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{sample_gaussian, stream_rng, GaussianSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn two_point_fixture() -> (SampleSet, SampleSet) {
        let s_mu = SampleSet::new(array![[-1.0], [1.0]]).unwrap();
        let s_nu = SampleSet::new(array![[-2.0], [2.0]]).unwrap();
        (s_mu, s_nu)
    }

    fn random_set(n: usize, d: usize, seed: u64) -> SampleSet {
        sample_gaussian(&GaussianSpec::standard(d), n, seed).unwrap()
    }

    #[test]
    fn fixture_assignment_value_and_pairing() {
        let (s_mu, s_nu) = two_point_fixture();
        let res = exact_w2_assignment(&s_mu, &s_nu).unwrap();
        assert_abs_diff_eq!(res.w2_squared, 0.5, epsilon = 1e-12);
        assert_eq!(res.permutation, vec![0, 1]); // match by sign
    }

    #[test]
    fn identical_samples_cost_zero() {
        let s = random_set(10, 2, 7);
        let res = exact_w2_assignment(&s, &s).unwrap();
        assert_abs_diff_eq!(res.w2, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unequal_counts_rejected() {
        let a = random_set(4, 2, 1);
        let b = random_set(5, 2, 2);
        assert!(exact_w2_assignment(&a, &b).is_err());
    }

    #[test]
    fn brute_force_agrees_on_fixture_and_random() {
        let (s_mu, s_nu) = two_point_fixture();
        assert_abs_diff_eq!(brute_force_w2(&s_mu, &s_nu).unwrap(), 0.5, epsilon = 1e-12);

        let a = random_set(7, 2, 3);
        let b = random_set(7, 2, 4);
        let exact = exact_w2_assignment(&a, &b).unwrap();
        let brute = brute_force_w2(&a, &b).unwrap();
        assert_abs_diff_eq!(exact.w2_squared, brute, epsilon = 1e-12);
    }

    #[test]
    fn brute_force_single_pair_and_refusal() {
        let a = SampleSet::new(array![[0.0, 0.0]]).unwrap();
        let b = SampleSet::new(array![[3.0, 4.0]]).unwrap();
        assert_abs_diff_eq!(brute_force_w2(&a, &b).unwrap(), 12.5); // 0.5 * 25

        let big = random_set(9, 1, 5);
        assert!(brute_force_w2(&big, &big).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_many_seeds() {
        for seed in 0..100u64 {
            let mut rng = stream_rng(seed, 60);
            let n = 2 + (rng.random::<f64>() * 7.0) as usize; // 2..=8
            let a = random_set(n, 2, seed * 2 + 1);
            let b = random_set(n, 2, seed * 2 + 2);
            let exact = exact_w2_assignment(&a, &b).unwrap().w2_squared;
            let brute = brute_force_w2(&a, &b).unwrap();
            assert!(
                (exact - brute).abs() <= 1e-12,
                "seed {seed}: hungarian {exact} vs brute {brute}"
            );
        }
    }

    #[test]
    fn sinkhorn_large_epsilon_gives_product_coupling() {
        let a = random_set(6, 2, 11);
        let b = random_set(6, 2, 12);
        let res = sinkhorn(&a, &b, 1e3, 100).unwrap();
        let uniform = 1.0 / 36.0;
        for v in res.coupling.matrix.iter() {
            assert!((v - uniform).abs() < 1e-3, "entry {v} vs {uniform}");
        }
    }

    #[test]
    fn sinkhorn_small_epsilon_approaches_exact_value() {
        let (s_mu, s_nu) = two_point_fixture();
        let res = sinkhorn(&s_mu, &s_nu, 0.01, 500).unwrap();
        assert!(
            (res.coupling.value - 0.5).abs() < 0.02,
            "value {}",
            res.coupling.value
        );
        assert!(res.coupling.value >= 0.5 - 1e-9, "entropic value below exact");
    }

    #[test]
    fn sinkhorn_marginals_tight_after_200_sweeps() {
        for (n, seed) in [(20usize, 1u64), (50, 2), (100, 3)] {
            let a = random_set(n, 2, seed * 10 + 1);
            let b = random_set(n, 2, seed * 10 + 2);
            let res = sinkhorn(&a, &b, 0.1, 200).unwrap();
            assert!(
                res.marginal_violation <= 1e-6,
                "n={n}: violation {}",
                res.marginal_violation
            );
        }
    }

    #[test]
    fn sinkhorn_value_monotone_and_above_exact() {
        let a = random_set(12, 2, 21);
        let b = random_set(12, 2, 22);
        let exact = exact_w2_assignment(&a, &b).unwrap().w2_squared;
        let mut last = f64::INFINITY;
        let mut last_violation = f64::INFINITY;
        for sweeps in [5usize, 10, 25, 50, 100, 200] {
            let res = sinkhorn(&a, &b, 0.05, sweeps).unwrap();
            assert!(
                res.coupling.value <= last + 1e-12,
                "value rose at {sweeps} sweeps: {last} -> {}",
                res.coupling.value
            );
            assert!(
                res.marginal_violation <= last_violation + 1e-12,
                "violation rose at {sweeps} sweeps"
            );
            assert!(res.coupling.value >= exact - 1e-9);
            last = res.coupling.value;
            last_violation = res.marginal_violation;
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_epsilon() {
        let (a, b) = two_point_fixture();
        assert!(sinkhorn(&a, &b, 0.0, 10).is_err());
        assert!(sinkhorn(&a, &b, -1.0, 10).is_err());
    }

    #[test]
    fn barycentric_permutation_recovers_matched_points() {
        let (s_mu, s_nu) = two_point_fixture();
        let assignment = exact_w2_assignment(&s_mu, &s_nu).unwrap();
        let coupling = permutation_coupling(&assignment, 2);
        let map = barycentric_map(&coupling, &s_mu, &s_nu).unwrap();
        assert_abs_diff_eq!(map.points()[[0, 0]], -2.0);
        assert_abs_diff_eq!(map.points()[[1, 0]], 2.0);
    }

    #[test]
    fn barycentric_product_coupling_gives_mean() {
        let (s_mu, s_nu) = two_point_fixture();
        let coupling = Coupling {
            matrix: Array2::from_elem((2, 2), 0.25),
            value: 0.0,
        };
        let map = barycentric_map(&coupling, &s_mu, &s_nu).unwrap();
        assert_abs_diff_eq!(map.points()[[0, 0]], 0.0);
        assert_abs_diff_eq!(map.points()[[1, 0]], 0.0);
    }

    #[test]
    fn barycentric_sharp_sinkhorn_close_to_matching() {
        let (s_mu, s_nu) = two_point_fixture();
        let res = sinkhorn(&s_mu, &s_nu, 0.01, 500).unwrap();
        let map = barycentric_map(&res.coupling, &s_mu, &s_nu).unwrap();
        assert!((map.points()[[0, 0]] + 2.0).abs() < 0.1);
        assert!((map.points()[[1, 0]] - 2.0).abs() < 0.1);
    }

    #[test]
    fn map_error_translation_and_zero() {
        let s = random_set(50, 2, 31);
        assert_abs_diff_eq!(map_error(&s, &s).unwrap(), 0.0);
        let shifted = crate::distributions::affine_pushforward(
            &s,
            &ndarray::Array2::eye(2),
            &array![3.0, 4.0],
        )
        .unwrap();
        assert_abs_diff_eq!(map_error(&shifted, &s).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn dense_guard_refuses_oversized_problems() {
        // the guard fires before the N x N matrix is allocated
        let big = SampleSet::new(Array2::<f64>::ones((DENSE_LIMIT + 1, 1))).unwrap();
        match sinkhorn(&big, &big, 0.1, 1) {
            Err(Error::TooLarge { n, limit }) => {
                assert_eq!(n, DENSE_LIMIT + 1);
                assert_eq!(limit, DENSE_LIMIT);
            }
            other => panic!("expected size refusal, got {other:?}"),
        }
    }
}
