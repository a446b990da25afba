//! Maximum-weight perfect assignment with a lexicographic tie rule.

use super::{RankedList, ScoreMatrix};
use crate::error::{Error, Result};

/// `Σ_i s[i][perm[i]]`, summed in row order.
pub fn assignment_value(scores: &ScoreMatrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| scores.at(i, j)).sum()
}

/// Shortest-augmenting-path Hungarian method on costs `c` (minimization).
/// Returns row and column potentials with `u[i] + v[j] <= c[i][j]`.
fn hungarian_duals(c: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = c.len();
    // 1-based with a virtual column 0, as in the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[i0 - 1][j - 1] - u[i0] - v[j];
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
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Kuhn's augmenting-path check that the free rows can be perfectly matched
/// to the free columns using allowed edges.
fn has_perfect_matching(allowed: &[Vec<bool>], row_free: &[bool], col_free: &[bool]) -> bool {
    let n = allowed.len();
    let mut match_col = vec![usize::MAX; n];
    fn augment(
        r: usize,
        allowed: &[Vec<bool>],
        col_free: &[bool],
        seen: &mut [bool],
        match_col: &mut [usize],
    ) -> bool {
        for c in 0..allowed.len() {
            if col_free[c] && allowed[r][c] && !seen[c] {
                seen[c] = true;
                if match_col[c] == usize::MAX || augment(match_col[c], allowed, col_free, seen, match_col) {
                    match_col[c] = r;
                    return true;
                }
            }
        }
        false
    }
    for r in (0..n).filter(|&r| row_free[r]) {
        let mut seen = vec![false; n];
        if !augment(r, allowed, col_free, &mut seen, &mut match_col) {
            return false;
        }
    }
    true
}

/// Permutation maximizing `Σ_i s[i][π(i)]`; among optimal permutations the
/// lexicographically smallest `(π(0), π(1), …)` is returned.
///
/// Optimal duals identify the tight edges, which carry every optimal
/// assignment. Rows then take the smallest tight column that still leaves a
/// perfect tight matching for the remaining rows.
pub fn decode_permutation(scores: &ScoreMatrix) -> Result<RankedList> {
    let n = scores.n();
    if n == 0 {
        return Err(Error::LengthMismatch("cannot decode an empty score matrix".into()));
    }
    if !scores.array().is_finite() {
        return Err(Error::NonFiniteScores);
    }
    let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| -scores.at(i, j)).collect()).collect();
    let (u, v) = hungarian_duals(&cost);
    let tol = 1e-9 * scores.max_abs().max(1.0);
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| (cost[i][j] - u[i] - v[j]).abs() <= tol).collect())
        .collect();

    let mut row_free = vec![true; n];
    let mut col_free = vec![true; n];
    let mut perm = vec![0; n];
    for i in 0..n {
        row_free[i] = false;
        let mut chosen = None;
        for j in 0..n {
            if !(col_free[j] && tight[i][j]) {
                continue;
            }
            col_free[j] = false;
            if has_perfect_matching(&tight, &row_free, &col_free) {
                chosen = Some(j);
                break;
            }
            col_free[j] = true;
        }
        perm[i] = chosen.expect("optimal duals always admit a tight perfect matching");
    }
    RankedList::from_permutation(perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(s: &ScoreMatrix) -> (f64, Vec<usize>) {
        let n = s.n();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = (f64::NEG_INFINITY, perm.clone());
        loop {
            let v = assignment_value(s, &perm);
            if v > best.0 {
                best = (v, perm.clone());
            }
            // next permutation in lexicographic order
            let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
                return best;
            };
            let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
            perm.swap(i, j);
            perm[i + 1..].reverse();
        }
    }

    #[test]
    fn diagonal_optimum() {
        let s = ScoreMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])
            .unwrap();
        assert_eq!(decode_permutation(&s).unwrap().permutation, vec![0, 1, 2]);
    }

    #[test]
    fn all_equal_is_identity() {
        let s = ScoreMatrix::from_rows(&vec![vec![0.3; 5]; 5]).unwrap();
        assert_eq!(decode_permutation(&s).unwrap().permutation, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn anti_diagonal() {
        let s = ScoreMatrix::from_rows(&[vec![0.0, 0.0, 5.0], vec![0.0, 5.0, 0.0], vec![5.0, 0.0, 0.0]])
            .unwrap();
        assert_eq!(decode_permutation(&s).unwrap().permutation, vec![2, 1, 0]);
    }

    #[test]
    fn equal_rows_take_adjacent_positions() {
        let s = ScoreMatrix::from_rows(&[vec![3.0, 2.0, 1.0], vec![1.0, 2.5, 3.0], vec![3.0, 2.0, 1.0]])
            .unwrap();
        let r = decode_permutation(&s).unwrap();
        assert_eq!(r.permutation, vec![0, 2, 1]);
    }

    #[test]
    fn small_integer_matrices_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(0..3) as f64).collect())
                .collect();
            let s = ScoreMatrix::from_rows(&rows).unwrap();
            let (v, p) = brute_force(&s);
            let got = decode_permutation(&s).unwrap();
            assert_eq!(got.permutation, p, "{rows:?}");
            assert_eq!(assignment_value(&s, &got.permutation), v);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let s = ScoreMatrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 0.0]]);
        assert!(matches!(s, Err(Error::NonFiniteScores)));
    }
}
