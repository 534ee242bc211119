//! Kendall's tau-b in O(n log n) (Knight's merge-sort algorithm).

use crate::error::{Error, Result};

/// Pair counts behind tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KendallCounts {
    pub n: u64,
    /// All pairs, n(n-1)/2.
    pub pairs: u64,
    /// Pairs tied in x.
    pub tied_x: u64,
    /// Pairs tied in y.
    pub tied_y: u64,
    /// Pairs tied in both.
    pub tied_xy: u64,
    /// Concordant minus discordant pairs.
    pub s: i64,
}

impl KendallCounts {
    pub fn tau_b(&self) -> Result<f64> {
        let dx = self.pairs - self.tied_x;
        let dy = self.pairs - self.tied_y;
        if dx == 0 || dy == 0 {
            return Err(Error::Validation("tau-b undefined: one ranking is entirely tied".into()));
        }
        Ok(self.s as f64 / ((dx as f64) * (dy as f64)).sqrt())
    }
}

fn tie_pairs(sorted: impl Iterator<Item = bool>) -> u64 {
    // `sorted` yields "equal to previous" flags.
    let mut total = 0u64;
    let mut run = 1u64;
    for same in sorted {
        if same {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Bottom-up merge sort of `v` by y, returning the number of inversions.
fn merge_count(v: &mut [(f64, f64)]) -> u64 {
    let n = v.len();
    let mut buf = v.to_vec();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if v[j].1 < v[i].1 {
                    buf[k] = v[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                } else {
                    buf[k] = v[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&v[i..mid]);
            k += mid - i;
            buf[k..k + (end - j)].copy_from_slice(&v[j..end]);
            start = end;
        }
        v.copy_from_slice(&buf);
        width *= 2;
    }
    swaps
}

pub fn kendall_counts(x: &[f64], y: &[f64]) -> Result<KendallCounts> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Validation("kendall tau needs at least 2 observations".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Validation("kendall tau input contains NaN".into()));
    }
    let n = x.len() as u64;
    let mut v: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let tied_x = tie_pairs(v.windows(2).map(|w| w[0].0 == w[1].0));
    let tied_xy = tie_pairs(v.windows(2).map(|w| w[0] == w[1]));
    let swaps = merge_count(&mut v);
    let tied_y = tie_pairs(v.windows(2).map(|w| w[0].1 == w[1].1));
    let pairs = n * (n - 1) / 2;
    let s = pairs as i64 - tied_x as i64 - tied_y as i64 + tied_xy as i64 - 2 * swaps as i64;
    Ok(KendallCounts { n, pairs, tied_x, tied_y, tied_xy, s })
}

/// Tie-corrected Kendall rank correlation.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    kendall_counts(x, y)?.tau_b()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(x: &[f64], y: &[f64]) -> (i64, u64, u64) {
        let (mut s, mut tx, mut ty) = (0i64, 0u64, 0u64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let a = (x[i] - x[j]).signum() as i64 * (x[i] != x[j]) as i64;
                let b = (y[i] - y[j]).signum() as i64 * (y[i] != y[j]) as i64;
                s += a * b;
                tx += (a == 0) as u64;
                ty += (b == 0) as u64;
            }
        }
        (s, tx, ty)
    }

    #[test]
    fn examples() {
        assert_eq!(kendall_tau(&[1., 2., 3., 4.], &[1., 2., 3., 4.]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1., 2., 3., 4.], &[4., 3., 2., 1.]).unwrap(), -1.0);
        // 5 concordant, 1 discordant pair.
        let t = kendall_tau(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(kendall_tau(&[1., 2.], &[1.]).is_err());
        assert!(kendall_tau(&[1.], &[1.]).is_err());
        assert!(kendall_tau(&[3., 3., 3.], &[1., 2., 3.]).is_err());
        assert!(kendall_tau(&[1., f64::NAN], &[1., 2.]).is_err());
    }

    #[test]
    fn ties_known_value() {
        // x = [1,1,2,3], y = [1,2,2,3]: S = 4, n0 = 6, n1 = 1, n2 = 1 -> 4/5.
        let c = kendall_counts(&[1., 1., 2., 3.], &[1., 2., 2., 3.]).unwrap();
        assert_eq!((c.s, c.tied_x, c.tied_y), (4, 1, 1));
        assert!((c.tau_b().unwrap() - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matches_pair_counting(pairs in proptest::collection::vec((0u8..6, 0u8..6), 2..80)) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let c = kendall_counts(&x, &y).unwrap();
            let (s, tx, ty) = brute(&x, &y);
            prop_assert_eq!((c.s, c.tied_x, c.tied_y), (s, tx, ty));
        }

        #[test]
        fn symmetric_and_bounded(v in proptest::collection::vec((-50i32..50, -50i32..50), 3..60)) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            if let (Ok(a), Ok(b)) = (kendall_tau(&x, &y), kendall_tau(&y, &x)) {
                prop_assert_eq!(a, b);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }
}
