//! Fixed-order floating point primitives.
//!
//! Every route that computes the same mathematical quantity (ensemble
//! prediction, reduced kernel machine, Gram assembly) goes through these
//! helpers, so identical inputs always produce identical bits regardless of
//! which caller issued the computation or which SIMD width the CPU offers.

/// Number of independent accumulators used by [`dot`]. Lane `l` accumulates
/// the products at indices `l, l + LANES, l + 2 * LANES, ...`.
const LANES: usize = 8;

#[inline(always)]
fn combine(acc: &[f64; LANES], tail: f64) -> f64 {
    let a = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let b = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (a + b) + tail
}

#[inline(always)]
fn dot_impl(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    combine(&acc, tail)
}

#[inline(always)]
fn dot4_impl(a: &[f64], rows: [&[f64]; 4], out: &mut [f64]) {
    let mut acc = [[0.0f64; LANES]; 4];
    let n = a.len() / LANES * LANES;
    let mut o = 0;
    while o < n {
        let xa = &a[o..o + LANES];
        for (r, row) in rows.iter().enumerate() {
            let xb = &row[o..o + LANES];
            for l in 0..LANES {
                acc[r][l] += xa[l] * xb[l];
            }
        }
        o += LANES;
    }
    for (r, row) in rows.iter().enumerate() {
        let mut tail = 0.0;
        for j in n..a.len() {
            tail += a[j] * row[j];
        }
        out[r] = combine(&acc[r], tail);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f64], b: &[f64]) -> f64 {
    dot_impl(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot4_avx2(a: &[f64], rows: [&[f64]; 4], out: &mut [f64]) {
    dot4_impl(a, rows, out)
}

#[inline]
fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Inner product with a fixed accumulation order.
///
/// The result depends only on the operands, never on the caller or on the
/// available vector width (no fused multiply-add is ever emitted).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    dot_impl(a, b)
}

/// `out[r] = dot(a, rows[r])` for every row of the row-major matrix `rows`
/// (row length `a.len()`). Bit-identical to calling [`dot`] per row.
pub fn dot_rows(a: &[f64], rows: &[f64], out: &mut [f64]) {
    let n = a.len();
    if n == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    assert_eq!(rows.len() % n, 0, "dot_rows: ragged matrix");
    let count = rows.len() / n;
    assert_eq!(out.len(), count, "dot_rows: output length mismatch");
    let avx2 = has_avx2();
    let mut r = 0;
    while r + 4 <= count {
        let group = [
            &rows[r * n..(r + 1) * n],
            &rows[(r + 1) * n..(r + 2) * n],
            &rows[(r + 2) * n..(r + 3) * n],
            &rows[(r + 3) * n..(r + 4) * n],
        ];
        let dst = &mut out[r..r + 4];
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: the feature was detected at runtime.
            unsafe { dot4_avx2(a, group, dst) };
            r += 4;
            continue;
        }
        let _ = avx2;
        dot4_impl(a, group, dst);
        r += 4;
    }
    while r < count {
        out[r] = dot(a, &rows[r * n..(r + 1) * n]);
        r += 1;
    }
}

/// Exact floating point accumulator.
///
/// Keeps the running sum as a list of non-overlapping partials (Shewchuk's
/// expansion arithmetic) and rounds once, correctly, in [`ExactSum::value`].
/// The rounded value is therefore independent of the order in which terms
/// were added. Non-finite terms fall back to ordinary IEEE propagation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
    special: f64,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        if !value.is_finite() {
            self.special += value;
            return;
        }
        let mut x = value;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Adds every term held by `other`; exact.
    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
        self.special += other.special;
    }

    /// Adds `factor * other` term by term. Exact when `factor` is zero, a
    /// power of two, or a negated power of two; otherwise each partial is
    /// rounded once before accumulation.
    pub fn merge_scaled(&mut self, other: &ExactSum, factor: f64) {
        if factor == 0.0 {
            return;
        }
        for &p in &other.partials {
            self.add(factor * p);
        }
        self.special += factor * other.special;
    }

    /// The correctly rounded sum of every term added so far.
    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            let y = p[n - 1];
            n -= 1;
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even correction when the remaining partials push the
        // exact value off the midpoint.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi + 0.0
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.add(v);
        }
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        s.extend(iter);
        s
    }
}

/// Correctly rounded sum of a slice.
pub fn exact_sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<ExactSum>().value()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_cancels() {
        let s: ExactSum = [1e100, 1.0, -1e100, 1e-30].into_iter().collect();
        assert_eq!(s.value(), 1.0 + 1e-30);
        assert_eq!(exact_sum(&[0.1; 10]), 1.0);
        assert_eq!(ExactSum::new().value(), 0.0);
    }

    #[test]
    fn exact_sum_half_even() {
        // 1 + 2^-53 + 2^-106 must round up: the tail breaks the tie.
        let s = exact_sum(&[1.0, 2f64.powi(-53), 2f64.powi(-106)]);
        assert_eq!(s, 1.0 + f64::EPSILON);
        // Exact tie rounds to even.
        assert_eq!(exact_sum(&[1.0, 2f64.powi(-53)]), 1.0);
    }

    #[test]
    fn non_finite_propagates() {
        assert!(exact_sum(&[1.0, f64::NAN]).is_nan());
        assert_eq!(exact_sum(&[1.0, f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn dot_rows_matches_dot() {
        let n = 37;
        let a: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let rows: Vec<f64> = (0..n * 7).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut out = vec![0.0; 7];
        dot_rows(&a, &rows, &mut out);
        for r in 0..7 {
            assert_eq!(out[r].to_bits(), dot(&a, &rows[r * n..(r + 1) * n]).to_bits());
            assert_eq!(out[r].to_bits(), dot_impl(&a, &rows[r * n..(r + 1) * n]).to_bits());
        }
    }

    #[test]
    fn negated_dot_is_exact_negation() {
        let a: Vec<f64> = (0..29).map(|i| (i as f64).sqrt() - 2.1).collect();
        let b: Vec<f64> = (0..29).map(|i| (i as f64 * 0.9).sin()).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(dot(&neg, &b), -dot(&a, &b));
    }

    #[test]
    fn empty_sum_is_positive_zero() {
        assert_eq!(exact_sum(&[]).to_bits(), 0.0f64.to_bits());
    }

    proptest! {
        #[test]
        fn exact_sum_matches_independent_oracle(
            mut xs in prop::collection::vec(-1e20f64..1e20, 0..60),
            small in prop::collection::vec(-1e-10f64..1e-10, 0..20),
        ) {
            use accurate::traits::*;
            use accurate::sum::OnlineExactSum;
            xs.extend(small);
            // the oracle panics on an empty slice
            prop_assume!(!xs.is_empty());
            let oracle = xs.iter().copied().fold(OnlineExactSum::zero(), |acc, x| acc + x).sum();
            prop_assert_eq!(exact_sum(&xs), oracle + 0.0);
        }

        #[test]
        fn exact_sum_is_order_independent(xs in prop::collection::vec(-1e6f64..1e6, 1..40), seed in 0u64..1000) {
            let mut shuffled = xs.clone();
            // deterministic rotation + reversal stands in for a permutation
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(exact_sum(&xs).to_bits(), exact_sum(&shuffled).to_bits());
        }
    }
}
