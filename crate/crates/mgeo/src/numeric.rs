//! Small numeric helpers shared across modules.
//!
//! Reductions that feed reported numbers use Kahan compensated summation and
//! a fixed left-to-right order, so results do not depend on how work was
//! partitioned across threads.

/// Compensated (Kahan) sum in slice order.
pub fn kahan_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Compensated sum of an iterator, consumed in order.
pub fn kahan_sum_iter<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    kahan_sum_iter(a.iter().zip(b).map(|(x, y)| x * y))
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// log(sum(exp(x))) with max subtraction; -inf for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + kahan_sum_iter(xs.iter().map(|&x| (x - m).exp())).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    kahan_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator). Needs at least two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    debug_assert!(xs.len() >= 2);
    let m = mean(xs);
    let ss = kahan_sum_iter(xs.iter().map(|&x| (x - m) * (x - m)));
    (ss / (xs.len() - 1) as f64).sqrt()
}
