//! Floating-point helpers: compensated accumulation and log-scale reals.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Kahan–Babuška–Neumaier accumulator.
///
/// Masses near criticality span hundreds of orders of magnitude, so every
/// float accumulation of masses or moments in this crate goes through here.
#[derive(Debug, Default, Clone, Copy)]
pub struct NeumaierSum {
    s: f64,
    c: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.s + self.c
    }

    /// Associative merge of two partial accumulators.
    pub fn merge(mut self, other: NeumaierSum) -> NeumaierSum {
        self.add(other.s);
        self.add(other.c);
        self
    }
}

impl AddAssign<f64> for NeumaierSum {
    fn add_assign(&mut self, rhs: f64) {
        self.add(rhs);
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<NeumaierSum>().value()
}

/// `ln(e^a + e^b)` without overflow; `-inf` acts as the additive zero.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// A nonnegative real stored as its natural logarithm, so quantities like
/// `E(X_n)/m^n` stay representable long after `m^n` overflows.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogReal {
    ln: f64,
}

impl LogReal {
    pub const ZERO: LogReal = LogReal {
        ln: f64::NEG_INFINITY,
    };

    pub fn from_ln(ln: f64) -> Self {
        LogReal { ln }
    }

    /// Negative inputs are clamped to zero.
    pub fn from_value(x: f64) -> Self {
        if x > 0.0 {
            LogReal { ln: x.ln() }
        } else {
            LogReal::ZERO
        }
    }

    pub fn ln(&self) -> f64 {
        self.ln
    }

    pub fn log10(&self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }

    /// Plain value; underflows to 0 below ~1e-308.
    pub fn value(&self) -> f64 {
        self.ln.exp()
    }

    pub fn is_zero(&self) -> bool {
        self.ln == f64::NEG_INFINITY
    }

    pub fn add(self, other: LogReal) -> LogReal {
        LogReal {
            ln: log_add_exp(self.ln, other.ln),
        }
    }

    pub fn mul(self, other: LogReal) -> LogReal {
        if self.is_zero() || other.is_zero() {
            return LogReal::ZERO;
        }
        LogReal {
            ln: self.ln + other.ln,
        }
    }

    /// `self − other`, clamped at zero.
    pub fn sub(self, other: LogReal) -> LogReal {
        if other.is_zero() {
            return self;
        }
        if other.ln >= self.ln {
            return LogReal::ZERO;
        }
        LogReal {
            ln: self.ln + (-(other.ln - self.ln).exp()).ln_1p(),
        }
    }

    pub fn min(self, other: LogReal) -> LogReal {
        if other.ln < self.ln {
            other
        } else {
            self
        }
    }

    pub fn max(self, other: LogReal) -> LogReal {
        if other.ln > self.ln {
            other
        } else {
            self
        }
    }
}

/// Shortest decimal that round-trips to the same `f64` (at most 17
/// significant digits). Used for every float written to CSV or stdout.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:?}")
    }
}

/// Ordinary least squares of `y` on `x`: (slope, intercept, slope standard error).
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let mx = compensated_sum(x.iter().copied()) / nf;
    let my = compensated_sum(y.iter().copied()) / nf;
    let sxx = compensated_sum(x.iter().map(|&xi| (xi - mx) * (xi - mx)));
    if sxx <= 0.0 {
        return None;
    }
    let sxy = compensated_sum(x.iter().zip(y).map(|(&xi, &yi)| (xi - mx) * (yi - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = if n > 2 {
        let rss = compensated_sum(
            x.iter()
                .zip(y)
                .map(|(&xi, &yi)| (yi - intercept - slope * xi).powi(2)),
        );
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some((slope, intercept, se))
}
