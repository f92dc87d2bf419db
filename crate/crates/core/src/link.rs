//! Propensity link functions.
//!
//! A link maps the linear predictor to an observation probability in (0,1).
//! Every link is strictly increasing and twice differentiable; the
//! offset-logistic family additionally has its range bounded away from zero,
//! which gives strict overlap.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Largest double strictly below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Numerically stable logistic function, clamped to the open unit interval
/// (the unclamped value rounds to exactly 1.0 beyond eta ~ 36.7).
pub fn logistic(eta: f64) -> f64 {
    let v = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    v.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

/// Numerically stable `log(1 + exp(t))`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// A tabulated link: a natural cubic spline through `(eta, logit(pi))` pairs,
/// extended linearly on the logit scale beyond the table. The natural
/// boundary condition (zero second derivative) makes the linear extension a
/// C^2 continuation, and working on the logit scale keeps values in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedLink {
    knots: Vec<f64>,
    values: Vec<f64>, // logit scale
    second: Vec<f64>, // spline second derivatives on the logit scale
    slope_lo: f64,
    slope_hi: f64,
}

impl TabulatedLink {
    /// Builds a tabulated link from `(eta, pi)` pairs with strictly
    /// increasing `eta` and `pi` and `pi` strictly inside (0,1).
    pub fn new(table: &[(f64, f64)]) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::InvalidConfig(
                "tabulated link needs at least two points".into(),
            ));
        }
        for w in table.windows(2) {
            let increasing = w[1].0 > w[0].0 && w[1].1 > w[0].1;
            if !increasing {
                return Err(Error::InvalidConfig(
                    "tabulated link must be strictly increasing in eta and pi".into(),
                ));
            }
        }
        for &(_, p) in table {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidConfig(
                    "tabulated link values must lie strictly inside (0,1)".into(),
                ));
            }
        }
        let knots: Vec<f64> = table.iter().map(|t| t.0).collect();
        let values: Vec<f64> = table.iter().map(|t| (t.1 / (1.0 - t.1)).ln()).collect();
        let second = natural_spline_second_derivatives(&knots, &values);
        let m = knots.len();
        let slope_lo = spline_d1(&knots, &values, &second, 0, knots[0]);
        let slope_hi = spline_d1(&knots, &values, &second, m - 2, knots[m - 1]);

        let link = Self {
            knots,
            values,
            second,
            slope_lo,
            slope_hi,
        };
        // The spline can overshoot monotone data; reject tables where it does.
        let (lo, hi) = (link.knots[0], link.knots[link.knots.len() - 1]);
        let steps = 512;
        for i in 0..=steps {
            let eta = lo + (hi - lo) * i as f64 / steps as f64;
            if link.logit_d1(eta) <= 0.0 {
                return Err(Error::InvalidConfig(
                    "tabulated link spline is not strictly increasing".into(),
                ));
            }
        }
        Ok(link)
    }

    fn segment(&self, eta: f64) -> usize {
        match self
            .knots
            .binary_search_by(|k| k.partial_cmp(&eta).unwrap())
        {
            Ok(i) => i.min(self.knots.len() - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.knots.len() - 2),
        }
    }

    fn logit_value(&self, eta: f64) -> f64 {
        let m = self.knots.len();
        if eta <= self.knots[0] {
            self.values[0] + self.slope_lo * (eta - self.knots[0])
        } else if eta >= self.knots[m - 1] {
            self.values[m - 1] + self.slope_hi * (eta - self.knots[m - 1])
        } else {
            let s = self.segment(eta);
            spline_value(&self.knots, &self.values, &self.second, s, eta)
        }
    }

    fn logit_d1(&self, eta: f64) -> f64 {
        let m = self.knots.len();
        if eta <= self.knots[0] {
            self.slope_lo
        } else if eta >= self.knots[m - 1] {
            self.slope_hi
        } else {
            let s = self.segment(eta);
            spline_d1(&self.knots, &self.values, &self.second, s, eta)
        }
    }

    fn logit_d2(&self, eta: f64) -> f64 {
        let m = self.knots.len();
        if eta <= self.knots[0] || eta >= self.knots[m - 1] {
            0.0
        } else {
            let s = self.segment(eta);
            spline_d2(&self.knots, &self.second, s, eta)
        }
    }
}

fn natural_spline_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut second = vec![0.0; m];
    if m < 3 {
        return second;
    }
    // Tridiagonal solve, natural boundary conditions.
    let mut sub = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for i in 1..m - 1 {
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        sub[i] = h0 / 6.0;
        diag[i] = (h0 + h1) / 3.0;
        sup[i] = h1 / 6.0;
        rhs[i] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
    }
    // Forward elimination on interior rows.
    for i in 2..m - 1 {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    second[m - 2] = rhs[m - 2] / diag[m - 2];
    for i in (1..m - 2).rev() {
        second[i] = (rhs[i] - sup[i] * second[i + 1]) / diag[i];
    }
    second
}

fn spline_value(x: &[f64], y: &[f64], m2: &[f64], s: usize, eta: f64) -> f64 {
    let h = x[s + 1] - x[s];
    let a = (x[s + 1] - eta) / h;
    let b = (eta - x[s]) / h;
    a * y[s] + b * y[s + 1] + ((a.powi(3) - a) * m2[s] + (b.powi(3) - b) * m2[s + 1]) * h * h / 6.0
}

fn spline_d1(x: &[f64], y: &[f64], m2: &[f64], s: usize, eta: f64) -> f64 {
    let h = x[s + 1] - x[s];
    let a = (x[s + 1] - eta) / h;
    let b = (eta - x[s]) / h;
    (y[s + 1] - y[s]) / h
        + h / 6.0 * ((3.0 * b * b - 1.0) * m2[s + 1] - (3.0 * a * a - 1.0) * m2[s])
}

fn spline_d2(x: &[f64], m2: &[f64], s: usize, eta: f64) -> f64 {
    let h = x[s + 1] - x[s];
    let a = (x[s + 1] - eta) / h;
    let b = (eta - x[s]) / h;
    a * m2[s] + b * m2[s + 1]
}

/// Known propensity link.
#[derive(Debug, Clone, PartialEq)]
pub enum LinkFunction {
    /// `pi(eta) = floor + (1 - floor) * logistic(eta)`; range `(floor, 1)`.
    OffsetLogistic { floor: f64 },
    /// Plain logistic link; range `(0, 1)`.
    Logistic,
    /// Tabulated link, interpolated on the logit scale.
    Custom(Arc<TabulatedLink>),
}

impl LinkFunction {
    pub fn offset_logistic(floor: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&floor) {
            return Err(Error::InvalidConfig(format!(
                "offset-logistic floor must lie in [0,1), got {floor}"
            )));
        }
        Ok(Self::OffsetLogistic { floor })
    }

    /// `pi(eta)`, strictly inside (0, 1).
    pub fn eval(&self, eta: f64) -> f64 {
        let v = match self {
            Self::OffsetLogistic { floor } => floor + (1.0 - floor) * logistic(eta),
            Self::Logistic => logistic(eta),
            Self::Custom(t) => logistic(t.logit_value(eta)),
        };
        v.clamp(f64::MIN_POSITIVE, ONE_MINUS)
    }

    /// `pi'(eta)`.
    pub fn d1(&self, eta: f64) -> f64 {
        match self {
            Self::OffsetLogistic { floor } => {
                let s = logistic(eta);
                (1.0 - floor) * s * (1.0 - s)
            }
            Self::Logistic => {
                let s = logistic(eta);
                s * (1.0 - s)
            }
            Self::Custom(t) => {
                let s = logistic(t.logit_value(eta));
                s * (1.0 - s) * t.logit_d1(eta)
            }
        }
    }

    /// `pi''(eta)`.
    pub fn d2(&self, eta: f64) -> f64 {
        match self {
            Self::OffsetLogistic { floor } => {
                let s = logistic(eta);
                (1.0 - floor) * s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Self::Logistic => {
                let s = logistic(eta);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Self::Custom(t) => {
                let s = logistic(t.logit_value(eta));
                let sp = s * (1.0 - s);
                let d1 = t.logit_d1(eta);
                sp * (1.0 - 2.0 * s) * d1 * d1 + sp * t.logit_d2(eta)
            }
        }
    }

    /// Open range `(inf pi, sup pi)`.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Self::OffsetLogistic { floor } => (*floor, 1.0),
            Self::Logistic | Self::Custom(_) => (0.0, 1.0),
        }
    }

    /// Antiderivative `F(t) = \int_0^t pi(u) du`, available in closed form
    /// for the logistic family.
    pub fn antiderivative(&self, t: f64) -> Option<f64> {
        match self {
            Self::OffsetLogistic { floor } => {
                Some(floor * t + (1.0 - floor) * (softplus(t) - std::f64::consts::LN_2))
            }
            Self::Logistic => Some(softplus(t) - std::f64::consts::LN_2),
            Self::Custom(_) => None,
        }
    }

    /// Solves `pi(eta) = target` by bisection.
    pub fn inverse(&self, target: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(target > lo && target < hi) {
            return Err(Error::LinkRange {
                value: target,
                lo,
                hi,
            });
        }
        let (mut a, mut b) = (-1.0f64, 1.0f64);
        while self.eval(a) > target {
            a *= 2.0;
            if a < -1e6 {
                return Err(Error::LinkRange {
                    value: target,
                    lo,
                    hi,
                });
            }
        }
        while self.eval(b) < target {
            b *= 2.0;
            if b > 1e6 {
                return Err(Error::LinkRange {
                    value: target,
                    lo,
                    hi,
                });
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.eval(mid) < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// Evaluates the link and its first two derivatives at `eta`.
pub fn link_eval(link: &LinkFunction, eta: f64) -> (f64, f64, f64) {
    (link.eval(eta), link.d1(eta), link.d2(eta))
}
