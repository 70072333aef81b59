//! Four-parameter logistic mapping from model outputs to opinion scores.

use serde::{Deserialize, Serialize};

use super::correlation::plcc;
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 200;
const TOLERANCE: f64 = 1e-10;
const MAX_DAMPING: f64 = 1e16;

/// `y' = β2 + (β1 − β2) / (1 + exp(−(x − β3) / |β4|))`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourPlParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl FourPlParams {
    pub fn eval(&self, x: f64) -> f64 {
        self.beta2 + (self.beta1 - self.beta2) * self.sigmoid(x)
    }

    fn scale(&self) -> f64 {
        self.beta4.abs().max(f64::MIN_POSITIVE)
    }

    fn sigmoid(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-(x - self.beta3) / self.scale()).exp())
    }

    fn to_array(self) -> [f64; 4] {
        [self.beta1, self.beta2, self.beta3, self.beta4]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            beta1: a[0],
            beta2: a[1],
            beta3: a[2],
            beta4: a[3],
        }
    }

    /// Partial derivatives of `eval(x)` with respect to β1..β4.
    fn gradient(&self, x: f64) -> [f64; 4] {
        let s = self.sigmoid(x);
        let scale = self.scale();
        let ds = s * (1.0 - s);
        let amp = self.beta1 - self.beta2;
        [
            s,
            1.0 - s,
            -amp * ds / scale,
            -amp * ds * (x - self.beta3) / (scale * scale) * self.beta4.signum(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourPlFit {
    pub params: FourPlParams,
    /// False when the iteration budget ran out; `params` then holds the
    /// initial guess.
    pub converged: bool,
    pub iterations: usize,
    pub initial_sse: f64,
    pub sse: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn sse(p: &FourPlParams, x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (b - p.eval(*a)).powi(2)).sum()
}

/// Gaussian elimination with partial pivoting on a 4×4 system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut out = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * out[k];
        }
        out[row] = acc / a[row][row];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Least-squares 4PL fit by Levenberg–Marquardt.
///
/// Starts from β1 = max(y), β2 = min(y), β3 = median(x), β4 = std(x)/4.
pub fn fit_4pl(x: &[f64], y: &[f64]) -> Result<FourPlFit> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 4 {
        return Err(Error::Degenerate(format!(
            "4PL fit needs at least 4 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("4PL fit over non-finite values".into()));
    }
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    if ymax == ymin {
        return Err(Error::Degenerate("4PL fit with constant targets".into()));
    }
    let sx = std_dev(x);
    if sx == 0.0 {
        return Err(Error::Degenerate("4PL fit with constant predictions".into()));
    }
    let init = FourPlParams {
        beta1: ymax,
        beta2: ymin,
        beta3: median(x),
        beta4: sx / 4.0,
    };
    let initial_sse = sse(&init, x, y);

    let mut params = init;
    let mut current = initial_sse;
    let mut lambda = 1e-3;
    for iteration in 1..=MAX_ITERATIONS {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let g = params.gradient(xi);
            let r = yi - params.eval(xi);
            for i in 0..4 {
                jtr[i] += g[i] * r;
                for j in 0..4 {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }

        // Raise damping until a step lowers the residual or damping saturates.
        loop {
            let mut damped = jtj;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-12);
            }
            let candidate = solve4(damped, jtr).map(|step| {
                let mut a = params.to_array();
                for (v, s) in a.iter_mut().zip(step) {
                    *v += s;
                }
                FourPlParams::from_array(a)
            });
            let accepted = candidate
                .map(|c| (c, sse(&c, x, y)))
                .filter(|(c, e)| e.is_finite() && *e <= current && c.beta4 != 0.0);
            match accepted {
                Some((c, e)) => {
                    let change = current - e;
                    params = c;
                    current = e;
                    lambda = (lambda / 10.0).max(1e-12);
                    if change <= TOLERANCE * current.max(f64::MIN_POSITIVE) {
                        return Ok(FourPlFit {
                            params,
                            converged: true,
                            iterations: iteration,
                            initial_sse,
                            sse: current,
                        });
                    }
                    break;
                }
                None => {
                    lambda *= 10.0;
                    if lambda > MAX_DAMPING {
                        // No descent direction left: a stationary point.
                        return Ok(FourPlFit {
                            params,
                            converged: true,
                            iterations: iteration,
                            initial_sse,
                            sse: current,
                        });
                    }
                }
            }
        }
    }
    log::warn!("4PL fit did not converge in {MAX_ITERATIONS} iterations; using the initial guess");
    Ok(FourPlFit {
        params: init,
        converged: false,
        iterations: MAX_ITERATIONS,
        initial_sse,
        sse: initial_sse,
    })
}

/// PLCC after mapping `x` through the fitted 4PL curve.
///
/// Falls back to the raw PLCC when the fit does not converge or the fitted
/// curve is flat over the data.
pub fn corrected_plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    let raw = plcc(x, y)?;
    let fit = fit_4pl(x, y)?;
    if !fit.converged {
        return Ok(raw);
    }
    let mapped: Vec<f64> = x.iter().map(|&v| fit.params.eval(v)).collect();
    match plcc(&mapped, y) {
        Ok(r) => Ok(r),
        Err(Error::Degenerate(_)) => {
            log::warn!("fitted 4PL curve is flat over the data; reporting raw PLCC");
            Ok(raw)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn recovers_exact_curve() {
        let truth = FourPlParams {
            beta1: 1.0,
            beta2: 0.0,
            beta3: 0.0,
            beta4: 1.0,
        };
        let x = linspace(-6.0, 6.0, 121);
        let y: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
        let fit = fit_4pl(&x, &y).unwrap();
        assert!(fit.converged);
        assert!(fit.sse <= fit.initial_sse);
        let p = fit.params;
        assert!((p.beta1 - 1.0).abs() < 1e-2);
        assert!(p.beta2.abs() < 1e-2);
        assert!(p.beta3.abs() < 1e-2);
        assert!((p.beta4.abs() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn residual_never_exceeds_initial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..10.0)).collect();
            let fit = fit_4pl(&x, &y).unwrap();
            assert!(fit.sse <= fit.initial_sse);
        }
    }

    #[test]
    fn linear_data_does_not_lose_correlation() {
        let x = linspace(0.0, 1.0, 50);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        let raw = plcc(&x, &y).unwrap();
        assert!(corrected_plcc(&x, &y).unwrap() >= raw - 1e-9);
        assert!((corrected_plcc(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn warped_predictions_are_straightened() {
        let x = linspace(-4.0, 4.0, 200);
        let truth = FourPlParams {
            beta1: 5.0,
            beta2: 1.0,
            beta3: 0.5,
            beta4: 0.4,
        };
        let y: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
        let raw = plcc(&x, &y).unwrap();
        let corrected = corrected_plcc(&x, &y).unwrap();
        assert!(corrected > 0.999, "{corrected}");
        assert!(corrected > raw);
    }

    #[test]
    fn independent_data_stays_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..1000).map(|_| n.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..1000).map(|_| n.sample(&mut rng)).collect();
        assert!(corrected_plcc(&x, &y).unwrap().abs() < 0.2);
    }

    #[test]
    fn degenerate_targets_rejected() {
        assert!(matches!(
            fit_4pl(&[1.0, 2.0, 3.0, 4.0], &[2.0; 4]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            fit_4pl(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(Error::Degenerate(_))
        ));
    }
}
