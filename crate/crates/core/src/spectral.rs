//! Orthonormal DCT-II/IDCT along the sequence axis, low-pass filtering, and
//! power spectra.
//!
//! Transforms run in f64 internally and take/return f32. Short signals use a
//! direct cosine product; longer ones go through a length-2N FFT.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Longest signal handled by the direct O(N^2) path.
const DIRECT_LIMIT: usize = 512;

/// Number of retained low-frequency modes for a cutoff ratio:
/// max(1, ceil(gamma * n)), so the DC mode always survives and gamma = 1
/// keeps everything.
///
/// gamma * n is snapped to the nearest integer when within 1e-9 of one, so
/// grid values like 0.2 at n = 30 do not overshoot the cutoff by a mode.
pub fn cutoff(gamma: f64, n: usize) -> Result<usize> {
    if !gamma.is_finite() || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    if n == 0 {
        return Err(Error::Empty("cutoff length"));
    }
    let t = gamma * n as f64;
    let t = if (t - t.round()).abs() < 1e-9 {
        t.round()
    } else {
        t
    };
    Ok((t.ceil() as usize).clamp(1, n))
}

/// Reusable transform for one signal length. Cheap to build, shareable
/// across threads.
pub struct DctPlan {
    n: usize,
    kind: Kind,
}

enum Kind {
    /// cos(pi j / 2n) for j in 0..4n; coefficient m reads index
    /// m * (2i + 1) mod 4n.
    Direct { table: Vec<f64> },
    Fft {
        forward: Arc<dyn Fft<f64>>,
        inverse: Arc<dyn Fft<f64>>,
        /// e^{-i pi m / 2n} for m in 0..n.
        twiddle: Vec<Complex64>,
    },
}

impl DctPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("transform length"));
        }
        let kind = if n <= DIRECT_LIMIT {
            let table = (0..4 * n)
                .map(|j| (PI * j as f64 / (2.0 * n as f64)).cos())
                .collect();
            Kind::Direct { table }
        } else {
            let mut planner = FftPlanner::new();
            let forward = planner.plan_fft_forward(2 * n);
            let inverse = planner.plan_fft_inverse(2 * n);
            let twiddle = (0..n)
                .map(|m| {
                    let a = -PI * m as f64 / (2.0 * n as f64);
                    Complex64::new(a.cos(), a.sin())
                })
                .collect();
            Kind::Fft {
                forward,
                inverse,
                twiddle,
            }
        };
        Ok(DctPlan { n, kind })
    }

    pub fn signal_len(&self) -> usize {
        self.n
    }

    #[inline]
    fn alpha(&self, m: usize) -> f64 {
        if m == 0 {
            (1.0 / self.n as f64).sqrt()
        } else {
            (2.0 / self.n as f64).sqrt()
        }
    }

    fn check(&self, x: &[f32], what: &'static str) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Shape {
                context: format!("{what} length {} vs plan length {}", x.len(), self.n),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{what} index {i}"),
            });
        }
        Ok(())
    }

    /// DCT-II with orthonormal scaling.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check(x, "dct input")?;
        Ok(match &self.kind {
            Kind::Direct { table } => self.forward_direct(x, table),
            Kind::Fft {
                forward, twiddle, ..
            } => self.forward_fft(x, forward.as_ref(), twiddle),
        })
    }

    /// Inverse transform (DCT-III with orthonormal scaling).
    pub fn inverse(&self, coeffs: &[f32]) -> Result<Vec<f32>> {
        self.check(coeffs, "idct input")?;
        Ok(match &self.kind {
            Kind::Direct { table } => self.inverse_direct(coeffs, table),
            Kind::Fft {
                inverse, twiddle, ..
            } => self.inverse_fft(coeffs, inverse.as_ref(), twiddle),
        })
    }

    fn forward_direct(&self, x: &[f32], table: &[f64]) -> Vec<f32> {
        let n = self.n;
        let four_n = 4 * n;
        let mut out = Vec::with_capacity(n);
        for m in 0..n {
            let step = (2 * m) % four_n;
            let mut j = m;
            let mut acc = 0.0f64;
            for &v in x {
                acc += v as f64 * table[j];
                j += step;
                if j >= four_n {
                    j -= four_n;
                }
            }
            out.push((self.alpha(m) * acc) as f32);
        }
        out
    }

    fn inverse_direct(&self, coeffs: &[f32], table: &[f64]) -> Vec<f32> {
        let n = self.n;
        let four_n = 4 * n;
        let scaled: Vec<f64> = coeffs
            .iter()
            .enumerate()
            .map(|(m, &c)| self.alpha(m) * c as f64)
            .collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let step = (2 * i + 1) % four_n;
            let mut j = 0usize;
            let mut acc = 0.0f64;
            for &g in &scaled {
                acc += g * table[j];
                j += step;
                if j >= four_n {
                    j -= four_n;
                }
            }
            out.push(acc as f32);
        }
        out
    }

    // The even-symmetric extension [x, reverse(x)] of length 2N has
    // Y[m] = 2 e^{i pi m / 2N} sum_i x[i] cos(pi m (i + 1/2) / N),
    // so one complex FFT recovers every DCT-II coefficient.
    fn forward_fft(&self, x: &[f32], fft: &dyn Fft<f64>, twiddle: &[Complex64]) -> Vec<f32> {
        let n = self.n;
        let mut buf = vec![Complex64::default(); 2 * n];
        for (i, &v) in x.iter().enumerate() {
            let v = Complex64::new(v as f64, 0.0);
            buf[i] = v;
            buf[2 * n - 1 - i] = v;
        }
        fft.process(&mut buf);
        (0..n)
            .map(|m| (self.alpha(m) * 0.5 * (buf[m] * twiddle[m]).re) as f32)
            .collect()
    }

    // x[i] = Re sum_m alpha[m] C[m] e^{i pi m / 2N} e^{i pi m i / N}: load the
    // first N bins of an unnormalized inverse FFT and read the real part.
    fn inverse_fft(&self, coeffs: &[f32], fft: &dyn Fft<f64>, twiddle: &[Complex64]) -> Vec<f32> {
        let n = self.n;
        let mut buf = vec![Complex64::default(); 2 * n];
        for (m, &c) in coeffs.iter().enumerate() {
            buf[m] = twiddle[m].conj() * (self.alpha(m) * c as f64);
        }
        fft.process(&mut buf);
        buf[..n].iter().map(|z| z.re as f32).collect()
    }
}

/// One-shot DCT-II of `x`.
pub fn dct(x: &[f32]) -> Result<Vec<f32>> {
    DctPlan::new(x.len())?.forward(x)
}

/// One-shot inverse of [`dct`].
pub fn idct(coeffs: &[f32]) -> Result<Vec<f32>> {
    DctPlan::new(coeffs.len())?.inverse(coeffs)
}

/// Zeroes every coefficient at or above the cutoff for `gamma`.
pub fn lowpass(coeffs: &[f32], gamma: f64) -> Result<Vec<f32>> {
    let keep = cutoff(gamma, coeffs.len())?;
    Ok(lowpass_at(coeffs, keep))
}

pub(crate) fn lowpass_at(coeffs: &[f32], keep: usize) -> Vec<f32> {
    coeffs
        .iter()
        .enumerate()
        .map(|(m, &c)| if m < keep { c } else { 0.0 })
        .collect()
}

/// Per-mode power: the elementwise square of the coefficients, exact in f64.
pub fn power_spectrum(coeffs: &[f32]) -> Vec<f64> {
    coeffs.iter().map(|&c| c as f64 * c as f64).collect()
}
