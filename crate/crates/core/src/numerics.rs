//! Deterministic numerical kernels shared by the detector, the metrics and
//! the data pipeline.
//!
//! The forward FFT is unnormalised: `X[f] = sum_t x[t] exp(-2πi f t / n)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix::Matrix;

const TAYLOR_TOL: f64 = 1e-12;
const TAYLOR_MAX_TERMS: usize = 200;

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn matexp(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(invalid!("matrix exponential of a {}x{} matrix", m.rows(), m.cols()));
    }
    if m.rows() == 0 {
        return Err(invalid!("matrix exponential of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(invalid!("matrix exponential of a non-finite matrix"));
    }
    let n = m.rows();
    let norm = m.norm1();
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = libm::ceil(libm::log2(norm / 0.5)) as u32;
    }
    let scale = libm::exp2(-f64::from(squarings));
    let a = m.map(|v| v * scale);

    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=TAYLOR_MAX_TERMS {
        term = term.matmul(&a)?;
        let inv_k = 1.0 / k as f64;
        term.as_mut_slice().iter_mut().for_each(|v| *v *= inv_k);
        for (r, t) in result.as_mut_slice().iter_mut().zip(term.as_slice()) {
            *r += t;
        }
        if term.norm1() <= TAYLOR_TOL {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

/// `tr(exp(M))` and, when requested, its gradient with respect to `M`,
/// which is `exp(M)ᵀ`.
pub fn matexp_trace(m: &Matrix, want_gradient: bool) -> Result<(f64, Option<Matrix>)> {
    let e = matexp(m)?;
    let trace = e.trace();
    let grad = want_gradient.then(|| e.transpose());
    Ok((trace, grad))
}

/// Amplitude spectrum of a real series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    amplitudes: Vec<f64>,
    series_length: usize,
}

impl Spectrum {
    pub fn new(amplitudes: Vec<f64>, series_length: usize) -> Result<Self> {
        if series_length == 0 {
            return Err(invalid!("spectrum of an empty series"));
        }
        if amplitudes.len() != series_length / 2 + 1 {
            return Err(invalid!("{} amplitudes for a length-{series_length} series", amplitudes.len()));
        }
        if amplitudes.iter().any(|a| !(*a >= 0.0)) {
            return Err(invalid!("amplitudes must be non-negative"));
        }
        Ok(Self { amplitudes, series_length })
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn series_length(&self) -> usize {
        self.series_length
    }

    /// Period in timesteps represented by frequency bin `f >= 1`.
    pub fn period_of(&self, bin: usize) -> usize {
        self.series_length / bin
    }
}

/// Full complex DFT of a complex sequence (radix-2, or Bluestein for other
/// lengths).
pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    if n <= 1 {
        return x.to_vec();
    }
    if n.is_power_of_two() {
        let mut buf = x.to_vec();
        fft_pow2(&mut buf, false);
        return buf;
    }
    bluestein(x)
}

fn fft_pow2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| {
                let a = ang * k as f64;
                Complex64::new(libm::cos(a), libm::sin(a))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * twiddles[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
}

fn bluestein(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let m = (2 * n - 1).next_power_of_two();
    // chirp[k] = exp(-iπk²/n); k² is reduced mod 2n to keep the angle small.
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            let a = -PI * k2 / n as f64;
            Complex64::new(libm::cos(a), libm::sin(a))
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = x[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    fft_pow2(&mut a, true);
    let inv_m = 1.0 / m as f64;
    (0..n).map(|k| a[k] * inv_m * chirp[k]).collect()
}

/// Magnitudes of the real-input DFT, bins `0..=n/2`.
pub fn rfft_amplitudes(x: &[f64]) -> Result<Spectrum> {
    if x.len() < 2 {
        return Err(invalid!("rfft needs at least 2 samples, got {}", x.len()));
    }
    let input: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let spec = fft(&input);
    let amplitudes = spec[..=x.len() / 2].iter().map(|c| libm::hypot(c.re, c.im)).collect();
    Spectrum::new(amplitudes, x.len())
}

/// Relative floor below which a bin counts as empty; keeps round-off in the
/// FFT of a constant or periodic series from producing spurious periods.
const EMPTY_BIN_REL: f64 = 1e-10;

/// Non-DC bins of largest amplitude, descending, ties toward the lower
/// frequency. Empty bins are skipped, so the result may hold fewer than `k`.
pub fn topk_bins(s: &Spectrum, k: usize) -> Vec<usize> {
    let amps = s.amplitudes();
    let scale = amps.iter().copied().fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let floor = scale * EMPTY_BIN_REL;
    let mut bins: Vec<usize> = (1..amps.len()).filter(|&f| amps[f] > floor).collect();
    bins.sort_by(|&a, &b| amps[b].total_cmp(&amps[a]).then(a.cmp(&b)));
    bins.truncate(k);
    bins
}

/// Period lengths (`length / f`) of the `k` strongest non-DC bins.
pub fn topk_periods(s: &Spectrum, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid!("k must be at least 1"));
    }
    Ok(topk_bins(s, k).into_iter().map(|f| s.period_of(f)).collect())
}

/// Centred box mean; the window shrinks at the boundaries.
pub fn moving_average(x: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(invalid!("smoothing window must be odd and positive, got {window}"));
    }
    let n = x.len();
    let half = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in x {
        acc += v;
        prefix.push(acc);
    }
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor_trace_oracle(m: &Matrix) -> f64 {
        // Plain power series, no scaling; fine for the small norms used here.
        let n = m.rows();
        let mut term = Matrix::identity(n);
        let mut total = term.trace();
        for k in 1..60 {
            term = term.matmul(m).unwrap().map(|v| v / k as f64);
            total += term.trace();
        }
        total
    }

    #[test]
    fn matexp_trace_examples() {
        let (t, _) = matexp_trace(&Matrix::zeros(3, 3), false).unwrap();
        assert_eq!(t, 3.0);
        let nil = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!((matexp_trace(&nil, false).unwrap().0 - 2.0).abs() < 1e-12);
        let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let oracle = taylor_trace_oracle(&swap);
        assert!((oracle - 3.086_161_269_630_487_6).abs() < 1e-12);
        assert!((matexp_trace(&swap, false).unwrap().0 - oracle).abs() < 1e-10);
    }

    #[test]
    fn matexp_large_norm_matches_oracle_on_scaled_input() {
        let m = Matrix::from_fn(4, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 * 0.4);
        // exp(M) = exp(M/2)², with exp(M/2) from the direct series
        let half = m.map(|v| v / 2.0);
        let mut term = Matrix::identity(4);
        let mut e_half = Matrix::identity(4);
        for k in 1..80 {
            term = term.matmul(&half).unwrap().map(|v| v / k as f64);
            for (a, b) in e_half.as_mut_slice().iter_mut().zip(term.as_slice()) {
                *a += b;
            }
        }
        let oracle = e_half.matmul(&e_half).unwrap().trace();
        let got = matexp_trace(&m, false).unwrap().0;
        assert!((got - oracle).abs() / oracle < 1e-11, "{got} vs {oracle}");
    }

    #[test]
    fn matexp_rejects_bad_input() {
        assert!(matexp_trace(&Matrix::zeros(2, 3), false).is_err());
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 1, f64::NAN);
        assert!(matexp_trace(&m, false).is_err());
    }

    #[test]
    fn rfft_examples() {
        let s = rfft_amplitudes(&[2.5; 16]).unwrap();
        assert!((s.amplitudes()[0] - 40.0).abs() < 1e-12);
        assert!(s.amplitudes()[1..].iter().all(|&a| a < 1e-12));

        let z = rfft_amplitudes(&[0.0; 10]).unwrap();
        assert!(z.amplitudes().iter().all(|&a| a == 0.0));
        assert_eq!(z.amplitudes().len(), 6);

        assert!(rfft_amplitudes(&[1.0]).is_err());
    }

    fn dft_oracle(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|f| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (f * t) as f64 / n as f64;
                    re += v * libm::cos(a);
                    im += v * libm::sin(a);
                }
                libm::sqrt(re * re + im * im)
            })
            .collect()
    }

    #[test]
    fn rfft_matches_direct_dft_for_odd_and_even_lengths() {
        for n in [2usize, 3, 7, 16, 25, 64, 100, 101] {
            let x: Vec<f64> = (0..n).map(|t| libm::sin(t as f64 * 0.37) + (t % 5) as f64 * 0.1).collect();
            let got = rfft_amplitudes(&x).unwrap();
            for (a, b) in got.amplitudes().iter().zip(dft_oracle(&x)) {
                assert!((a - b).abs() < 1e-9, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sine_period_eight() {
        let x: Vec<f64> = (0..64).map(|t| libm::sin(2.0 * PI * 8.0 * t as f64 / 64.0)).collect();
        let oracle = dft_oracle(&x);
        let best = (1..oracle.len()).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        assert_eq!(best, 8);
        let s = rfft_amplitudes(&x).unwrap();
        assert_eq!(topk_bins(&s, 1), vec![8]);
        assert_eq!(topk_periods(&s, 1).unwrap(), vec![8]);
    }

    #[test]
    fn topk_edge_cases() {
        let zero = Spectrum::new(vec![0.0; 5], 8).unwrap();
        assert!(topk_periods(&zero, 3).unwrap().is_empty());
        let tie = Spectrum::new(vec![0.0, 0.0, 1.0, 0.0, 1.0], 8).unwrap();
        assert_eq!(topk_periods(&tie, 1).unwrap(), vec![4]);
        assert_eq!(topk_periods(&tie, 5).unwrap(), vec![4, 2]);
        assert!(topk_periods(&tie, 0).is_err());
    }

    #[test]
    fn moving_average_examples() {
        let x = [0.3, -1.0, 4.0];
        assert_eq!(moving_average(&x, 1).unwrap(), x.to_vec());
        let y = moving_average(&[0.0, 0.0, 3.0, 0.0, 0.0], 3).unwrap();
        let want = [0.0, 1.0, 1.0, 1.0, 0.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut imp = vec![0.0; 200];
        imp[100] = 5.1;
        let sm = moving_average(&imp, 51).unwrap();
        for (i, v) in sm.iter().enumerate() {
            let expect = if (75..=125).contains(&i) { 0.1 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "i={i} v={v}");
        }
        assert!(moving_average(&x, 2).is_err());
    }
}
