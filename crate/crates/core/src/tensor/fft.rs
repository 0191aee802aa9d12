//! Radix-2 FFT with a Bluestein (chirp-z) wrapper for arbitrary lengths.

use std::f64::consts::PI;

use num_complex::Complex64;

/// In-place iterative radix-2 transform. `buf.len()` must be a power of two.
/// The inverse is unnormalized.
pub fn fft_pow2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {n}");
    if n <= 1 {
        return;
    }
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
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / len as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Exact length-`n` DFT (unnormalized in both directions).
pub fn dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    if n.is_power_of_two() || n == 0 {
        let mut buf = x.to_vec();
        if n > 0 {
            fft_pow2(&mut buf, inverse);
        }
        return buf;
    }
    bluestein(x, inverse)
}

fn bluestein(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // chirp[k] = exp(sign·iπk²/n), with k² reduced mod 2n to keep the angle small
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            Complex64::from_polar(1.0, sign * PI * k2 / n as f64)
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
    for (av, bv) in a.iter_mut().zip(&b) {
        *av *= bv;
    }
    fft_pow2(&mut a, true);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| a[k] * scale * chirp[k]).collect()
}

/// Full `n`-bin spectrum of a real sequence.
pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft(&buf, false)
}

/// Inverse of [`fft_real`]: real part of the normalized inverse transform.
///
/// Panics when `spectrum.len() != n`.
pub fn ifft_real(spectrum: &[Complex64], n: usize) -> Vec<f64> {
    assert_eq!(spectrum.len(), n, "spectrum length must equal the sequence length");
    let scale = 1.0 / n as f64;
    dft(spectrum, true).into_iter().map(|c| c.re * scale).collect()
}

/// Linear (non-circular) convolution of two real sequences, zero-padded to
/// a power of two of at least `a.len() + b.len() - 1`.
pub fn convolve_linear(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let m = out_len.next_power_of_two();
    let mut fa = vec![Complex64::new(0.0, 0.0); m];
    let mut fb = fa.clone();
    for (d, &v) in fa.iter_mut().zip(a) {
        d.re = v;
    }
    for (d, &v) in fb.iter_mut().zip(b) {
        d.re = v;
    }
    fft_pow2(&mut fa, false);
    fft_pow2(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_pow2(&mut fa, true);
    let scale = 1.0 / m as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}
