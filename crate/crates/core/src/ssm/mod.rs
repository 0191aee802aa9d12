//! Linear state-space models: continuous systems, bilinear discretization,
//! the recurrent scan, the explicit convolution kernel and the
//! input-dependent (selective) scan.

mod scan_op;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::fft;
use crate::tensor::ops::softplus;

/// `x' = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSSM {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    d: f64,
}

impl ContinuousSSM {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, d: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::shape(format!(
                "ssm: A {}x{}, B {}, C {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        Ok(ContinuousSSM { a, b, c, d })
    }

    pub fn scalar(a: f64, b: f64, c: f64, d: f64) -> Self {
        ContinuousSSM {
            a: DMatrix::from_element(1, 1, a),
            b: DVector::from_element(1, b),
            c: DVector::from_element(1, c),
            d,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }
}

/// `x_k = Ā x_{k-1} + B̄ u_k`, `y_k = C̄ x_k + D u_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSSM {
    abar: DMatrix<f64>,
    bbar: DVector<f64>,
    cbar: DVector<f64>,
    d: f64,
    delta: f64,
}

impl DiscreteSSM {
    pub fn new(abar: DMatrix<f64>, bbar: DVector<f64>, cbar: DVector<f64>, d: f64, delta: f64) -> Result<Self> {
        let n = abar.nrows();
        if n == 0 || abar.ncols() != n || bbar.len() != n || cbar.len() != n {
            return Err(Error::shape("discrete ssm dimensions disagree"));
        }
        if delta.is_nan() || delta <= 0.0 {
            return Err(Error::invalid(format!("step size must be > 0, got {delta}")));
        }
        Ok(DiscreteSSM {
            abar,
            bbar,
            cbar,
            d,
            delta,
        })
    }

    pub fn scalar(abar: f64, bbar: f64, cbar: f64) -> Self {
        DiscreteSSM {
            abar: DMatrix::from_element(1, 1, abar),
            bbar: DVector::from_element(1, bbar),
            cbar: DVector::from_element(1, cbar),
            d: 0.0,
            delta: 1.0,
        }
    }

    pub fn with_feedthrough(mut self, d: f64) -> Self {
        self.d = d;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.abar.nrows()
    }

    pub fn abar(&self) -> &DMatrix<f64> {
        &self.abar
    }

    pub fn bbar(&self) -> &DVector<f64> {
        &self.bbar
    }

    pub fn cbar(&self) -> &DVector<f64> {
        &self.cbar
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// HiPPO-LegS state matrix: lower triangular with `A[i][i] = -(i+1)` and
/// `A[i][j] = -√(2i+1)·√(2j+1)` below the diagonal.
pub fn hippo_legs(n: usize) -> Result<DMatrix<f64>> {
    if n < 1 {
        return Err(Error::invalid("hippo_legs needs n >= 1"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => -((i + 1) as f64),
        std::cmp::Ordering::Greater => -((2 * i + 1) as f64).sqrt() * ((2 * j + 1) as f64).sqrt(),
        std::cmp::Ordering::Less => 0.0,
    }))
}

/// Bilinear (Tustin) discretization:
/// `Ā = (I - Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I - Δ/2·A)⁻¹·Δ·B`, `C̄ = C`.
pub fn discretize_bilinear(ssm: &ContinuousSSM, delta: f64) -> Result<DiscreteSSM> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::invalid(format!("step size must be > 0, got {delta}")));
    }
    let n = ssm.state_dim();
    let half = &ssm.a * (delta / 2.0);
    let eye = DMatrix::<f64>::identity(n, n);
    let m = &eye - &half;
    let p = &eye + &half;
    let lu = m.clone().lu();
    let scale = m.amax().max(1.0);
    let tiny = (0..n).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !lu.is_invertible() || tiny <= n as f64 * f64::EPSILON * scale {
        return Err(Error::Singular(format!(
            "I - Δ/2·A is singular at Δ = {delta}"
        )));
    }
    let abar = lu.solve(&p).ok_or_else(|| Error::Singular("I - Δ/2·A".into()))?;
    let bbar = lu
        .solve(&(&ssm.b * delta))
        .ok_or_else(|| Error::Singular("I - Δ/2·A".into()))?;
    if abar.iter().chain(bbar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discretize_bilinear"));
    }
    Ok(DiscreteSSM {
        abar,
        bbar,
        cbar: ssm.c.clone(),
        d: ssm.d,
        delta,
    })
}

#[inline]
fn advance(abar: &DMatrix<f64>, bbar: &DVector<f64>, x: &DVector<f64>, u: f64) -> DVector<f64> {
    let mut next = abar * x;
    next.axpy(u, bbar, 1.0);
    next
}

#[inline]
fn emit(cbar: &DVector<f64>, d: f64, x: &DVector<f64>, u: f64) -> f64 {
    cbar.dot(x) + d * u
}

/// Recurrent evaluation from a zero initial state.
pub fn scan_recurrent(ssm: &DiscreteSSM, u: &[f64]) -> Vec<f64> {
    scan_recurrent_from(ssm, u, &DVector::zeros(ssm.state_dim())).0
}

/// Recurrent evaluation from `x_init`; also returns the final state.
pub fn scan_recurrent_from(ssm: &DiscreteSSM, u: &[f64], x_init: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
    let mut x = x_init.clone();
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        x = advance(&ssm.abar, &ssm.bbar, &x, uk);
        y.push(emit(&ssm.cbar, ssm.d, &x, uk));
    }
    (y, x)
}

/// The causal filter `(C̄B̄, C̄ĀB̄, …, C̄Ā^{L-1}B̄)` plus the feedthrough `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SSMKernel {
    taps: Vec<f64>,
    feedthrough: f64,
}

impl SSMKernel {
    pub fn new(taps: Vec<f64>) -> Self {
        SSMKernel {
            taps,
            feedthrough: 0.0,
        }
    }

    pub fn with_feedthrough(mut self, d: f64) -> Self {
        self.feedthrough = d;
        self
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn feedthrough(&self) -> f64 {
        self.feedthrough
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Kernel taps by propagating `Ā^i B̄` one step at a time, `O(L·n²)`.
pub fn ssm_kernel(ssm: &DiscreteSSM, len: usize) -> Result<SSMKernel> {
    if len < 1 {
        return Err(Error::invalid("kernel length must be >= 1"));
    }
    let mut v = ssm.bbar.clone();
    let mut taps = Vec::with_capacity(len);
    for i in 0..len {
        taps.push(ssm.cbar.dot(&v));
        if i + 1 < len {
            v = &ssm.abar * &v;
        }
    }
    if taps.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("ssm_kernel"));
    }
    Ok(SSMKernel::new(taps).with_feedthrough(ssm.d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMethod {
    Direct,
    Fft,
}

/// `y_k = Σ_{j≤k} K[j]·u_{k-j} + D·u_k`.
pub fn convolve_causal(kernel: &SSMKernel, u: &[f64], method: ConvMethod) -> Result<Vec<f64>> {
    let l = u.len();
    if kernel.len() != l {
        return Err(Error::shape(format!(
            "kernel length {} vs input length {l}",
            kernel.len()
        )));
    }
    let k = kernel.taps();
    let mut y = match method {
        ConvMethod::Direct => (0..l)
            .map(|i| (0..=i).map(|j| k[j] * u[i - j]).sum())
            .collect::<Vec<f64>>(),
        ConvMethod::Fft => {
            let mut full = fft::convolve_linear(k, u);
            full.truncate(l);
            full
        }
    };
    if kernel.feedthrough != 0.0 {
        for (yk, uk) in y.iter_mut().zip(u) {
            *yk += kernel.feedthrough * uk;
        }
    }
    Ok(y)
}

/// Per-step parameters of the selective scan over `len` steps and
/// `channels` independent input channels sharing one state matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveParams {
    /// `[len, channels]`, every entry > 0.
    pub delta: Vec<f64>,
    /// `[len, state_dim]`.
    pub b: Vec<f64>,
    /// `[len, state_dim]`.
    pub c: Vec<f64>,
    /// `[channels]`; zero disables the skip.
    pub d_skip: Vec<f64>,
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
}

impl SelectiveParams {
    pub fn validate(&self) -> Result<()> {
        let (l, d, n) = (self.len, self.channels, self.state_dim);
        if self.delta.len() != l * d || self.b.len() != l * n || self.c.len() != l * n || self.d_skip.len() != d {
            return Err(Error::shape("selective parameters disagree with (len, channels, state_dim)"));
        }
        if let Some(bad) = self.delta.iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(Error::invalid(format!("selective step size must be > 0, got {bad}")));
        }
        Ok(())
    }

    /// Input-dependent parameters: `Δ = softplus(u·W_Δ + b_Δ)`, `B = u·W_B`,
    /// `C = u·W_C`, with `u` laid out `[len, channels]`.
    pub fn from_input(u: &[f64], len: usize, proj: &SelectiveProjection) -> Result<Self> {
        let d = proj.channels;
        let n = proj.state_dim;
        if u.len() != len * d {
            return Err(Error::shape("selective input is not [len, channels]"));
        }
        let matmul = |w: &[f64], cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; len * cols];
            for t in 0..len {
                for i in 0..d {
                    let ui = u[t * d + i];
                    for k in 0..cols {
                        out[t * cols + k] += ui * w[i * cols + k];
                    }
                }
            }
            out
        };
        let mut delta = matmul(&proj.w_delta, d);
        for (t, v) in delta.iter_mut().enumerate() {
            *v = softplus(*v + proj.b_delta[t % d]);
        }
        let p = SelectiveParams {
            delta,
            b: matmul(&proj.w_b, n),
            c: matmul(&proj.w_c, n),
            d_skip: proj.d_skip.clone(),
            len,
            channels: d,
            state_dim: n,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Learned maps producing [`SelectiveParams`] from the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProjection {
    pub channels: usize,
    pub state_dim: usize,
    /// `[channels, channels]`.
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
    /// `[channels, state_dim]`.
    pub w_b: Vec<f64>,
    /// `[channels, state_dim]`.
    pub w_c: Vec<f64>,
    pub d_skip: Vec<f64>,
}

/// Selective scan over `u` laid out `[len, channels]`: each step re-discretizes
/// `(A, B_t)` with that channel's `Δ_t` using the bilinear rule, so constant
/// parameters reproduce [`scan_recurrent`] exactly.
pub fn selective_scan(params: &SelectiveParams, a: &DMatrix<f64>, u: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    let (l, d, n) = (params.len, params.channels, params.state_dim);
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::shape(format!("A is {}x{}, state_dim {n}", a.nrows(), a.ncols())));
    }
    if u.len() != l * d {
        return Err(Error::shape("selective input is not [len, channels]"));
    }
    let mut states = vec![DVector::<f64>::zeros(n); d];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let b_t = DVector::from_column_slice(&params.b[t * n..(t + 1) * n]);
        let c_t = DVector::from_column_slice(&params.c[t * n..(t + 1) * n]);
        for j in 0..d {
            let cont = ContinuousSSM::new(a.clone(), b_t.clone(), c_t.clone(), params.d_skip[j])?;
            let disc = discretize_bilinear(&cont, params.delta[t * d + j])?;
            let ut = u[t * d + j];
            states[j] = advance(&disc.abar, &disc.bbar, &states[j], ut);
            y[t * d + j] = emit(&disc.cbar, disc.d, &states[j], ut);
        }
    }
    Ok(y)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Whether every eigenvalue has a strictly negative real part.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.complex_eigenvalues().iter().all(|z| z.re < 0.0)
}

/// A random Hurwitz matrix `S - (PPᵀ + εI)` with `S` skew-symmetric: the
/// symmetric part is negative definite, so every eigenvalue has real part
/// at most `-margin`.
pub fn random_hurwitz(n: usize, margin: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let scale = 1.0 / (n as f64).sqrt();
    let mut normal = |_, _| rng.sample::<f64, _>(StandardNormal) * scale;
    let p = DMatrix::from_fn(n, n, &mut normal);
    let g = DMatrix::from_fn(n, n, &mut normal);
    let skew = (&g - g.transpose()) * 0.5;
    skew - &p * p.transpose() - DMatrix::identity(n, n) * margin
}

/// A random stable single-input single-output system with Gaussian `B`, `C`.
pub fn random_stable_ssm(n: usize, seed: u64) -> ContinuousSSM {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_hurwitz(n, 0.5, &mut rng);
    let b = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let c = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    ContinuousSSM { a, b, c, d: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn hippo_examples() {
        assert_eq!(hippo_legs(1).unwrap(), DMatrix::from_element(1, 1, -1.0));
        let a = hippo_legs(2).unwrap();
        assert_eq!(a[(0, 0)], -1.0);
        assert_eq!(a[(0, 1)], 0.0);
        assert!((a[(1, 0)] + 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(a[(1, 1)], -2.0);
        let a = hippo_legs(9).unwrap();
        for i in 0..9 {
            assert!(a[(i, i)] < 0.0);
            for j in i + 1..9 {
                assert_eq!(a[(i, j)], 0.0);
            }
        }
        assert!(hippo_legs(0).is_err());
    }

    #[test]
    fn discretize_scalar_examples() {
        let d = discretize_bilinear(&ContinuousSSM::scalar(0.0, 1.0, 1.0, 0.0), 0.1).unwrap();
        assert!((d.abar[(0, 0)] - 1.0).abs() < 1e-15 && (d.bbar[0] - 0.1).abs() < 1e-15);
        let d = discretize_bilinear(&ContinuousSSM::scalar(-1.0, 1.0, 1.0, 0.0), 2.0).unwrap();
        assert!(d.abar[(0, 0)].abs() < 1e-15 && (d.bbar[0] - 1.0).abs() < 1e-15);
        let d = discretize_bilinear(&ContinuousSSM::scalar(-1.0, 1.0, 1.0, 0.0), 1.0).unwrap();
        assert!((d.abar[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.bbar[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn discretize_errors() {
        // I - Δ/2·A = 0 when A = 2/Δ
        let s = ContinuousSSM::scalar(2.0, 1.0, 1.0, 0.0);
        assert!(matches!(discretize_bilinear(&s, 1.0), Err(Error::Singular(_))));
        assert!(discretize_bilinear(&s, 0.0).is_err());
        assert!(discretize_bilinear(&s, -1.0).is_err());
    }

    #[test]
    fn scan_examples() {
        let s = DiscreteSSM::scalar(0.5, 1.0, 1.0);
        assert_eq!(scan_recurrent(&s, &[1.0, 0.0, 0.0]), vec![1.0, 0.5, 0.25]);
        assert_eq!(scan_recurrent(&s, &[0.0; 5]), vec![0.0; 5]);
        let s = DiscreteSSM::scalar(0.0, 2.0, 3.0);
        assert_eq!(scan_recurrent(&s, &[1.0, -1.0, 4.0]), vec![6.0, -6.0, 24.0]);
    }

    #[test]
    fn kernel_examples() {
        let s = DiscreteSSM::scalar(0.5, 1.0, 1.0);
        assert_eq!(ssm_kernel(&s, 3).unwrap().taps(), &[1.0, 0.5, 0.25]);
        assert_eq!(ssm_kernel(&s, 1).unwrap().taps(), &[1.0]);
        let z = DiscreteSSM::new(
            DMatrix::zeros(3, 3),
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DVector::from_vec(vec![1.0, 1.0, 1.0]),
            0.0,
            1.0,
        )
        .unwrap();
        assert_eq!(ssm_kernel(&z, 4).unwrap().taps(), &[6.0, 0.0, 0.0, 0.0]);
        assert!(ssm_kernel(&z, 0).is_err());
    }

    #[test]
    fn convolution_examples() {
        let u = [0.3, -1.0, 2.5];
        for m in [ConvMethod::Direct, ConvMethod::Fft] {
            let y = convolve_causal(&SSMKernel::new(vec![1.0, 0.0, 0.0]), &u, m).unwrap();
            assert!(close(&y, &u, 1e-14));
            let y = convolve_causal(&SSMKernel::new(vec![1.0, 0.5, 0.25]), &[1.0; 3], m).unwrap();
            assert!(close(&y, &[1.0, 1.5, 1.75], 1e-14));
        }
        assert!(convolve_causal(&SSMKernel::new(vec![1.0]), &u, ConvMethod::Direct).is_err());
    }

    #[test]
    fn direct_and_fft_agree_at_257() {
        let mut rng = ChaCha8Rng::seed_from_u64(257);
        let k: Vec<f64> = (0..257).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..257).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel = SSMKernel::new(k);
        let a = convolve_causal(&kernel, &u, ConvMethod::Direct).unwrap();
        let b = convolve_causal(&kernel, &u, ConvMethod::Fft).unwrap();
        assert!(rel_err(&b, &a) <= 1e-8);
    }

    #[test]
    fn kernel_matches_explicit_powers() {
        for seed in 0..20 {
            let n = 1 + seed as usize % 8;
            let d = discretize_bilinear(&random_stable_ssm(n, seed), 0.3).unwrap();
            let k = ssm_kernel(&d, 64).unwrap();
            let mut power = DMatrix::<f64>::identity(n, n);
            for i in 0..64 {
                let explicit = d.cbar.dot(&(&power * &d.bbar));
                assert!((k.taps()[i] - explicit).abs() <= 1e-9 * explicit.abs().max(1.0));
                power = &d.abar * &power;
            }
        }
    }

    #[test]
    fn feedthrough_enters_both_forms() {
        let d = discretize_bilinear(&random_stable_ssm(4, 3), 0.2).unwrap().with_feedthrough(0.7);
        let u: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let rec = scan_recurrent(&d, &u);
        let conv = convolve_causal(&ssm_kernel(&d, 40).unwrap(), &u, ConvMethod::Direct).unwrap();
        assert!(rel_err(&conv, &rec) < 1e-12);
        let bare = scan_recurrent(&d.clone().with_feedthrough(0.0), &u);
        for k in 0..40 {
            assert!((rec[k] - bare[k] - 0.7 * u[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn selective_constant_parameters_match_lti_bitwise() {
        let n = 5;
        let cont = random_stable_ssm(n, 11);
        let l = 30;
        let u: Vec<f64> = (0..l).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let p = SelectiveParams {
            delta: vec![0.25; l],
            b: (0..l).flat_map(|_| cont.b.iter().copied()).collect(),
            c: (0..l).flat_map(|_| cont.c.iter().copied()).collect(),
            d_skip: vec![0.0],
            len: l,
            channels: 1,
            state_dim: n,
        };
        let sel = selective_scan(&p, &cont.a, &u).unwrap();
        let lti = scan_recurrent(&discretize_bilinear(&cont, 0.25).unwrap(), &u);
        assert_eq!(sel, lti);
    }

    #[test]
    fn selective_vanishing_step_gives_zero_response() {
        let n = 3;
        let a = hippo_legs(n).unwrap();
        let l = 10;
        let p = SelectiveParams {
            delta: vec![1e-12; l * 2],
            b: vec![1.0; l * n],
            c: vec![1.0; l * n],
            d_skip: vec![0.0; 2],
            len: l,
            channels: 2,
            state_dim: n,
        };
        let y = selective_scan(&p, &a, &vec![1.0; l * 2]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-9));
        let mut bad = p.clone();
        bad.delta[3] = 0.0;
        assert!(selective_scan(&bad, &a, &vec![1.0; l * 2]).is_err());
    }

    /// Step-by-step reference: explicit inverse, explicit products, no
    /// shared helpers with the implementation under test.
    fn interpret(p: &SelectiveParams, a: &DMatrix<f64>, u: &[f64]) -> Vec<f64> {
        let (l, d, n) = (p.len, p.channels, p.state_dim);
        let mut y = vec![0.0; l * d];
        for j in 0..d {
            let mut x = vec![0.0; n];
            for t in 0..l {
                let dt = p.delta[t * d + j];
                let m = DMatrix::from_fn(n, n, |r, c| (r == c) as u8 as f64 - dt / 2.0 * a[(r, c)]);
                let minv = m.try_inverse().unwrap();
                let mut z = vec![0.0; n];
                for r in 0..n {
                    z[r] = x[r] + dt * p.b[t * n + r] * u[t * d + j];
                    for c in 0..n {
                        z[r] += dt / 2.0 * a[(r, c)] * x[c];
                    }
                }
                for r in 0..n {
                    x[r] = (0..n).map(|c| minv[(r, c)] * z[c]).sum();
                }
                y[t * d + j] = (0..n).map(|r| p.c[t * n + r] * x[r]).sum::<f64>() + p.d_skip[j] * u[t * d + j];
            }
        }
        y
    }

    #[test]
    fn selective_matches_interpreter_l64() {
        let (l, d, n) = (64, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut r = |k: usize, s: f64| (0..k).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        let proj = SelectiveProjection {
            channels: d,
            state_dim: n,
            w_delta: r(d * d, 0.5),
            b_delta: r(d, 1.0),
            w_b: r(d * n, 1.0),
            w_c: r(d * n, 1.0),
            d_skip: r(d, 1.0),
        };
        let u = r(l * d, 1.0);
        let p = SelectiveParams::from_input(&u, l, &proj).unwrap();
        let a = hippo_legs(n).unwrap();
        let y = selective_scan(&p, &a, &u).unwrap();
        let reference = interpret(&p, &a, &u);
        assert!(rel_err(&y, &reference) < 1e-12, "{}", rel_err(&y, &reference));
    }

    #[test]
    fn hurwitz_generator_is_hurwitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 7, 33] {
            let a = random_hurwitz(n, 0.5, &mut rng);
            assert!(a.complex_eigenvalues().iter().all(|z| z.re <= -0.5 + 1e-9));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn recurrent_equals_convolution(seed in 0u64..10_000, n in 1usize..12, l in 1usize..200, dexp in -3.0f64..0.0) {
            let delta = 10f64.powf(dexp);
            let d = discretize_bilinear(&random_stable_ssm(n, seed), delta).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let u: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rec = scan_recurrent(&d, &u);
            let k = ssm_kernel(&d, l).unwrap();
            for m in [ConvMethod::Direct, ConvMethod::Fft] {
                let conv = convolve_causal(&k, &u, m).unwrap();
                prop_assert!(rel_err(&conv, &rec) <= 1e-6);
            }
        }

        #[test]
        fn bilinear_preserves_stability(seed in 0u64..10_000, n in 1usize..16, dexp in -3.0f64..1.0) {
            let s = random_stable_ssm(n, seed);
            prop_assert!(is_hurwitz(s.a()));
            let d = discretize_bilinear(&s, 10f64.powf(dexp)).unwrap();
            prop_assert!(spectral_radius(d.abar()) < 1.0);
        }

        #[test]
        fn zero_input_zero_output(n in 1usize..8, l in 1usize..50) {
            let d = discretize_bilinear(&random_stable_ssm(n, 1), 0.1).unwrap();
            prop_assert!(scan_recurrent(&d, &vec![0.0; l]).iter().all(|&v| v == 0.0));
        }
    }
}
