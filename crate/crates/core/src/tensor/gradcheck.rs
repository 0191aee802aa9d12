//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per input; inputs at most this large are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Norm floor below which a gradient counts as zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 64,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`
    /// over the checked coordinates.
    pub relative_errors: Vec<f64>,
    /// Per input: `‖analytic − numeric‖₂` over the checked coordinates.
    pub abs_errors: Vec<f64>,
    /// Per input: `max(‖analytic‖₂, ‖numeric‖₂)`.
    pub norms: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Largest error with the floor raised to `rel_floor` times the largest
    /// gradient norm of any input, so exactly-zero gradients are judged on
    /// the scale of the whole function.
    pub fn max_scaled_error(&self, rel_floor: f64) -> f64 {
        let scale = self.norms.iter().copied().fold(0.0, f64::max) * rel_floor;
        self.abs_errors
            .iter()
            .zip(&self.norms)
            .map(|(e, n)| e / n.max(scale).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// Largest ratio `abs_error / (rtol·norm + atol_rel·max_norm)`; at most 1
    /// when every input satisfies that mixed tolerance.
    pub fn max_tolerance_ratio(&self, rtol: f64, atol_rel: f64) -> f64 {
        let atol = self.norms.iter().copied().fold(0.0, f64::max) * atol_rel;
        self.abs_errors
            .iter()
            .zip(&self.norms)
            .map(|(e, n)| e / (rtol * n + atol).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// tensor in `inputs`. `f` must be deterministic and build its graph on the
/// tape it is given.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v, &tape)).collect();
    drop(tape);

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = vals.iter().map(|v| t.input(v.clone())).collect::<Result<Vec<_>>>()?;
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut abs_errors = Vec::with_capacity(inputs.len());
    let mut norms = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &k in &coords {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[k];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        coords_checked += coords.len();
        let denom = a2.sqrt().max(n2.sqrt()).max(opts.floor);
        relative_errors.push(diff2.sqrt() / denom);
        abs_errors.push(diff2.sqrt());
        norms.push(a2.sqrt().max(n2.sqrt()));
    }
    Ok(GradCheckReport {
        relative_errors,
        abs_errors,
        norms,
        coords_checked,
    })
}

/// Deterministic "generic" upstream weights so that a scalar loss
/// `Σ wᵢ·yᵢ` probes every output direction.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

/// `Σ wᵢ·yᵢ` with fixed weights `w`, as a scalar loss.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = probe_weights(tape.shape(y), seed);
    let w = tape.input(w)?;
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}
