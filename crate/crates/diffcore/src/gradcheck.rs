//! Central finite-difference gradient checking.
//!
//! The function under test is run in `f64`. Its output is projected onto a
//! fixed random direction so that non-scalar outputs are checked against a
//! generic cotangent rather than the all-ones vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Relative tolerance for gradient entries with magnitude above `floor`.
    pub rel_tol: f64,
    /// Entries at or below this magnitude are held to `abs_tol` instead.
    pub floor: f64,
    pub abs_tol: f64,
    /// Upper bound on probed entries per input; larger inputs are sampled.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            rel_tol: 1e-3,
            floor: 1e-4,
            abs_tol: 1e-5,
            max_probes: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub max_small_abs_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.probes > 0
    }
}

fn projected<F>(f: &F, inputs: &[Tensor<f64>], direction: &mut Option<Tensor<f64>>, seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let dir = direction.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let shape = tape.shape(out).to_vec();
        Tensor::from_fn(shape, |_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
    });
    let d = tape.constant(dir.clone());
    let m = tape.mul(out, d)?;
    let s = tape.sum(m)?;
    Ok((tape, vars, s))
}

/// Compares reverse-mode gradients of `f` with central differences for
/// every input slot.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut direction = None;
    let (mut tape, vars, s) = projected(&f, inputs, &mut direction, cfg.seed)?;
    tape.backward(s)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let eval = |probe: &[Tensor<f64>], dir: &mut Option<Tensor<f64>>| -> Result<f64> {
        let (tape, _, s) = projected(&f, probe, dir, cfg.seed)?;
        Ok(tape.value(s).data()[0])
    };
    for (slot, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let indices: Vec<usize> = if n <= cfg.max_probes {
            (0..n).collect()
        } else {
            (0..cfg.max_probes).map(|_| rng.random_range(0..n)).collect()
        };
        for idx in indices {
            let mut probe = inputs.to_vec();
            let orig = input.data()[idx];
            probe[slot].data_mut()[idx] = orig + cfg.eps;
            let up = eval(&probe, &mut direction)?;
            probe[slot].data_mut()[idx] = orig - cfg.eps;
            let down = eval(&probe, &mut direction)?;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic[slot].data()[idx];
            let scale = a.abs().max(numeric.abs());
            report.probes += 1;
            let failed = if scale > cfg.floor {
                let rel = (a - numeric).abs() / scale;
                report.max_rel_err = report.max_rel_err.max(rel);
                rel >= cfg.rel_tol
            } else {
                let abs = (a - numeric).abs();
                report.max_small_abs_err = report.max_small_abs_err.max(abs);
                abs >= cfg.abs_tol
            };
            if failed {
                report.failures.push(Mismatch {
                    input: slot,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}
