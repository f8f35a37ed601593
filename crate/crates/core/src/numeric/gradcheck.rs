use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub rtol: f64,
    /// Central-difference step.
    pub step: f64,
    /// Random probe directions per input.
    pub directions: usize,
    /// Relative errors are measured against at least this magnitude.
    pub floor: f64,
    pub seed: u64,
    /// A failing probe is retried this many times at a tenfold smaller
    /// step. A probe straddling a kink settles once the step no longer
    /// reaches it; a wrong gradient fails at every step.
    pub refinements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-4,
            step: 1e-5,
            directions: 3,
            floor: 1e-7,
            seed: 0,
            refinements: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_rtol(rtol: f64) -> Self {
        Self {
            rtol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rtol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

/// Compares analytic gradients against central-difference directional
/// derivatives of `loss`.
///
/// For every input and each random direction `v`, the finite difference
/// `(L(x + hv) − L(x − hv)) / 2h` is compared to `⟨∇L, v⟩`. Failures are
/// reported, never raised.
pub fn grad_check<F>(
    inputs: &[(String, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    mut loss: F,
    opts: GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut current: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(inputs.len());
    for (i, (name, base)) in inputs.iter().enumerate() {
        let grad = &analytic[i];
        assert_eq!(grad.shape(), base.shape(), "gradient shape for {name}");
        let mut worst = 0.0f64;
        for _ in 0..opts.directions {
            let dir: Vec<f64> = (0..base.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();

            let exact: f64 = grad.data().iter().zip(&dir).map(|(g, d)| g * d).sum();
            let mut step = opts.step;
            let mut rel = f64::INFINITY;
            for _ in 0..=opts.refinements {
                let perturbed = |sign: f64| -> Tensor<f64> {
                    let data = base
                        .data()
                        .iter()
                        .zip(&dir)
                        .map(|(x, d)| x + sign * step * d)
                        .collect();
                    Tensor::new(base.shape().to_vec(), data).expect("same shape")
                };
                current[i] = perturbed(1.0);
                let plus = loss(&current);
                current[i] = perturbed(-1.0);
                let minus = loss(&current);
                current[i] = base.clone();

                let numeric = (plus - minus) / (2.0 * step);
                let denom = numeric.abs().max(exact.abs()).max(opts.floor);
                rel = if numeric.is_finite() && exact.is_finite() {
                    (numeric - exact).abs() / denom
                } else {
                    f64::INFINITY
                };
                if rel <= opts.rtol {
                    break;
                }
                step /= 10.0;
            }
            worst = worst.max(rel);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: worst,
            passed: worst <= opts.rtol,
        });
    }
    GradCheckReport {
        rtol: opts.rtol,
        entries,
    }
}
