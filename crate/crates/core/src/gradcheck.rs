//! Finite-difference verification of the model's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoding::TagLabel;
use crate::error::{Error, Result};
use crate::model::{AdrTagger, ModelConfig, Objective};
use crate::numerics::{finite_difference_gradient, relative_error, Matrix, Parameterized};

/// Denominator floor for relative errors; keeps near-zero gradients from
/// being judged on round-off alone.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub drug_classes: usize,
    pub vocab_size: usize,
    pub seeds: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Test fixture: flip the sign of this parameter's analytic gradient.
    pub flip_sign_of: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            embed_dim: 5,
            hidden: 7,
            seq_len: 4,
            drug_classes: 3,
            vocab_size: 10,
            seeds: 10,
            epsilon: 1e-5,
            tolerance: 1e-4,
            flip_sign_of: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub seed: u64,
    pub objective: &'static str,
    pub parameter: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(|c| c.max_rel_error >= self.tolerance)
    }
}

/// Per-parameter maximum relative error between the analytic gradient of
/// `objective` and central differences. `tamper` may modify analytic
/// gradients before comparison.
pub fn compare_gradients(
    model: &mut AdrTagger,
    tokens: &[usize],
    objective: Objective<'_>,
    epsilon: f64,
    mut tamper: impl FnMut(&str, &mut Matrix),
) -> Result<Vec<(String, f64)>> {
    model.zero_grad();
    model.forward(tokens, objective)?;
    model.backward(1.0)?;
    let mut analytic: Vec<(String, Matrix)> = model
        .parameters()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();
    model.zero_grad();
    for (name, g) in &mut analytic {
        tamper(name, g);
    }
    let numeric = finite_difference_gradient(|m: &AdrTagger| m.loss(tokens, objective), model, epsilon)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|((name, a), (_, n))| {
            let worst = a
                .as_slice()
                .iter()
                .zip(n.as_slice())
                .map(|(x, y)| relative_error(*x, *y, REL_ERROR_FLOOR))
                .fold(0.0, f64::max);
            (name.clone(), worst)
        })
        .collect())
}

/// A small random model with random (nonzero) biases, plus a random input.
pub fn random_instance(config: &GradCheckConfig, seed: u64) -> Result<(AdrTagger, Vec<usize>, Vec<TagLabel>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::new(config.vocab_size, config.embed_dim, config.hidden, config.drug_classes);
    let embeddings = Matrix::uniform(config.vocab_size, config.embed_dim, 1.0, &mut rng);
    let mut model = AdrTagger::with_embeddings(cfg, embeddings, seed)?;
    for (_, p) in model.parameters_mut() {
        if p.shape().1 == 1 {
            let (r, c) = p.shape();
            p.value = Matrix::uniform(r, c, 0.5, &mut rng);
        }
    }
    let tokens: Vec<usize> = (0..config.seq_len)
        .map(|_| rng.random_range(1..config.vocab_size))
        .collect();
    let gold: Vec<TagLabel> = (0..config.seq_len)
        .map(|_| [TagLabel::IAdr, TagLabel::IInd, TagLabel::O][rng.random_range(0..3)])
        .collect();
    let target = rng.random_range(0..config.drug_classes);
    Ok((model, tokens, gold, target))
}

/// Checks both heads on `config.seeds` random tiny models.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.epsilon.is_nan() || config.epsilon <= 0.0 {
        return Err(Error::usage(format!("epsilon must be positive, got {}", config.epsilon)));
    }
    if config.seq_len == 0 || config.vocab_size < 2 || config.seeds == 0 {
        return Err(Error::usage("gradcheck needs a nonempty sequence, 2+ tokens and 1+ seeds"));
    }
    let flip = config.flip_sign_of.clone();
    let tamper = |name: &str, g: &mut Matrix| {
        if flip.as_deref() == Some(name) {
            g.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
        }
    };
    let mut checks = Vec::new();
    for seed in 0..config.seeds {
        let (mut model, tokens, gold, target) = random_instance(config, seed)?;
        for (label, objective) in [("drug", Objective::Drug(target)), ("tags", Objective::Tags(&gold))] {
            for (parameter, max_rel_error) in compare_gradients(&mut model, &tokens, objective, config.epsilon, tamper)? {
                checks.push(ParamCheck {
                    seed,
                    objective: label,
                    parameter,
                    max_rel_error,
                });
            }
        }
    }
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        checks,
    })
}
