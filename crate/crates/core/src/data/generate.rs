use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LongTailDataset, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Parameters of the synthetic long-tailed benchmark.
///
/// Training counts follow `n_i = max(1, round(n_max * ((i + k) / (1 + k))^-e))`
/// for class rank `i = 1..c`, exponent `e` and rank offset `k`. With `k = 0`
/// this is a plain power law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub tokens: usize,
    pub feat_dim: usize,
    pub n_max: usize,
    pub pareto_exponent: f64,
    #[serde(default)]
    pub rank_offset: f64,
    pub co_occurrence_strength: f64,
    pub noise_sigma: f64,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    /// 20 classes spanning 775 down to 4 training positives, split 6:6:8,
    /// with 8-dimensional prototypes.
    fn default() -> Self {
        GeneratorConfig {
            classes: 20,
            tokens: 8,
            feat_dim: 8,
            n_max: 775,
            pareto_exponent: 5.05,
            rank_offset: 9.4,
            co_occurrence_strength: 0.3,
            noise_sigma: 1.0,
            test_per_class: 30,
            seed: 0,
        }
    }
}

// independent random streams derived from the seed
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_AFFINITY: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TEST: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.tokens == 0 || self.feat_dim == 0 || self.n_max == 0 {
            return Err(Error::invalid("generator dimensions and n_max must be >= 1"));
        }
        if !(self.pareto_exponent > 0.0) || !self.pareto_exponent.is_finite() {
            return Err(Error::invalid("pareto_exponent must be a finite positive number"));
        }
        if !(self.rank_offset >= 0.0) || !self.rank_offset.is_finite() {
            return Err(Error::invalid("rank_offset must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.co_occurrence_strength) {
            return Err(Error::invalid("co_occurrence_strength must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if self.test_per_class == 0 {
            return Err(Error::invalid("test_per_class must be >= 1"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|i| format!("class_{i:02}")).collect()
    }
}

/// Per-class training targets, nonincreasing in class rank.
pub fn target_counts(cfg: &GeneratorConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let k = cfg.rank_offset;
    Ok((1..=cfg.classes)
        .map(|i| {
            let ratio = (i as f64 + k) / (1.0 + k);
            let n = (cfg.n_max as f64 * ratio.powf(-cfg.pareto_exponent)).round();
            (n as usize).max(1)
        })
        .collect())
}

struct World {
    prototypes: Vec<Vec<f64>>,
    /// Probability of adding class j to a sample whose primary class is i.
    co_prob: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = stream(cfg.seed, STREAM_PROTOTYPES);
        let prototypes = (0..cfg.classes)
            .map(|_| (0..cfg.feat_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut rng = stream(cfg.seed, STREAM_AFFINITY);
        let co_prob = (0..cfg.classes)
            .map(|i| {
                (0..cfg.classes)
                    .map(|j| {
                        let u: f64 = rng.gen();
                        if i == j {
                            0.0
                        } else {
                            // cubing keeps most affinities small and a few strong
                            cfg.co_occurrence_strength * u * u * u
                        }
                    })
                    .collect()
            })
            .collect();
        World { prototypes, co_prob }
    }

    /// Draws samples until every class has exactly `quota[i]` positives.
    fn draw(&self, cfg: &GeneratorConfig, quota: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let c = cfg.classes;
        let mut remaining = quota.to_vec();
        let mut samples = Vec::new();
        loop {
            let left: usize = remaining.iter().sum();
            if left == 0 {
                break;
            }
            // primary class proportional to its outstanding quota
            let mut ticket = rng.gen_range(0..left);
            let primary = remaining
                .iter()
                .position(|&r| {
                    if ticket < r {
                        true
                    } else {
                        ticket -= r;
                        false
                    }
                })
                .expect("ticket within total");
            let mut positives = vec![primary];
            remaining[primary] -= 1;
            for j in 0..c {
                let p = self.co_prob[primary][j];
                let roll: f64 = rng.gen();
                if roll < p && remaining[j] > 0 && positives.len() < cfg.tokens {
                    positives.push(j);
                    remaining[j] -= 1;
                }
            }
            samples.push(self.render(cfg, &positives, rng)?);
        }
        Ok(samples)
    }

    /// Each positive class owns at least one token slot; the other slots pick
    /// a positive class uniformly. Values are rounded to `f32`.
    fn render(&self, cfg: &GeneratorConfig, positives: &[usize], rng: &mut ChaCha8Rng) -> Result<Sample> {
        let mut slots: Vec<usize> = positives.to_vec();
        while slots.len() < cfg.tokens {
            slots.push(positives[rng.gen_range(0..positives.len())]);
        }
        // Fisher-Yates so the guaranteed slots are not always first
        for i in (1..slots.len()).rev() {
            let j = rng.gen_range(0..=i);
            slots.swap(i, j);
        }
        let mut data = Vec::with_capacity(cfg.tokens * cfg.feat_dim);
        for &class in &slots {
            for &p in &self.prototypes[class] {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((p + cfg.noise_sigma * noise) as f32 as f64);
            }
        }
        let mut labels = vec![0u8; cfg.classes];
        for &p in positives {
            labels[p] = 1;
        }
        Sample::new(Tensor::matrix(cfg.tokens, cfg.feat_dim, data)?, labels)
    }
}

/// Long-tailed training split and class-balanced test split.
///
/// Samples pick a primary class in proportion to outstanding quota, then
/// add co-occurring classes by a seeded affinity table while their quotas
/// last, so training positives hit [`target_counts`] exactly and every test
/// class has exactly `test_per_class` positives.
pub fn generate_synthetic_lt(cfg: &GeneratorConfig) -> Result<(LongTailDataset, LongTailDataset)> {
    let targets = target_counts(cfg)?;
    let world = World::new(cfg);
    let names = cfg.class_names();

    let train_samples = world.draw(cfg, &targets, &mut stream(cfg.seed, STREAM_TRAIN))?;
    let train = LongTailDataset::new(train_samples, names.clone())?;
    if train.class_counts != targets {
        return Err(Error::invalid("generator failed to meet class quotas"));
    }

    let balanced = vec![cfg.test_per_class; cfg.classes];
    let test_samples = world.draw(cfg, &balanced, &mut stream(cfg.seed, STREAM_TEST))?;
    let test = LongTailDataset::new(test_samples, names)?.with_groups(train.groups.clone())?;
    Ok((train, test))
}
