//! Synthetic paired source/target cohorts.
//!
//! Both cohorts are driven by the same kind of low-dimensional latent AR(1)
//! health state. Each feature is a noisy linear readout of that state; the
//! target domain applies a per-feature affine distortion to shared features
//! and draws its patients' drift from a shifted distribution. Labels depend
//! only on the latent path: the outcome thresholds the terminal latent norm
//! and the length of stay is an affine function of the time the latent norm
//! first crosses a severity threshold.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSchema, PatientRecord, Series};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_source: usize,
    pub n_target: usize,
    /// Shared feature count `M`.
    pub n_shared: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
    /// Observation window length range (inclusive).
    pub t_min: usize,
    pub t_max: usize,
    /// Magnitude of the source→target distribution shift.
    pub shift: f64,
    pub latent_dim: usize,
    /// Standard deviation of observation noise.
    pub noise: f64,
    /// Probability that a feature is measured at a given step.
    pub observe_prob: f64,
    /// Steps simulated to derive the labels.
    pub horizon: usize,
    /// Latent norm at which a patient counts as having deteriorated.
    pub severity_threshold: f64,
    /// Terminal latent norm above which the outcome is death.
    pub outcome_threshold: f64,
    /// Expected range of the outcome base rate, checked by tests.
    pub outcome_band: (f64, f64),
    /// Seed for structure, latent paths and labels.
    pub seed: u64,
    /// Seed for observation sampling; defaults to a value derived from `seed`.
    pub noise_seed: Option<u64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_source: 2000,
            n_target: 264,
            n_shared: 8,
            n_source_private: 4,
            n_target_private: 4,
            t_min: 6,
            t_max: 16,
            shift: 1.0,
            latent_dim: 3,
            noise: 0.3,
            observe_prob: 0.8,
            horizon: 40,
            severity_threshold: 2.0,
            outcome_threshold: 2.3,
            outcome_band: (0.2, 0.6),
            seed: 0,
            noise_seed: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("generator: {msg}")));
        if self.n_source == 0 || self.n_target == 0 {
            return bad("patient counts must be positive");
        }
        if self.n_shared + self.n_source_private == 0 || self.n_shared + self.n_target_private == 0 {
            return bad("each domain needs at least one feature");
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad("need 1 <= t_min <= t_max");
        }
        if self.horizon < self.t_max {
            return bad("horizon must cover the observation window");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if !(self.observe_prob > 0.0 && self.observe_prob <= 1.0) {
            return bad("observe_prob must be in (0, 1]");
        }
        if !(self.noise >= 0.0 && self.shift.is_finite() && self.shift >= 0.0) {
            return bad("noise and shift must be non-negative");
        }
        Ok(())
    }

    pub fn shared_names(&self) -> Vec<String> {
        (0..self.n_shared).map(|i| format!("shared_{i:02}")).collect()
    }

    pub fn source_private_names(&self) -> Vec<String> {
        (0..self.n_source_private).map(|i| format!("src_private_{i:02}")).collect()
    }

    pub fn target_private_names(&self) -> Vec<String> {
        (0..self.n_target_private).map(|i| format!("tar_private_{i:02}")).collect()
    }
}

/// Readout of one feature: `scale * (w · z) + offset + noise`.
#[derive(Debug, Clone)]
struct Readout {
    name: String,
    weights: Vec<f64>,
    scale: f64,
    offset: f64,
}

struct Domain {
    readouts: Vec<Readout>,
    drift_mean: Vec<f64>,
    id_prefix: &'static str,
    n: usize,
    stream: u64,
}

const AR_COEF: f64 = 0.8;
const DRIFT_STD: f64 = 0.25;
const INNOVATION_STD: f64 = 0.15;
const LOS_BASE: f64 = 2.0;
const LOS_SLOPE: f64 = 0.5;
const LOS_NOISE: f64 = 0.75;

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generates a (source, target) pair fully determined by the config seeds.
pub fn synth_generate(cfg: &GeneratorConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let mut structure = ChaCha8Rng::seed_from_u64(cfg.seed);

    let shared: Vec<Vec<f64>> = (0..cfg.n_shared).map(|_| unit(normal_vec(&mut structure, d))).collect();
    let src_private: Vec<Vec<f64>> = (0..cfg.n_source_private)
        .map(|_| unit(normal_vec(&mut structure, d)))
        .collect();
    // Target-private readouts resemble randomly chosen source features so
    // that related features exist across the domains.
    let source_pool: Vec<&Vec<f64>> = shared.iter().chain(&src_private).collect();
    let tar_private: Vec<Vec<f64>> = (0..cfg.n_target_private)
        .map(|_| {
            let base = source_pool[structure.random_range(0..source_pool.len())];
            let jitter = normal_vec(&mut structure, d);
            unit(base.iter().zip(&jitter).map(|(b, j)| b + 0.2 * j).collect())
        })
        .collect();
    let drift_dir = unit(normal_vec(&mut structure, d));

    let readout = |name: String, weights: &Vec<f64>, rng: &mut ChaCha8Rng, distort: f64| {
        let u: f64 = rng.random_range(-1.0..1.0);
        let o: f64 = StandardNormal.sample(rng);
        Readout {
            name,
            weights: weights.clone(),
            scale: 1.0 + 0.25 * distort * u,
            offset: 5.0 + distort * o,
        }
    };

    let mut src_readouts = Vec::new();
    let mut tar_readouts = Vec::new();
    for (name, w) in cfg.shared_names().into_iter().zip(&shared) {
        src_readouts.push(readout(name.clone(), w, &mut structure, 0.0));
        tar_readouts.push(readout(name, w, &mut structure, cfg.shift));
    }
    for (name, w) in cfg.source_private_names().into_iter().zip(&src_private) {
        src_readouts.push(readout(name, w, &mut structure, 0.0));
    }
    for (name, w) in cfg.target_private_names().into_iter().zip(&tar_private) {
        tar_readouts.push(readout(name, w, &mut structure, 0.0));
    }

    let noise_seed = cfg.noise_seed.unwrap_or(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let source = Domain {
        readouts: src_readouts,
        drift_mean: vec![0.0; d],
        id_prefix: "S",
        n: cfg.n_source,
        stream: 1,
    };
    let target = Domain {
        readouts: tar_readouts,
        drift_mean: drift_dir.iter().map(|v| 0.1 * cfg.shift * v).collect(),
        id_prefix: "T",
        n: cfg.n_target,
        stream: 2,
    };
    Ok((
        generate_domain(cfg, &source, noise_seed)?,
        generate_domain(cfg, &target, noise_seed)?,
    ))
}

fn generate_domain(cfg: &GeneratorConfig, dom: &Domain, noise_seed: u64) -> Result<Dataset> {
    let d = cfg.latent_dim;
    let mut latent_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    latent_rng.set_stream(dom.stream);
    let mut obs_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    obs_rng.set_stream(dom.stream);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let schema = FeatureSchema::new(dom.readouts.iter().map(|r| r.name.clone()).collect())?;
    let mut records = Vec::with_capacity(dom.n);
    for p in 0..dom.n {
        // latent path and labels: latent stream only
        let drift: Vec<f64> = dom
            .drift_mean
            .iter()
            .map(|m| m + DRIFT_STD * Distribution::<f64>::sample(&StandardNormal, &mut latent_rng))
            .collect();
        let mut z: Vec<f64> = normal_vec(&mut latent_rng, d).into_iter().map(|v| 0.5 * v).collect();
        let mut path = Vec::with_capacity(cfg.horizon);
        let mut crossed = None;
        for t in 0..cfg.horizon {
            path.push(z.clone());
            if crossed.is_none() && dot(&z, &z).sqrt() > cfg.severity_threshold {
                crossed = Some(t);
            }
            for k in 0..d {
                let eps: f64 = StandardNormal.sample(&mut latent_rng);
                z[k] = AR_COEF * z[k] + drift[k] + INNOVATION_STD * eps;
            }
        }
        let terminal = dot(&z, &z).sqrt();
        let outcome = u8::from(terminal > cfg.outcome_threshold);
        let time_to_threshold = crossed.unwrap_or(cfg.horizon) as f64;
        let los_noise: f64 = StandardNormal.sample(&mut latent_rng);
        let los = (LOS_BASE + LOS_SLOPE * time_to_threshold + LOS_NOISE * los_noise).max(0.0);

        // observations: observation stream only
        let window = obs_rng.random_range(cfg.t_min..=cfg.t_max);
        let mut series: BTreeMap<String, Series> = BTreeMap::new();
        for (fi, r) in dom.readouts.iter().enumerate() {
            let mut s = Series::default();
            for (t, zt) in path.iter().take(window).enumerate() {
                let observed = obs_rng.random::<f64>() < cfg.observe_prob;
                let eps = noise.sample(&mut obs_rng);
                // every patient has the first feature measured at admission
                if observed || (fi == 0 && t == 0) {
                    s.times.push(t as u32);
                    s.values.push(r.scale * dot(&r.weights, zt) + r.offset + eps);
                }
            }
            if !s.is_empty() {
                series.insert(r.name.clone(), s);
            }
        }
        records.push(PatientRecord {
            id: format!("{}{:05}", dom.id_prefix, p),
            series,
            outcome,
            los,
        });
    }
    Ok(Dataset::new(schema, records))
}
