//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use emr_transfer::autodiff::Tensor;
use emr_transfer::data::{align_schemas, Dataset, FeatureSchema, PatientRecord, Series};
use emr_transfer::losses::LossWeights;
use emr_transfer::pipeline::{LabelScaler, SourceModel, SourceTask, TransitionBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn record(id: &str, features: &[(&str, Vec<f64>)], outcome: u8, los: f64) -> PatientRecord {
    let series: BTreeMap<String, Series> = features
        .iter()
        .map(|(f, v)| (f.to_string(), Series::dense(v.clone())))
        .collect();
    PatientRecord {
        id: id.to_string(),
        series,
        outcome,
        los,
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Source over `a, b, p` and target over `a, b, q`. The target's `b` is
/// offset by `offset`; labels follow the sum of feature `a` alone, so the
/// domains differ only in information the labels do not need.
pub fn two_domains(n: usize, offset: f64, seed: u64) -> (Dataset, Dataset) {
    let mut r = rng(seed);
    let mut cohort = |prefix: &str, private: &str, shift: f64| {
        let records = (0..n)
            .map(|i| {
                let len = r.random_range(3..=6);
                let mut seq = |m: f64| (0..len).map(|_| m + r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
                let a = seq(0.0);
                let b = seq(shift);
                let p = seq(0.0);
                let score: f64 = a.iter().sum();
                record(
                    &format!("{prefix}{i}"),
                    &[("a", a), ("b", b), (private, p)],
                    u8::from(score > 0.0),
                    3.0 + score,
                )
            })
            .collect();
        Dataset::new(FeatureSchema::new(names(&["a", "b", private])).unwrap(), records)
    };
    let src = cohort("S", "p", 0.0);
    let tar = cohort("T", "q", offset);
    (src, tar)
}

/// Stage-2 bundle for [`two_domains`]-style data with a random teacher.
pub fn bundle(src: &Dataset, tar: &Dataset, hidden: usize, rep: usize, weights: LossWeights, seed: u64) -> TransitionBundle {
    let mut r = rng(seed);
    let labels = LabelScaler::fit(&src.los()).unwrap();
    let teacher = SourceModel::init(src.schema.names().to_vec(), hidden, rep, SourceTask::Regression, labels, &mut r).unwrap();
    let alignment = align_schemas(&src.schema, &tar.schema);
    TransitionBundle::init(teacher, &alignment, hidden, weights, &mut r).unwrap()
}

pub fn refs(ds: &Dataset) -> Vec<&PatientRecord> {
    ds.records.iter().collect()
}

pub fn assert_bits_eq(a: &[Tensor], b: &[Tensor], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: tensor count");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(x.shape(), y.shape(), "{what}[{i}] shape");
        for (k, (u, v)) in x.data().iter().zip(y.data()).enumerate() {
            assert_eq!(u.to_bits(), v.to_bits(), "{what}[{i}][{k}]: {u} vs {v}");
        }
    }
}

/// DTW by enumerating every monotone alignment path, accumulating each
/// path's cost from its start.
pub fn dtw_exhaustive(a: &[f64], b: &[f64]) -> f64 {
    fn go(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64) -> f64 {
        let acc = acc + (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            return acc;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.len() {
            best = best.min(go(a, b, i + 1, j, acc));
        }
        if j + 1 < b.len() {
            best = best.min(go(a, b, i, j + 1, acc));
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            best = best.min(go(a, b, i + 1, j + 1, acc));
        }
        best
    }
    go(a, b, 0, 0, 0.0)
}

/// AUROC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn auroc_pairwise(scores: &[f64], labels: &[f64]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

/// KL(softmax(p) || softmax(q)) summed term by term.
pub fn kl_direct(p: &[f64], q: &[f64]) -> f64 {
    let soft = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect::<Vec<_>>()
    };
    let (p, q) = (soft(p), soft(q));
    p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi.max(1e-12)).ln()).sum()
}

/// Loss closing the end-to-end gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum E2eLoss {
    Mse,
    Bce,
    KlRep,
    DomainCe,
    Target,
}

pub const E2E_LOSSES: [E2eLoss; 5] = [E2eLoss::Mse, E2eLoss::Bce, E2eLoss::KlRep, E2eLoss::DomainCe, E2eLoss::Target];

/// Worst relative error between analytic and central-difference gradients
/// of encode → project → predict → `loss` for one random configuration
/// (N ≤ 4 channels, H ≤ 5, T ≤ 6, ragged batch of up to 3 patients).
pub fn e2e_gradcheck(seed: u64, loss: E2eLoss) -> emr_transfer::gradcheck::GradCheck {
    use emr_transfer::adversarial::DomainClassifier;
    use emr_transfer::encoder::{McGruEncoder, PredictionHeads};
    use emr_transfer::gradcheck::{check, STEP};
    use emr_transfer::losses;
    use emr_transfer::nn::Module;
    use emr_transfer::pipeline::TargetModel;

    let mut r = rng(1000 + seed);
    let n = r.random_range(1..=4);
    let h = r.random_range(1..=5);
    let s = r.random_range(1..=4);
    let b = r.random_range(1..=3);
    let features: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();
    let records: Vec<PatientRecord> = (0..b)
        .map(|p| {
            let series = features
                .iter()
                .map(|f| {
                    let t = r.random_range(1..=6);
                    (f.clone(), Series::dense((0..t).map(|_| r.random_range(-2.0..2.0)).collect()))
                })
                .collect();
            PatientRecord {
                id: format!("P{p}"),
                series,
                outcome: (p % 2) as u8,
                los: r.random_range(0.0..10.0),
            }
        })
        .collect();
    let batch: Vec<&PatientRecord> = records.iter().collect();
    let model = TargetModel {
        encoder: McGruEncoder::init(features, h, s, &mut r).unwrap(),
        heads: PredictionHeads::init(s, &mut r),
        los: LabelScaler::fit(&records.iter().map(|x| x.los).collect::<Vec<_>>()).unwrap(),
    };
    let m = r.random_range(1..=n);
    let clf = DomainClassifier::init(m * h, &mut r);
    let teacher = Tensor::matrix(b, s, (0..b * s).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let y_out = Tensor::column(records.iter().map(|x| f64::from(x.outcome)).collect()).unwrap();
    let y_los = Tensor::column(records.iter().map(|x| x.los / 5.0).collect()).unwrap();
    let domains: Vec<usize> = (0..b).map(|i| i % 2).collect();

    let mut inputs: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let n_model = inputs.len();
    if loss == E2eLoss::DomainCe {
        inputs.extend(clf.params().into_iter().cloned());
    }
    check(&inputs, STEP, |g, vars| {
        let tv = model.vars_from(&mut vars[..n_model].iter().copied());
        let embed = tv.encoder.embed_all(g, &model.encoder, &batch)?;
        let rep = tv.encoder.project(g, &embed)?;
        let (p, los) = tv.heads.forward(g, rep)?;
        match loss {
            E2eLoss::Mse => losses::mse(g, los, &y_los),
            E2eLoss::Bce => losses::bce(g, p, &y_out),
            E2eLoss::KlRep => losses::kl_rep(g, &teacher, rep),
            E2eLoss::DomainCe => {
                let cv = clf.vars_from(&mut vars[n_model..].iter().copied());
                let f_sf = g.concat_cols(&embed[..m])?;
                let logits = cv.forward(g, f_sf)?;
                losses::domain_ce(g, logits, &domains)
            }
            E2eLoss::Target => model.loss(g, &tv, &batch),
        }
    })
    .unwrap()
}
