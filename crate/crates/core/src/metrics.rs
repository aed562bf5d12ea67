//! Precision, diversity and fidelity of generated configurations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::ConfigIndex;
use crate::daydream::DaydreamDataset;
use crate::diffusion::{sample, NoiseEstimator, NoiseSchedule, SampleRequest};
use crate::domain::{capacity, capacity_class, CapacityClass, Codec, Configuration, SkillProfile};
use crate::error::{Error, Result};

/// Added to covariance diagonals before taking square roots.
pub const FID_RIDGE: f64 = 1e-6;

/// Percentage of samples whose class under `skills` is `target`.
pub fn accuracy(samples: &[Configuration], target: CapacityClass, skills: &SkillProfile) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy of an empty sample set"));
    }
    let hits = samples.iter().filter(|c| capacity_class(c, skills) == target).count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Mean squared capacity error in (parts/hour)^2.
pub fn mse(samples: &[Configuration], target: u32, skills: &SkillProfile) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("mse of an empty sample set"));
    }
    let total: f64 = samples
        .iter()
        .map(|c| {
            let d = capacity(c, skills) as f64 - target as f64;
            d * d
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Per-mille of samples that exactly reproduce a training configuration.
pub fn duplication_rate(samples: &[Configuration], index: &ConfigIndex) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let dup = samples.iter().filter(|c| index.contains(c)).count();
    1000.0 * dup as f64 / samples.len() as f64
}

/// Encoded configuration block as a feature vector; the padding is constant
/// and contributes nothing to the distance.
pub fn features(config: &Configuration, codec: &Codec) -> Vec<f64> {
    config.counts().iter().map(|&k| codec.encode_count(k) as f64).collect()
}

fn moments(xs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = DVector::zeros(d);
    for x in xs {
        mean += DVector::from_column_slice(x);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let r = DVector::from_column_slice(x) - &mean;
        cov.ger(1.0, &r, &r, 1.0);
    }
    cov /= n - 1.0;
    for k in 0..d {
        cov[(k, k)] += FID_RIDGE;
    }
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clipped to zero.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`. The cross term uses
/// `tr (S1^(1/2) S2 S1^(1/2))^(1/2)`, which keeps every root symmetric.
pub fn fid_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("fid needs at least two elements per set"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::invalid("fid feature vectors differ in length"));
    }
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    let r1 = sqrt_psd(s1.clone());
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(inner).trace();
    let value = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

pub fn fid(a: &[Configuration], b: &[Configuration], codec: &Codec) -> Result<f64> {
    let fa: Vec<Vec<f64>> = a.iter().map(|c| features(c, codec)).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(|c| features(c, codec)).collect();
    fid_features(&fa, &fb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub class: CapacityClass,
    pub accu_percent: f64,
    pub mse: f64,
    pub dr_permille: f64,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub samples_per_class: usize,
    pub guided: bool,
    pub w: f64,
}

impl EvalReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.accu_percent).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn row(&self, class: CapacityClass) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    /// Classes as columns, one line per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.rows {
            out.push_str(&format!(",{}", r.class));
        }
        out.push('\n');
        let lines: [(&str, fn(&EvalRow) -> f64); 4] = [
            ("Accu(%)", |r| r.accu_percent),
            ("MSE", |r| r.mse),
            ("DR(permille)", |r| r.dr_permille),
            ("FID", |r| r.fid),
        ];
        for (name, get) in lines {
            out.push_str(name);
            for r in &self.rows {
                out.push_str(&format!(",{}", get(r)));
            }
            out.push('\n');
        }
        out
    }
}

/// Fixed inputs of an evaluation run.
#[derive(Clone, Debug)]
pub struct EvalSettings {
    /// Profile under which generated configurations are scored.
    pub skills: SkillProfile,
    pub codec: Codec,
    pub seed: u64,
}

/// Sample `n_per_class` configurations per class at guidance `w` and score
/// them. FID compares against the training records of the same class, or
/// the whole dataset when the class has fewer than two records.
pub fn evaluate<E: NoiseEstimator + ?Sized>(
    model: &E,
    schedule: &NoiseSchedule,
    dataset: &DaydreamDataset,
    classes: &[CapacityClass],
    n_per_class: usize,
    w: f64,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    if dataset.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two training records"));
    }
    let index = ConfigIndex::of(dataset);
    let bounds = dataset.bounds();
    let everything: Vec<Configuration> = dataset.records.iter().map(|r| r.config.clone()).collect();
    let mut rows = Vec::with_capacity(classes.len());
    for (k, &class) in classes.iter().enumerate() {
        let req = SampleRequest {
            class,
            w,
            count: n_per_class,
            seed: settings.seed.wrapping_add(k as u64),
            snapshot_steps: Vec::new(),
        };
        let out = sample(model, schedule, &req, &settings.codec, &bounds)?;
        let same: Vec<Configuration> = dataset
            .records
            .iter()
            .filter(|r| r.capacity_class == class)
            .map(|r| r.config.clone())
            .collect();
        let reference = if same.len() >= 2 { &same } else { &everything };
        let fid = if out.configs.len() >= 2 {
            fid(&out.configs, reference, &settings.codec)?
        } else {
            f64::NAN
        };
        rows.push(EvalRow {
            class,
            accu_percent: accuracy(&out.configs, class, &settings.skills)?,
            mse: mse(&out.configs, class.value(), &settings.skills)?,
            dr_permille: duplication_rate(&out.configs, &index),
            fid,
        });
    }
    Ok(EvalReport {
        rows,
        samples_per_class: n_per_class,
        guided: w > 0.0,
        w,
    })
}
