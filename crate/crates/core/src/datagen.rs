//! Synthetic environments with an invariant and a spurious feature.
//!
//! Each row draws a label `y ~ Bernoulli(label_prior)`, an invariant bit
//! `u = y XOR Bernoulli(p_inv)` and a spurious bit `c = y XOR
//! Bernoulli(p_sp)`. The input is `±1` copies of `u` in the first `⌈d/2⌉`
//! coordinates and of `c` in the rest, plus `σ`-scaled gaussian noise.
//! Per row the draws happen in the order `y`, `u` flip, `c` flip, then `d`
//! gaussians (always drawn, even when `σ = 0`), all from stream
//! `DATA + env_id` of the seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seeding::{self, stream, ALGORITHM_ID};

pub const MAX_ROWS: usize = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub env_id: usize,
    pub n: usize,
    pub p_inv: f64,
    pub p_sp: f64,
    pub d: usize,
    pub sigma: f64,
    /// `P(y = 1)`.
    pub label_prior: f64,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("environment {}: {m}", self.env_id)));
        if self.env_id == 0 {
            return bad("ids start at 1".into());
        }
        for (name, p) in [("p_inv", self.p_inv), ("p_sp", self.p_sp), ("label_prior", self.label_prior)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not in [0, 1]"));
            }
        }
        if self.n == 0 || self.n > MAX_ROWS {
            return bad(format!("n = {} is not in 1..={MAX_ROWS}", self.n));
        }
        if self.d < 2 || self.d > 1024 {
            return bad(format!("d = {} is not in 2..=1024", self.d));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma = {} must be finite and >= 0", self.sigma));
        }
        Ok(())
    }

    /// Number of leading coordinates that carry the invariant bit.
    pub fn invariant_width(&self) -> usize {
        self.d.div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    pub spec: EnvironmentSpec,
    pub seed: u64,
    pub algorithm: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub invariant_bits: Vec<u8>,
    pub spurious_bits: Vec<u8>,
}

pub fn generate_environment(spec: &EnvironmentSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeding::rng_for(seed, stream::DATA + spec.env_id as u64);
    let (n, d, k) = (spec.n, spec.d, spec.invariant_width());
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut inv = Vec::with_capacity(n);
    let mut sp = Vec::with_capacity(n);
    for _ in 0..n {
        let y = seeding::bernoulli(&mut rng, spec.label_prior) as u8;
        let u = y ^ seeding::bernoulli(&mut rng, spec.p_inv) as u8;
        let c = y ^ seeding::bernoulli(&mut rng, spec.p_sp) as u8;
        for j in 0..d {
            let bit = if j < k { u } else { c };
            let noise = seeding::gaussian(&mut rng);
            inputs.push(2.0 * bit as f64 - 1.0 + spec.sigma * noise);
        }
        labels.push(y as usize);
        inv.push(u);
        sp.push(c);
    }
    Ok(Dataset {
        spec: *spec,
        seed,
        algorithm: ALGORITHM_ID.into(),
        inputs: Tensor::new(n, d, inputs)?,
        labels,
        invariant_bits: inv,
        spurious_bits: sp,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps only the invariant coordinates.
    pub fn strip_spurious(&self) -> Dataset {
        let k = self.spec.invariant_width();
        let data: Vec<f64> = (0..self.len()).flat_map(|r| self.inputs.row(r)[..k].to_vec()).collect();
        Dataset {
            spec: EnvironmentSpec { d: k, ..self.spec },
            inputs: Tensor::new(self.len(), k, data).expect("row count unchanged"),
            spurious_bits: vec![0; self.len()],
            ..self.clone()
        }
    }

    /// Fraction of rows where `bits` equals the label.
    pub fn agreement(&self, bits: &[u8]) -> f64 {
        let hits = bits.iter().zip(&self.labels).filter(|(b, y)| **b as usize == **y).count();
        hits as f64 / self.len() as f64
    }

    /// CSV with header `env,y,x0,..,x{d-1}`.
    pub fn to_csv(&self) -> Result<String> {
        write_csv(std::slice::from_ref(self))
    }
}

/// One CSV holding several environments.
pub fn write_csv(sets: &[Dataset]) -> Result<String> {
    let d = sets.first().map_or(0, |s| s.spec.d);
    if sets.iter().any(|s| s.spec.d != d) {
        return Err(Error::ShapeMismatch("datasets differ in width".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["env".to_string(), "y".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for s in sets {
        for r in 0..s.len() {
            let mut rec = vec![s.spec.env_id.to_string(), s.labels[r].to_string()];
            rec.extend(s.inputs.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Two training environments and one held-out test environment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suite {
    pub train: Vec<Dataset>,
    pub test: Dataset,
}

impl Suite {
    pub fn specs(&self) -> Vec<EnvironmentSpec> {
        self.train.iter().chain(std::iter::once(&self.test)).map(|d| d.spec).collect()
    }
}

pub const SUITE_N: usize = 2000;
pub const SUITE_D: usize = 4;
pub const SUITE_P_INV: f64 = 0.25;
pub const SUITE_P_SP: [f64; 3] = [0.1, 0.2, 0.9];
pub const SUITE_SIGMA: f64 = 0.3;

pub fn suite_from_specs(specs: &[EnvironmentSpec], seed: u64) -> Result<Suite> {
    if specs.len() < 3 {
        return Err(Error::InvalidConfig("a suite needs at least two training environments and a test one".into()));
    }
    let mut sets = specs.iter().map(|s| generate_environment(s, seed)).collect::<Result<Vec<_>>>()?;
    let test = sets.pop().expect("len >= 3");
    let mut ids: Vec<usize> = specs.iter().map(|s| s.env_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("environment ids must be distinct".into()));
    }
    Ok(Suite { train: sets, test })
}

fn suite_specs(p_inv: f64, sigma: f64) -> Vec<EnvironmentSpec> {
    SUITE_P_SP
        .iter()
        .enumerate()
        .map(|(i, &p_sp)| EnvironmentSpec {
            env_id: i + 1,
            n: SUITE_N,
            p_inv,
            p_sp,
            d: SUITE_D,
            sigma,
            label_prior: 0.5,
        })
        .collect()
}

/// Spurious bit agrees with the label 90% / 80% of the time in training and
/// 10% at test; the invariant bit agrees 75% everywhere.
pub fn cmnist_like_suite(seed: u64) -> Result<Suite> {
    suite_from_specs(&suite_specs(SUITE_P_INV, SUITE_SIGMA), seed)
}

pub fn cmnist_like_specs() -> Vec<EnvironmentSpec> {
    suite_specs(SUITE_P_INV, SUITE_SIGMA)
}

/// Same spurious structure, but the invariant bit equals the label and
/// there is no noise, so the data are separable.
pub fn separable_suite(seed: u64) -> Result<Suite> {
    suite_from_specs(&separable_specs(), seed)
}

pub fn separable_specs() -> Vec<EnvironmentSpec> {
    suite_specs(0.0, 0.0)
}

fn cell(spec: &EnvironmentSpec, y: u8, u: u8, c: u8) -> f64 {
    let py = if y == 1 { spec.label_prior } else { 1.0 - spec.label_prior };
    let pu = if u != y { spec.p_inv } else { 1.0 - spec.p_inv };
    let pc = if c != y { spec.p_sp } else { 1.0 - spec.p_sp };
    py * pu * pc
}

fn noiseless(spec: &EnvironmentSpec) -> Result<()> {
    spec.validate()?;
    if spec.sigma > 0.0 {
        return Err(Error::Unsupported(format!(
            "reference accuracy is only exact for sigma = 0 (got {})",
            spec.sigma
        )));
    }
    Ok(())
}

/// Accuracy of the best predictor of `y` from `(u, c)`, by enumerating the
/// joint of `(y, u, c)`.
pub fn bayes_reference_accuracy(spec: &EnvironmentSpec) -> Result<f64> {
    noiseless(spec)?;
    let mut acc = 0.0;
    for u in 0..2u8 {
        for c in 0..2u8 {
            acc += cell(spec, 0, u, c).max(cell(spec, 1, u, c));
        }
    }
    Ok(acc)
}

/// Accuracy of the best predictor of `y` from `u` alone.
pub fn invariant_only_accuracy(spec: &EnvironmentSpec) -> Result<f64> {
    noiseless(spec)?;
    let mut acc = 0.0;
    for u in 0..2u8 {
        let m = |y| cell(spec, y, u, 0) + cell(spec, y, u, 1);
        acc += m(0).max(m(1));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    fn spec(n: usize, p_inv: f64, p_sp: f64, sigma: f64) -> EnvironmentSpec {
        EnvironmentSpec { env_id: 1, n, p_inv, p_sp, d: 4, sigma, label_prior: 0.5 }
    }

    fn three_sigma(p: f64, n: usize) -> f64 {
        3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let s = spec(500, 0.25, 0.1, 0.3);
        let a = generate_environment(&s, 42).unwrap();
        let b = generate_environment(&s, 42).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a, b);
        assert_ne!(a, generate_environment(&s, 43).unwrap());
        assert_eq!(a.algorithm, "chacha8-le64-boxmuller-v1");
    }

    #[test]
    fn separable_when_nothing_flips() {
        let s = spec(300, 0.0, 0.0, 0.0);
        let ds = generate_environment(&s, 1).unwrap();
        for r in 0..ds.len() {
            let sign = if ds.labels[r] == 1 { 1.0 } else { -1.0 };
            assert!(ds.inputs.row(r).iter().all(|&v| v == sign));
        }
        assert_eq!(bayes_reference_accuracy(&s).unwrap(), 1.0);
    }

    #[test]
    fn uninformative_spurious_bit() {
        let s = spec(20_000, 0.25, 0.5, 0.0);
        let ds = generate_environment(&s, 2).unwrap();
        let a = ds.agreement(&ds.spurious_bits);
        assert!((a - 0.5).abs() <= three_sigma(0.5, s.n), "{a}");
    }

    #[test]
    fn spurious_agreement_concentrates() {
        let s = spec(20_000, 0.25, 0.1, 0.0);
        let ds = generate_environment(&s, 3).unwrap();
        let a = ds.agreement(&ds.spurious_bits);
        assert!((0.889..=0.911).contains(&a), "{a}");
        let a = ds.agreement(&ds.invariant_bits);
        assert!((a - 0.75).abs() <= three_sigma(0.75, s.n), "{a}");
        let ones = ds.labels.iter().filter(|&&y| y == 1).count() as f64 / s.n as f64;
        assert!((ones - 0.5).abs() <= three_sigma(0.5, s.n));
    }

    #[test]
    fn reference_accuracies() {
        for p_sp in [0.0, 0.3, 0.9] {
            assert_eq!(bayes_reference_accuracy(&spec(10, 0.0, p_sp, 0.0)).unwrap(), 1.0);
        }
        assert!((invariant_only_accuracy(&spec(10, 0.25, 0.1, 0.0)).unwrap() - 0.75).abs() < 1e-15);
        // Cells (u, c) = (y, y) 0.3375, (y, ¬y) 0.0375, (¬y, y) 0.1125, (¬y, ¬y) 0.0125
        // per label; the best rule follows c whenever the bits disagree.
        assert!((bayes_reference_accuracy(&spec(10, 0.25, 0.1, 0.0)).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(bayes_reference_accuracy(&spec(10, 0.25, 0.1, 0.5)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn stripping_leaves_the_invariant_ceiling() {
        let s = spec(20_000, 0.25, 0.1, 0.0);
        let ds = generate_environment(&s, 4).unwrap().strip_spurious();
        assert_eq!(ds.inputs.cols(), 2);
        // Best rule on the stripped data: predict the sign of the first coordinate.
        let hits = (0..ds.len()).filter(|&r| (ds.inputs.get(r, 0) > 0.0) as usize == ds.labels[r]).count();
        let acc = hits as f64 / ds.len() as f64;
        let ceiling = invariant_only_accuracy(&s).unwrap();
        assert_eq!(ceiling, 1.0 - s.p_inv);
        assert!((acc - ceiling).abs() <= three_sigma(ceiling, s.n));
    }

    #[test]
    fn suite_defaults() {
        let suite = cmnist_like_suite(0).unwrap();
        let specs = suite.specs();
        assert_eq!(specs.iter().map(|s| s.p_sp).collect::<Vec<_>>(), vec![0.1, 0.2, 0.9]);
        assert!(specs.iter().all(|s| s.p_inv == 0.25 && s.n == 2000));
        for tr in &suite.train {
            assert!(1.0 - tr.spec.p_sp > 1.0 - tr.spec.p_inv);
        }
        assert!((1.0 - suite.test.spec.p_sp - 0.1).abs() < 1e-15);
        assert!(suite.test.agreement(&suite.test.spurious_bits) < 0.5);
    }

    #[test]
    fn csv_layout() {
        let ds = generate_environment(&spec(2, 0.0, 0.0, 0.0), 0).unwrap();
        let text = ds.to_csv().unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("env,y,x0,x1,x2,x3"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_environment(&spec(0, 0.1, 0.1, 0.0), 0).is_err());
        assert!(generate_environment(&spec(5, 1.1, 0.1, 0.0), 0).is_err());
        assert!(generate_environment(&EnvironmentSpec { d: 1, ..spec(5, 0.1, 0.1, 0.0) }, 0).is_err());
        assert!(generate_environment(&spec(5, 0.1, 0.1, -1.0), 0).is_err());
    }

    #[test]
    fn flip_rates_within_three_sigma() {
        // Each rate lands outside its 3σ band with probability ~0.27%, so over
        // 96 draws we expect ~0.26 exceedances; P(>= 4) is about 1e-4.
        let mut outside = Vec::new();
        for seed in 0..12u64 {
            for (p_inv, p_sp) in [(0.05, 0.5), (0.25, 0.1), (0.4, 0.9), (0.0, 1.0)] {
                let s = spec(4000, p_inv, p_sp, 0.0);
                let ds = generate_environment(&s, seed).unwrap();
                let inv = 1.0 - ds.agreement(&ds.invariant_bits);
                let sp = 1.0 - ds.agreement(&ds.spurious_bits);
                for (got, want) in [(inv, p_inv), (sp, p_sp)] {
                    if (got - want).abs() > three_sigma(want, s.n) {
                        outside.push((seed, got, want));
                    }
                }
            }
        }
        assert!(outside.len() <= 3, "{outside:?}");
    }
}
