//! Training objectives: per-environment risk, discrepancy penalties between
//! environments, and a reconstruction term, combined as
//! `risk + α·discrepancy + β·reconstruction`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, HeadKind, NetworkSpec, ParamSet, Tape, Tensor, Var};

/// Which penalty aligns the environments' features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyKind {
    None,
    Mmd,
    Coral,
    Irm,
    IrmMmd,
}

impl DiscrepancyKind {
    pub const ALL: [DiscrepancyKind; 5] = [Self::None, Self::Mmd, Self::Coral, Self::Irm, Self::IrmMmd];

    /// Short algorithm name used in reports.
    pub fn algorithm(self) -> &'static str {
        match self {
            Self::None => "ERM",
            Self::Mmd => "MMD",
            Self::Coral => "CORAL",
            Self::Irm => "IRM",
            Self::IrmMmd => "IRM-MMD",
        }
    }
}

impl FromStr for DiscrepancyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "erm" => Ok(Self::None),
            "mmd" => Ok(Self::Mmd),
            "coral" => Ok(Self::Coral),
            "irm" => Ok(Self::Irm),
            "irm_mmd" | "irm-mmd" => Ok(Self::IrmMmd),
            other => Err(Error::Parse(format!("unknown discrepancy kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub discrepancy: DiscrepancyKind,
    pub reconstruction: bool,
}

impl ObjectiveConfig {
    pub fn erm() -> Self {
        Self { alpha: 0.0, beta: 0.0, discrepancy: DiscrepancyKind::None, reconstruction: false }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// `ERM`, `IRM-Rec`, `MMD`, ...
    pub fn variant(&self) -> String {
        let base = self.discrepancy.algorithm();
        if self.reconstruction {
            format!("{base}-Rec")
        } else {
            base.to_string()
        }
    }
}

impl fmt::Display for ObjectiveConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (alpha={}, beta={})", self.variant(), self.alpha, self.beta)
    }
}

/// One environment's slice of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvBatch {
    pub env_id: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl EnvBatch {
    pub fn new(env_id: usize, inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if env_id == 0 {
            return Err(Error::InvalidConfig("environment ids start at 1".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "env {env_id}: {} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBatch(format!("env {env_id} has no rows")));
        }
        Ok(Self { env_id, inputs, labels })
    }
}

/// Encoder `f`, classifier head `g` and decoder `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub encoder: NetworkSpec,
    pub classifier: NetworkSpec,
    pub decoder: NetworkSpec,
}

pub const ENCODER: &str = "encoder";
pub const CLASSIFIER: &str = "classifier";
pub const DECODER: &str = "decoder";

/// The three networks' parameter vars on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub all: Vec<Var>,
    enc: std::ops::Range<usize>,
    cls: std::ops::Range<usize>,
    dec: std::ops::Range<usize>,
}

impl BoundModel {
    pub fn encoder(&self) -> &[Var] {
        &self.all[self.enc.clone()]
    }
    pub fn classifier(&self) -> &[Var] {
        &self.all[self.cls.clone()]
    }
    pub fn decoder(&self) -> &[Var] {
        &self.all[self.dec.clone()]
    }
}

impl Model {
    /// `d -> hidden -> feat` encoder (relu then tanh), a linear 2-class head
    /// and a `feat -> hidden -> d` decoder (relu then identity).
    pub fn mlp(input: usize, hidden: usize, features: usize, classes: usize) -> Result<Self> {
        use crate::nn::Activation::*;
        let m = Self {
            encoder: NetworkSpec::new(vec![input, hidden, features], vec![Relu, Tanh], HeadKind::Reconstruction)?,
            classifier: NetworkSpec::new(vec![features, classes], vec![Identity], HeadKind::Logits)?,
            decoder: NetworkSpec::new(vec![features, hidden, input], vec![Relu, Identity], HeadKind::Reconstruction)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.classifier.validate()?;
        self.decoder.validate()?;
        let feat = self.encoder.output_width();
        if self.classifier.input_width() != feat || self.decoder.input_width() != feat {
            return Err(Error::InvalidConfig("classifier and decoder must read the encoder's features".into()));
        }
        if self.decoder.output_width() != self.encoder.input_width() {
            return Err(Error::InvalidConfig("decoder output width must equal the input width".into()));
        }
        if self.classifier.head != HeadKind::Logits {
            return Err(Error::InvalidConfig("classifier head must produce logits".into()));
        }
        Ok(())
    }

    pub fn nets(&self) -> [(&'static str, &NetworkSpec); 3] {
        [(ENCODER, &self.encoder), (CLASSIFIER, &self.classifier), (DECODER, &self.decoder)]
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        ParamSet::init(&self.nets(), seed)
    }

    pub fn bind(&self, params: &ParamSet, tape: &mut Tape) -> Result<BoundModel> {
        let all = params.bind(tape);
        BoundModel::from_vars(params, all)
    }
}

impl BoundModel {
    /// Groups vars already bound in `params` order, as handed to a
    /// finite-difference loss closure.
    pub fn from_vars(params: &ParamSet, all: Vec<Var>) -> Result<Self> {
        if all.len() != params.len() {
            return Err(Error::ShapeMismatch(format!("{} vars for {} parameters", all.len(), params.len())));
        }
        Ok(BoundModel { all, enc: params.range(ENCODER)?, cls: params.range(CLASSIFIER)?, dec: params.range(DECODER)? })
    }
}

/// Per-environment intermediate vars of one forward pass.
#[derive(Debug, Clone)]
pub struct EnvPass {
    pub inputs: Var,
    pub features: Var,
    pub logits: Var,
}

pub fn encode_envs(tape: &mut Tape, model: &Model, bound: &BoundModel, batches: &[EnvBatch]) -> Result<Vec<EnvPass>> {
    batches
        .iter()
        .map(|b| {
            let inputs = tape.constant(b.inputs.clone());
            let features = forward(tape, &model.encoder, bound.encoder(), inputs)?;
            let logits = forward(tape, &model.classifier, bound.classifier(), features)?;
            Ok(EnvPass { inputs, features, logits })
        })
        .collect()
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter();
    let Some(&first) = it.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `Σ_e mean cross-entropy` of the per-environment logits.
pub fn risk_from_logits(tape: &mut Tape, logits: &[Var], labels: &[&[usize]]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch("risk needs at least one environment".into()));
    }
    let terms = logits
        .iter()
        .zip(labels)
        .map(|(&l, y)| tape.softmax_cross_entropy(l, y))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(tape, &terms)
}

pub fn empirical_risk(tape: &mut Tape, model: &Model, bound: &BoundModel, batches: &[EnvBatch]) -> Result<Var> {
    let passes = encode_envs(tape, model, bound, batches)?;
    let logits: Vec<Var> = passes.iter().map(|p| p.logits).collect();
    let labels: Vec<&[usize]> = batches.iter().map(|b| b.labels.as_slice()).collect();
    risk_from_logits(tape, &logits, &labels)
}

/// Multipliers applied to the median-heuristic base bandwidth.
pub const BANDWIDTH_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 2.0];

/// Median pairwise Euclidean distance over the pooled rows, or 1.0 when
/// that median is zero or there are fewer than two rows.
pub fn median_heuristic(batches: &[&Tensor]) -> f64 {
    let rows: Vec<&[f64]> = batches.iter().flat_map(|t| (0..t.rows()).map(move |r| t.row(r))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, &mut m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = m.sqrt();
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

pub fn median_bandwidths(batches: &[&Tensor]) -> Vec<f64> {
    let base = median_heuristic(batches);
    BANDWIDTH_MULTIPLIERS.iter().map(|m| m * base).collect()
}

/// How MMD bandwidths are chosen inside [`composite_objective`].
#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidths {
    /// Median heuristic on the current features, held constant for the
    /// gradient.
    Median,
    Fixed(Vec<f64>),
}

/// Biased (V-statistic) squared MMD with kernel
/// `k(x, y) = exp(−‖x−y‖² / 2σ²)`, summed over `bandwidths`.
pub fn mmd_rbf(tape: &mut Tape, a: Var, b: Var, bandwidths: &[f64]) -> Result<Var> {
    if tape.value(a).rows() == 0 || tape.value(b).rows() == 0 {
        return Err(Error::EmptyBatch("MMD needs rows on both sides".into()));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig("MMD bandwidths must be finite and > 0".into()));
    }
    let kaa = tape.rbf_kernel_mean(a, a, bandwidths)?;
    let kbb = tape.rbf_kernel_mean(b, b, bandwidths)?;
    let kab = tape.rbf_kernel_mean(a, b, bandwidths)?;
    let t = tape.add(kaa, kbb)?;
    let kab2 = tape.scale(kab, 2.0);
    tape.sub(t, kab2)
}

/// [`mmd_rbf`] on plain tensors.
pub fn mmd_rbf_value(a: &Tensor, b: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let m = mmd_rbf(&mut t, va, vb, bandwidths)?;
    t.scalar_value(m)
}

fn centered_cov(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let n = tape.value(x).rows();
    let mu = tape.col_mean(x)?;
    let neg = tape.scale(mu, -1.0);
    let xc = tape.add_row(x, neg)?;
    let xt = tape.transpose(xc);
    let c = tape.matmul(xt, xc)?;
    Ok((mu, tape.scale(c, 1.0 / (n as f64 - 1.0))))
}

/// `‖μ_a − μ_b‖² + ‖C_a − C_b‖²_F / (4d²)` with unbiased covariances.
pub fn coral(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    for v in [a, b] {
        let rows = tape.value(v).rows();
        if rows < 2 {
            return Err(Error::BatchTooSmall { rows, need: 2 });
        }
    }
    let d = tape.value(a).cols();
    if tape.value(b).cols() != d {
        return Err(Error::ShapeMismatch("CORAL batches differ in width".into()));
    }
    let (ma, ca) = centered_cov(tape, a)?;
    let (mb, cb) = centered_cov(tape, b)?;
    let dm = tape.sub(ma, mb)?;
    let dm2 = tape.mul(dm, dm)?;
    let mean_term = tape.sum(dm2);
    let dc = tape.sub(ca, cb)?;
    let dc2 = tape.mul(dc, dc)?;
    let cov = tape.sum(dc2);
    let cov = tape.scale(cov, 1.0 / (4.0 * (d * d) as f64));
    tape.add(mean_term, cov)
}

pub fn coral_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let m = coral(&mut t, va, vb)?;
    t.scalar_value(m)
}

/// `Σ_e (∂/∂w risk_e(w · logits_e) at w = 1)²`.
///
/// The inner derivative has the closed form
/// `mean_i Σ_k (softmax(logits_i)_k − onehot(y_i)_k) · logits_ik`, which is
/// built here from tape ops so the outer gradient flows through it.
pub fn irm_penalty(tape: &mut Tape, logits: &[Var], labels: &[&[usize]]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch("IRM penalty needs at least one environment".into()));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, y) in logits.iter().zip(labels) {
        let (n, k) = tape.value(l).shape();
        if n == 0 || y.len() != n {
            return Err(Error::EmptyBatch("IRM environment without aligned rows".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return Err(Error::IndexOutOfRange { index: bad, len: k });
        }
        let mut onehot = Tensor::zeros(n, k);
        for (r, &c) in y.iter().enumerate() {
            onehot.data_mut()[r * k + c] = 1.0;
        }
        let oh = tape.constant(onehot);
        let p = tape.softmax_rows(l);
        let resid = tape.sub(p, oh)?;
        let prod = tape.mul(resid, l)?;
        let g = tape.sum(prod);
        let g = tape.scale(g, 1.0 / n as f64);
        terms.push(tape.mul(g, g)?);
    }
    sum_vars(tape, &terms)
}

/// `Σ_e mean_i ‖x_i − x̂_i‖²`.
pub fn reconstruction_from(tape: &mut Tape, inputs: &[Var], recon: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(inputs.len());
    for (&x, &r) in inputs.iter().zip(recon) {
        if tape.value(x).shape() != tape.value(r).shape() {
            return Err(Error::ShapeMismatch(format!(
                "reconstruction {:?} vs input {:?}",
                tape.value(r).shape(),
                tape.value(x).shape()
            )));
        }
        let n = tape.value(x).rows();
        let d = tape.sub(x, r)?;
        let d2 = tape.mul(d, d)?;
        let s = tape.sum(d2);
        terms.push(tape.scale(s, 1.0 / n as f64));
    }
    sum_vars(tape, &terms)
}

pub fn reconstruction_term(tape: &mut Tape, model: &Model, bound: &BoundModel, batches: &[EnvBatch]) -> Result<Var> {
    let passes = encode_envs(tape, model, bound, batches)?;
    reconstruction_of(tape, model, bound, &passes)
}

fn reconstruction_of(tape: &mut Tape, model: &Model, bound: &BoundModel, passes: &[EnvPass]) -> Result<Var> {
    let mut inputs = Vec::with_capacity(passes.len());
    let mut recon = Vec::with_capacity(passes.len());
    for p in passes {
        inputs.push(p.inputs);
        recon.push(forward(tape, &model.decoder, bound.decoder(), p.features)?);
    }
    reconstruction_from(tape, &inputs, &recon)
}

/// Mean of `pair(a, b)` over all unordered pairs of environments; zero with
/// a single environment.
/// [`mmd_rbf`] averaged over environment pairs, with each environment's
/// self-similarity term computed once.
fn mmd_over_pairs(tape: &mut Tape, feats: &[Var], bandwidths: &[f64]) -> Result<Var> {
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig("MMD bandwidths must be finite and > 0".into()));
    }
    let selfs = feats.iter().map(|&f| tape.rbf_kernel_mean(f, f, bandwidths)).collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let cross = tape.rbf_kernel_mean(feats[i], feats[j], bandwidths)?;
            let s = tape.add(selfs[i], selfs[j])?;
            let c2 = tape.scale(cross, 2.0);
            terms.push(tape.sub(s, c2)?);
        }
    }
    let n = terms.len();
    let s = sum_vars(tape, &terms)?;
    Ok(if n > 1 { tape.scale(s, 1.0 / n as f64) } else { s })
}

fn over_pairs(
    tape: &mut Tape,
    feats: &[Var],
    mut pair: impl FnMut(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let mut terms = Vec::new();
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            terms.push(pair(tape, feats[i], feats[j])?);
        }
    }
    let n = terms.len();
    let s = sum_vars(tape, &terms)?;
    Ok(if n > 1 { tape.scale(s, 1.0 / n as f64) } else { s })
}

/// Values of the three terms and the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub risk: f64,
    pub discrepancy: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// `risk + α·discrepancy + β·reconstruction` on the tape, with the value of
/// every term. The discrepancy is zero for `None`; the reconstruction term
/// is zero and the decoder unused unless `cfg.reconstruction` is set.
pub fn composite_objective(
    tape: &mut Tape,
    cfg: &ObjectiveConfig,
    model: &Model,
    bound: &BoundModel,
    batches: &[EnvBatch],
    bandwidths: &Bandwidths,
) -> Result<(Var, Breakdown)> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::EmptyBatch("objective needs at least one environment".into()));
    }
    let passes = encode_envs(tape, model, bound, batches)?;
    let logits: Vec<Var> = passes.iter().map(|p| p.logits).collect();
    let feats: Vec<Var> = passes.iter().map(|p| p.features).collect();
    let labels: Vec<&[usize]> = batches.iter().map(|b| b.labels.as_slice()).collect();
    let risk = risk_from_logits(tape, &logits, &labels)?;

    let bw = |tape: &Tape| -> Vec<f64> {
        match bandwidths {
            Bandwidths::Fixed(v) => v.clone(),
            Bandwidths::Median => {
                let ts: Vec<&Tensor> = feats.iter().map(|&f| tape.value(f)).collect();
                median_bandwidths(&ts)
            }
        }
    };
    let disc = match cfg.discrepancy {
        DiscrepancyKind::None => tape.constant(Tensor::scalar(0.0)),
        DiscrepancyKind::Mmd => {
            let s = bw(tape);
            mmd_over_pairs(tape, &feats, &s)?
        }
        DiscrepancyKind::Coral => over_pairs(tape, &feats, coral)?,
        DiscrepancyKind::Irm => irm_penalty(tape, &logits, &labels)?,
        DiscrepancyKind::IrmMmd => {
            let s = bw(tape);
            let irm = irm_penalty(tape, &logits, &labels)?;
            let mmd = mmd_over_pairs(tape, &feats, &s)?;
            tape.add(irm, mmd)?
        }
    };
    let rec = if cfg.reconstruction {
        reconstruction_of(tape, model, bound, &passes)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let a_disc = tape.scale(disc, cfg.alpha);
    let b_rec = tape.scale(rec, cfg.beta);
    let total = tape.add(risk, a_disc)?;
    let total = tape.add(total, b_rec)?;
    let breakdown = Breakdown {
        risk: tape.scalar_value(risk)?,
        discrepancy: tape.scalar_value(disc)?,
        reconstruction: tape.scalar_value(rec)?,
        total: tape.scalar_value(total)?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_check, Activation, Param};
    use crate::seeding;
    use proptest::prelude::*;

    fn gauss(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = seeding::rng_for(seed, 7);
        Tensor::new(n, d, (0..n * d).map(|_| seeding::gaussian(&mut rng)).collect()).unwrap()
    }

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn batches(seed: u64, envs: usize, n: usize, d: usize) -> Vec<EnvBatch> {
        (0..envs)
            .map(|e| {
                let x = gauss(seed + e as u64, n, d);
                let y = (0..n).map(|i| (i + e) % 2).collect();
                EnvBatch::new(e + 1, x, y).unwrap()
            })
            .collect()
    }

    fn value_with(model: &Model, ps: &ParamSet, f: impl Fn(&mut Tape, &BoundModel) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let b = model.bind(ps, &mut tape).unwrap();
        let v = f(&mut tape, &b).unwrap();
        tape.scalar_value(v).unwrap()
    }

    fn zeroed(ps: &ParamSet, net: &str) -> ParamSet {
        let mut ps = ps.clone();
        for p in ps.params_mut() {
            if p.name.starts_with(net) {
                p.value = Tensor::zeros(p.value.rows(), p.value.cols());
            }
        }
        ps
    }

    #[test]
    fn risk_cases() {
        let model = Model::mlp(3, 5, 4, 2).unwrap();
        let ps = zeroed(&model.init(1).unwrap(), CLASSIFIER);
        let bs = batches(1, 2, 6, 3);
        let r = value_with(&model, &ps, |t, b| empirical_risk(t, &model, b, &bs));
        assert!((r - 2.0 * 2f64.ln()).abs() < 1e-12);

        // Hand case: logits (1, −1) label 0 and (0, 2) label 1.
        let mut tape = Tape::new();
        let l = tape.constant(t(&[&[1.0, -1.0], &[0.0, 2.0]]));
        let r = risk_from_logits(&mut tape, &[l], &[&[0, 1]]).unwrap();
        let want = ((1.0 + (-2f64).exp()).ln() + (1.0 + (-2f64).exp()).ln()) / 2.0;
        assert!((tape.scalar_value(r).unwrap() - want).abs() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.constant(t(&[&[50.0, -50.0], &[-50.0, 50.0]]));
        let r = risk_from_logits(&mut tape, &[l], &[&[0, 1]]).unwrap();
        assert!(tape.scalar_value(r).unwrap() < 1e-12);
        assert!(matches!(risk_from_logits(&mut Tape::new(), &[], &[]), Err(Error::EmptyBatch(_))));
    }

    fn naive_mmd(a: &Tensor, b: &Tensor, bw: &[f64]) -> f64 {
        let k = |x: &[f64], y: &[f64], s: f64| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            (-d / (2.0 * s * s)).exp()
        };
        let mut total = 0.0;
        for &s in bw {
            let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
            for i in 0..a.rows() {
                for j in 0..a.rows() {
                    aa += k(a.row(i), a.row(j), s);
                }
            }
            for i in 0..b.rows() {
                for j in 0..b.rows() {
                    bb += k(b.row(i), b.row(j), s);
                }
            }
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    ab += k(a.row(i), b.row(j), s);
                }
            }
            let (n, m) = (a.rows() as f64, b.rows() as f64);
            total += aa / (n * n) + bb / (m * m) - 2.0 * ab / (n * m);
        }
        total
    }

    #[test]
    fn mmd_cases() {
        let a = gauss(3, 4, 2);
        assert!(mmd_rbf_value(&a, &a, &[1.0]).unwrap().abs() <= 1e-12);
        let x = t(&[&[0.5, -1.0]]);
        let y = t(&[&[1.5, 0.0]]);
        let s: f64 = 0.8;
        let want = 2.0 - 2.0 * (-2.0 / (2.0 * s * s)).exp();
        assert!((mmd_rbf_value(&x, &y, &[s]).unwrap() - want).abs() < 1e-12);
        let b = gauss(4, 4, 2);
        let bw = [0.5, 1.0, 2.0];
        assert!((mmd_rbf_value(&a, &b, &bw).unwrap() - naive_mmd(&a, &b, &bw)).abs() < 1e-10);
        assert!(mmd_rbf_value(&Tensor::zeros(0, 2), &b, &bw).is_err());
    }

    #[test]
    fn median_heuristic_cases() {
        let x = t(&[&[0.0], &[3.0], &[4.0]]);
        // distances 3, 4, 1 -> median 3
        assert_eq!(median_heuristic(&[&x]), 3.0);
        assert_eq!(median_heuristic(&[&t(&[&[1.0], &[1.0]])]), 1.0);
        assert_eq!(median_bandwidths(&[&x]), vec![1.5, 3.0, 6.0]);
    }

    #[test]
    fn coral_cases() {
        let a = gauss(5, 6, 3);
        assert_eq!(coral_value(&a, &a).unwrap(), 0.0);
        let v = [0.3, -1.2, 2.0];
        let shifted = a.add_row(&Tensor::row_vector(v.to_vec())).unwrap();
        let want: f64 = v.iter().map(|x| x * x).sum();
        assert!((coral_value(&a, &shifted).unwrap() - want).abs() < 1e-10);

        // Hand arithmetic on 3x2 batches.
        // a: mean (1, 2), centered rows (−1,−1),(0,−1),(1,2); C_a = [[1, 1.5],[1.5, 3]]
        // b: mean (0, 0), centered rows (1,0),(−1,0),(0,0);  C_b = [[1, 0],[0, 0]]
        let a = t(&[&[0.0, 1.0], &[1.0, 1.0], &[2.0, 4.0]]);
        let b = t(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 0.0]]);
        let want = (1.0 + 4.0) + (0.0 + 1.5 * 1.5 * 2.0 + 9.0) / 16.0;
        assert!((coral_value(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!(matches!(coral_value(&t(&[&[1.0, 2.0]]), &b), Err(Error::BatchTooSmall { rows: 1, need: 2 })));
    }

    fn irm_value(logits: &[Tensor], labels: &[&[usize]]) -> f64 {
        let mut tape = Tape::new();
        let ls: Vec<Var> = logits.iter().map(|l| tape.constant(l.clone())).collect();
        let p = irm_penalty(&mut tape, &ls, labels).unwrap();
        tape.scalar_value(p).unwrap()
    }

    #[test]
    fn irm_cases() {
        // Two of label 0, one of label 1, logits ±ln2/2: risk(w) is stationary at w = 1.
        let h = 2f64.ln() / 2.0;
        let l = t(&[&[h, -h], &[h, -h], &[h, -h]]);
        assert!(irm_value(&[l], &[&[0, 0, 1]]) < 1e-24);

        let l = t(&[&[1.0, -0.5], &[0.2, 0.7]]);
        let y: &[usize] = &[0, 0];
        let risk = |w: f64| crate::nn::softmax_cross_entropy(&l.map(|v| w * v), y).unwrap();
        let eps = 1e-6;
        let fd = (risk(1.0 + eps) - risk(1.0 - eps)) / (2.0 * eps);
        let got = irm_value(&[l.clone()], &[y]);
        assert!((got - fd * fd).abs() < 1e-9, "{got} vs {}", fd * fd);
        assert!((irm_value(&[l.clone(), l.clone()], &[y, y]) - 2.0 * got).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_cases() {
        let eye = |n: usize| {
            let mut e = Tensor::zeros(n, n);
            for i in 0..n {
                e.data_mut()[i * n + i] = 1.0;
            }
            e
        };
        let lin = |n| NetworkSpec::new(vec![n, n], vec![Activation::Identity], HeadKind::Reconstruction).unwrap();
        let model = Model {
            encoder: lin(3),
            classifier: NetworkSpec::new(vec![3, 2], vec![Activation::Identity], HeadKind::Logits).unwrap(),
            decoder: lin(3),
        };
        let ps = ParamSet::from_params(vec![
            Param { name: "encoder.0.weight".into(), value: eye(3) },
            Param { name: "encoder.0.bias".into(), value: Tensor::zeros(1, 3) },
            Param { name: "classifier.0.weight".into(), value: Tensor::zeros(3, 2) },
            Param { name: "classifier.0.bias".into(), value: Tensor::zeros(1, 2) },
            Param { name: "decoder.0.weight".into(), value: eye(3) },
            Param { name: "decoder.0.bias".into(), value: Tensor::zeros(1, 3) },
        ]);
        let bs = batches(9, 2, 5, 3);
        assert_eq!(value_with(&model, &ps, |t, b| reconstruction_term(t, &model, b, &bs)), 0.0);
        let zero_dec = zeroed(&ps, DECODER);
        let want: f64 = bs
            .iter()
            .map(|b| b.inputs.data().iter().map(|v| v * v).sum::<f64>() / b.inputs.rows() as f64)
            .sum();
        let got = value_with(&model, &zero_dec, |t, b| reconstruction_term(t, &model, b, &bs));
        assert!((got - want).abs() < 1e-12);

        // Hand batch: x = [(1, 2)], x̂ = [(0, 4)] and x = [(0,0),(1,1)], x̂ = 0 -> 5 + 1.
        let mut tape = Tape::new();
        let x1 = tape.constant(t(&[&[1.0, 2.0]]));
        let r1 = tape.constant(t(&[&[0.0, 4.0]]));
        let x2 = tape.constant(t(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let r2 = tape.constant(Tensor::zeros(2, 2));
        let v = reconstruction_from(&mut tape, &[x1, x2], &[r1, r2]).unwrap();
        assert_eq!(tape.scalar_value(v).unwrap(), 6.0);
        assert!(reconstruction_from(&mut tape, &[x1], &[r2]).is_err());
    }

    fn objective(model: &Model, ps: &ParamSet, cfg: ObjectiveConfig, bs: &[EnvBatch]) -> Breakdown {
        let mut tape = Tape::new();
        let b = model.bind(ps, &mut tape).unwrap();
        composite_objective(&mut tape, &cfg, model, &b, bs, &Bandwidths::Median).unwrap().1
    }

    #[test]
    fn composite_cases() {
        let model = Model::mlp(3, 6, 4, 2).unwrap();
        let ps = model.init(2).unwrap();
        let bs = batches(5, 3, 8, 3);
        let risk = value_with(&model, &ps, |t, b| empirical_risk(t, &model, b, &bs));
        for kind in DiscrepancyKind::ALL {
            let cfg = ObjectiveConfig { alpha: 0.0, beta: 0.0, discrepancy: kind, reconstruction: true };
            assert_eq!(objective(&model, &ps, cfg, &bs).total, risk);
        }
        assert_eq!(objective(&model, &ps, ObjectiveConfig::erm(), &bs).total, risk);

        let cfg = ObjectiveConfig { alpha: 1.0, beta: 1.0, discrepancy: DiscrepancyKind::Coral, reconstruction: true };
        let br = objective(&model, &ps, cfg, &bs);
        let mut tape = Tape::new();
        let b = model.bind(&ps, &mut tape).unwrap();
        let passes = encode_envs(&mut tape, &model, &b, &bs).unwrap();
        let f: Vec<Tensor> = passes.iter().map(|p| tape.value(p.features).clone()).collect();
        let pairs = [(0, 1), (0, 2), (1, 2)];
        let coral_sep = pairs.iter().map(|&(i, j)| coral_value(&f[i], &f[j]).unwrap()).sum::<f64>() / 3.0;
        let rec = value_with(&model, &ps, |t, b| reconstruction_term(t, &model, b, &bs));
        assert!((br.total - (risk + coral_sep + rec)).abs() < 1e-12);
        assert!((br.total - (br.risk + br.discrepancy + br.reconstruction)).abs() < 1e-12);
    }

    #[test]
    fn composite_is_linear_in_alpha_and_beta() {
        let model = Model::mlp(3, 6, 4, 2).unwrap();
        let ps = model.init(3).unwrap();
        let bs = batches(6, 2, 7, 3);
        for kind in DiscrepancyKind::ALL {
            let at = |alpha, beta| {
                objective(&model, &ps, ObjectiveConfig { alpha, beta, discrepancy: kind, reconstruction: true }, &bs)
                    .total
            };
            let (a0, a1, a2) = (at(0.1, 2.0), at(10.0, 2.0), at(1000.0, 2.0));
            let slope = (a1 - a0) / 9.9;
            assert!((a2 - (a0 + slope * 999.9)).abs() <= 1e-10 * a2.abs().max(1.0), "{kind:?}");
            let (b0, b1, b2) = (at(1.0, 0.1), at(1.0, 10.0), at(1.0, 1000.0));
            let slope = (b1 - b0) / 9.9;
            assert!((b2 - (b0 + slope * 999.9)).abs() <= 1e-10 * b2.abs().max(1.0), "{kind:?}");
        }
    }

    #[test]
    fn every_term_passes_gradient_check() {
        let model = Model::mlp(3, 5, 3, 2).unwrap();
        let bs = batches(11, 2, 6, 3);
        for seed in 0..3 {
            let ps = model.init(seed).unwrap();
            let feats = {
                let mut tape = Tape::new();
                let b = model.bind(&ps, &mut tape).unwrap();
                let p = encode_envs(&mut tape, &model, &b, &bs).unwrap();
                p.iter().map(|p| tape.value(p.features).clone()).collect::<Vec<_>>()
            };
            let bw = median_bandwidths(&feats.iter().collect::<Vec<_>>());
            for kind in DiscrepancyKind::ALL {
                let cfg = ObjectiveConfig { alpha: 0.7, beta: 0.3, discrepancy: kind, reconstruction: true };
                let fixed = Bandwidths::Fixed(bw.clone());
                let rep = finite_difference_check(&ps, 1e-5, 1e-4, |t, v| {
                    let b = BoundModel { all: v.to_vec(), enc: ps.range(ENCODER)?, cls: ps.range(CLASSIFIER)?, dec: ps.range(DECODER)? };
                    Ok(composite_objective(t, &cfg, &model, &b, &bs, &fixed)?.0)
                })
                .unwrap();
                assert!(rep.passed, "{kind:?} seed {seed}: {rep:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mmd_properties(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
            let a = gauss(seed, n, 2);
            let b = gauss(seed ^ 0x55, m, 2);
            let bw = [0.5, 1.0, 2.0];
            let ab = mmd_rbf_value(&a, &b, &bw).unwrap();
            prop_assert!(mmd_rbf_value(&a, &a, &bw).unwrap() <= 1e-12);
            prop_assert!((ab - mmd_rbf_value(&b, &a, &bw).unwrap()).abs() <= 1e-12);
            prop_assert!(ab >= -1e-12);
            prop_assert!((ab - naive_mmd(&a, &b, &bw)).abs() <= 1e-10);
            let rev: Vec<usize> = (0..n).rev().collect();
            prop_assert!((ab - mmd_rbf_value(&a.gather_rows(&rev), &b, &bw).unwrap()).abs() <= 1e-10);
        }

        #[test]
        fn coral_properties(seed in any::<u64>(), n in 2usize..7) {
            let a = gauss(seed, n, 3);
            let b = gauss(seed ^ 0x99, n + 1, 3);
            let c = coral_value(&a, &b).unwrap();
            prop_assert!(c >= 0.0);
            let mut idx: Vec<usize> = (0..n).collect();
            seeding::shuffle(&mut seeding::rng_for(seed, 1), &mut idx);
            prop_assert!((c - coral_value(&a.gather_rows(&idx), &b).unwrap()).abs() <= 1e-10);
        }

        #[test]
        fn irm_is_nonnegative(seed in any::<u64>()) {
            let l = gauss(seed, 4, 2);
            prop_assert!(irm_value(&[l], &[&[0, 1, 1, 0]]) >= 0.0);
        }
    }
}
