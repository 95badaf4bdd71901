//! Encoders, decoders and classifiers on finite domains, and the per-map
//! quantities built from them: the induced `(Y, Z)` joint, the domain
//! discrepancy `K(f)`, the reconstruction loss `R(f, θ)` and classification
//! risk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{kl_divergence, mutual_information, Axis, Channel, DivergenceKind, FiniteSpace, JointPmf, Pmf};

/// One domain: an input pmf `p(x)` and a label channel `p(y | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDomainModel {
    px: Pmf,
    label_channel: Channel,
}

impl FiniteDomainModel {
    pub fn new(px: Pmf, label_channel: Channel) -> Result<Self> {
        if px.len() != label_channel.from_space().size() {
            return Err(Error::SpaceMismatch(format!(
                "p(x) has {} symbols but the label channel has {} rows",
                px.len(),
                label_channel.from_space().size()
            )));
        }
        Ok(Self { px, label_channel })
    }

    /// Build from raw numbers over indexed spaces `x*` and `y*`.
    pub fn from_tables(px: Vec<f64>, channel: Vec<Vec<f64>>) -> Result<Self> {
        let xs = FiniteSpace::indexed("x", px.len())?;
        let ny = channel.first().map_or(0, Vec::len);
        let ys = FiniteSpace::indexed("y", ny)?;
        Self::new(Pmf::new(xs.clone(), px)?, Channel::new(xs, ys, channel)?)
    }

    pub fn x_space(&self) -> &FiniteSpace {
        self.px.space()
    }

    pub fn y_space(&self) -> &FiniteSpace {
        self.label_channel.to_space()
    }

    pub fn px(&self) -> &Pmf {
        &self.px
    }

    pub fn label_channel(&self) -> &Channel {
        &self.label_channel
    }

    /// `p(y, x)` with rows Y and columns X.
    pub fn yx_joint(&self) -> JointPmf {
        let (nx, ny) = (self.x_space().size(), self.y_space().size());
        let mut probs = vec![0.0; ny * nx];
        for x in 0..nx {
            let px = self.px.get(x);
            for (y, &pyx) in self.label_channel.row(x).iter().enumerate() {
                probs[y * nx + x] = px * pyx;
            }
        }
        JointPmf::new(self.y_space().clone(), self.x_space().clone(), probs)
            .expect("product of valid pmf and channel is a valid joint")
    }

    /// `p(y) = Σ_x p(x) p(y | x)`.
    pub fn label_marginal(&self) -> Pmf {
        self.yx_joint().marginal(Axis::Row)
    }
}

/// Encoder `f(z | x)` as a row-stochastic matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMap {
    x_size: usize,
    z_size: usize,
    rows: Vec<Vec<f64>>,
    id: u64,
}

const ROW_TOL: f64 = 1e-12;

impl RepresentationMap {
    pub fn new(z_size: usize, rows: Vec<Vec<f64>>, id: u64) -> Result<Self> {
        if rows.is_empty() || z_size == 0 {
            return Err(Error::InvalidSpace("representation map needs |X|, |Z| >= 1".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != z_size {
                return Err(Error::SpaceMismatch(format!(
                    "map row {i} has {} entries, expected {z_size}",
                    r.len()
                )));
            }
            if r.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidDistribution(format!("map row {i} has a negative entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidDistribution(format!("map row {i} sums to {s}")));
            }
        }
        Ok(Self { x_size: rows.len(), z_size, rows, id })
    }

    /// Deterministic map `x -> assignment[x]`.
    pub fn deterministic(z_size: usize, assignment: &[usize], id: u64) -> Result<Self> {
        let rows = assignment
            .iter()
            .map(|&z| {
                if z >= z_size {
                    return Err(Error::IndexOutOfRange { index: z, len: z_size });
                }
                let mut r = vec![0.0; z_size];
                r[z] = 1.0;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(z_size, rows, id)
    }

    pub fn identity(size: usize) -> Self {
        let assignment: Vec<usize> = (0..size).collect();
        Self::deterministic(size, &assignment, 0).expect("identity map is valid")
    }

    pub fn constant(x_size: usize, z_size: usize, z: usize) -> Result<Self> {
        Self::deterministic(z_size, &vec![z; x_size], 0)
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn z_size(&self) -> usize {
        self.z_size
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn prob(&self, x: usize, z: usize) -> f64 {
        self.rows[x][z]
    }

    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|r| r.iter().filter(|&&p| p != 0.0).count() == 1 && r.contains(&1.0))
    }
}

/// A reconstruction point: a symbol of X, or a real vector when X is embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecoderOutput {
    Index(usize),
    Point(Vec<f64>),
}

/// Decoder `θ: Z -> X̂`, one output per `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    outputs: Vec<DecoderOutput>,
}

impl Decoder {
    pub fn new(outputs: Vec<DecoderOutput>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::InvalidSpace("decoder needs at least one output".into()));
        }
        Ok(Self { outputs })
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| DecoderOutput::Index(i)).collect())
    }

    /// `θ(z) = x_{min(z, |X|-1)}`: the identity where it fits.
    pub fn truncated_identity(z_size: usize, x_size: usize) -> Self {
        Self { outputs: (0..z_size).map(|z| DecoderOutput::Index(z.min(x_size - 1))).collect() }
    }

    pub fn z_size(&self) -> usize {
        self.outputs.len()
    }

    pub fn outputs(&self) -> &[DecoderOutput] {
        &self.outputs
    }

    /// Lexicographic id over `X^Z` (z = 0 most significant) when every
    /// output is a symbol index; `None` for real-valued outputs.
    pub fn id(&self, x_size: usize) -> Option<u64> {
        self.outputs.iter().try_fold(0u64, |acc, o| match o {
            DecoderOutput::Index(i) => acc.checked_mul(x_size as u64)?.checked_add(*i as u64),
            DecoderOutput::Point(_) => None,
        })
    }
}

/// Distortion `ℓ(x, x̂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distortion {
    /// `ℓ(x, x̂) = table[x][x̂]` over symbolic X.
    Table { table: Vec<Vec<f64>> },
    /// `ℓ(x, x̂) = ‖point(x) − x̂‖²` over X embedded in `R^d`.
    SquaredEuclidean { points: Vec<Vec<f64>> },
}

impl Distortion {
    pub fn zero_one(x_size: usize) -> Self {
        let table = (0..x_size)
            .map(|i| (0..x_size).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        Distortion::Table { table }
    }

    pub fn validate(&self, x_size: usize) -> Result<()> {
        match self {
            Distortion::Table { table } => {
                if table.len() != x_size || table.iter().any(|r| r.len() != x_size) {
                    return Err(Error::SpaceMismatch(format!(
                        "distortion table must be {x_size}x{x_size}"
                    )));
                }
                for (i, r) in table.iter().enumerate() {
                    if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(Error::InvalidConfig(format!("distortion row {i} has a negative entry")));
                    }
                    if r[i] != 0.0 {
                        return Err(Error::InvalidConfig(format!("distortion l(x{i}, x{i}) must be 0")));
                    }
                }
            }
            Distortion::SquaredEuclidean { points } => {
                if points.len() != x_size {
                    return Err(Error::SpaceMismatch(format!(
                        "{} embedding points for |X| = {x_size}",
                        points.len()
                    )));
                }
                let d = points.first().map_or(0, Vec::len);
                if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
                    return Err(Error::InvalidConfig("embedding points must share a dimension >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn x_size(&self) -> usize {
        match self {
            Distortion::Table { table } => table.len(),
            Distortion::SquaredEuclidean { points } => points.len(),
        }
    }

    /// `ℓ(x, out)`.
    pub fn eval(&self, x: usize, out: &DecoderOutput) -> Result<f64> {
        match (self, out) {
            (Distortion::Table { table }, DecoderOutput::Index(i)) => table
                .get(x)
                .and_then(|r| r.get(*i))
                .copied()
                .ok_or(Error::IndexOutOfRange { index: *i, len: table.len() }),
            (Distortion::Table { .. }, DecoderOutput::Point(_)) => Err(Error::SpaceMismatch(
                "real-valued decoder output needs an embedded distortion".into(),
            )),
            (Distortion::SquaredEuclidean { points }, out) => {
                let target = match out {
                    DecoderOutput::Index(i) => points
                        .get(*i)
                        .ok_or(Error::IndexOutOfRange { index: *i, len: points.len() })?,
                    DecoderOutput::Point(p) => p,
                };
                let px = &points[x];
                if target.len() != px.len() {
                    return Err(Error::SpaceMismatch("decoder point has the wrong dimension".into()));
                }
                Ok(px.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
            }
        }
    }

    pub fn max_value(&self) -> f64 {
        match self {
            Distortion::Table { table } => table.iter().flatten().copied().fold(0.0, f64::max),
            Distortion::SquaredEuclidean { points } => {
                let mut m: f64 = 0.0;
                for a in points {
                    for b in points {
                        m = m.max(a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum());
                    }
                }
                m
            }
        }
    }
}

/// Classifier `g: Z -> Y` as a lookup table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierTable {
    y_size: usize,
    assignment: Vec<usize>,
}

impl ClassifierTable {
    pub fn new(y_size: usize, assignment: Vec<usize>) -> Result<Self> {
        if let Some(&y) = assignment.iter().find(|&&y| y >= y_size) {
            return Err(Error::IndexOutOfRange { index: y, len: y_size });
        }
        Ok(Self { y_size, assignment })
    }

    pub fn predict(&self, z: usize) -> usize {
        self.assignment[z]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }
}

fn check_map(d: &FiniteDomainModel, f: &RepresentationMap) -> Result<()> {
    if d.x_space().size() != f.x_size() {
        return Err(Error::SpaceMismatch(format!(
            "domain has |X| = {} but the map expects {}",
            d.x_space().size(),
            f.x_size()
        )));
    }
    Ok(())
}

fn z_space(size: usize) -> FiniteSpace {
    FiniteSpace::indexed("z", size).expect("z space is non-empty")
}

/// `p(y, z) = Σ_x p(x) p(y | x) f(z | x)`, rows Y and columns Z.
pub fn pushforward_joint(d: &FiniteDomainModel, f: &RepresentationMap) -> Result<JointPmf> {
    check_map(d, f)?;
    let (ny, nz) = (d.y_space().size(), f.z_size());
    let mut probs = vec![0.0; ny * nz];
    for x in 0..f.x_size() {
        let px = d.px().get(x);
        if px == 0.0 {
            continue;
        }
        let labels = d.label_channel().row(x);
        for (z, &fz) in f.rows()[x].iter().enumerate() {
            if fz == 0.0 {
                continue;
            }
            for (y, &py) in labels.iter().enumerate() {
                probs[y * nz + z] += px * py * fz;
            }
        }
    }
    JointPmf::new(d.y_space().clone(), z_space(nz), probs)
}

/// `p(x, z) = p(x) f(z | x)`, rows X and columns Z.
pub fn xz_joint(d: &FiniteDomainModel, f: &RepresentationMap) -> Result<JointPmf> {
    check_map(d, f)?;
    let nz = f.z_size();
    let probs = (0..f.x_size())
        .flat_map(|x| {
            let px = d.px().get(x);
            f.rows()[x].iter().map(move |&fz| px * fz)
        })
        .collect();
    JointPmf::new(d.x_space().clone(), z_space(nz), probs)
}

/// `K(f) = D(p_u(Y, Z) || p_s(Y, Z))`.
pub fn domain_discrepancy(
    unseen: &FiniteDomainModel,
    seen: &FiniteDomainModel,
    f: &RepresentationMap,
    div: DivergenceKind,
) -> Result<f64> {
    let pu = pushforward_joint(unseen, f)?;
    let ps = pushforward_joint(seen, f)?;
    div.eval(&pu, &ps)
}

/// `R(f, θ) = Σ_x Σ_z p(x) f(z | x) ℓ(x, θ(z))` on the domain `d`.
pub fn reconstruction_loss(
    d: &FiniteDomainModel,
    f: &RepresentationMap,
    decoder: &Decoder,
    distortion: &Distortion,
) -> Result<f64> {
    check_map(d, f)?;
    if decoder.z_size() != f.z_size() {
        return Err(Error::SpaceMismatch(format!(
            "decoder covers {} codes but the map has {}",
            decoder.z_size(),
            f.z_size()
        )));
    }
    if distortion.x_size() != f.x_size() {
        return Err(Error::SpaceMismatch("distortion and map disagree on |X|".into()));
    }
    let mut r = 0.0;
    for x in 0..f.x_size() {
        let px = d.px().get(x);
        for (z, &fz) in f.rows()[x].iter().enumerate() {
            let w = px * fz;
            if w > 0.0 {
                r += w * distortion.eval(x, &decoder.outputs()[z])?;
            }
        }
    }
    Ok(r)
}

/// Maximum-likelihood classifier `g(z) = argmax_y p(y | z)`. Ties and
/// zero-mass codes go to the lowest label index.
pub fn bayes_classifier(joint_yz: &JointPmf) -> ClassifierTable {
    let (ny, nz) = (joint_yz.rows(), joint_yz.cols());
    let assignment = (0..nz)
        .map(|z| {
            let mut best = 0;
            for y in 1..ny {
                if joint_yz.get(y, z) > joint_yz.get(best, z) {
                    best = y;
                }
            }
            best
        })
        .collect();
    ClassifierTable { y_size: ny, assignment }
}

/// `Σ_z p(z) (1 − p(g(z) | z))`, the 0/1 risk of `g ∘ f` on `d`.
pub fn classification_risk(
    d: &FiniteDomainModel,
    f: &RepresentationMap,
    g: &ClassifierTable,
) -> Result<f64> {
    let j = pushforward_joint(d, f)?;
    if g.assignment.len() != j.cols() || g.y_size != j.rows() {
        return Err(Error::SpaceMismatch("classifier table does not match (Y, Z)".into()));
    }
    let mut risk = 0.0;
    for z in 0..j.cols() {
        for y in 0..j.rows() {
            if y != g.predict(z) {
                risk += j.get(y, z);
            }
        }
    }
    Ok(risk.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Counterexample {
    /// Marginals on Z agree, label conditionals are flipped.
    Example1,
    /// Label conditionals agree, marginals on Z are swapped.
    Example2,
}

/// A seen/unseen pair whose input space is the representation space itself,
/// so the encoder is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct CasePair {
    pub seen: FiniteDomainModel,
    pub unseen: FiniteDomainModel,
}

/// The two covariate/concept alignment counterexamples over `Z = {0, 1}`.
pub fn paper_case(which: Counterexample) -> CasePair {
    let build = |pz: [f64; 2], y_given_z: [[f64; 2]; 2]| {
        FiniteDomainModel::new(
            Pmf::new(z_space(2), pz.to_vec()).expect("tabulated pmf"),
            Channel::new(
                z_space(2),
                FiniteSpace::indexed("y", 2).expect("y space"),
                y_given_z.iter().map(|r| r.to_vec()).collect(),
            )
            .expect("tabulated channel"),
        )
        .expect("matching spaces")
    };
    match which {
        Counterexample::Example1 => CasePair {
            seen: build([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]]),
            unseen: build([0.5, 0.5], [[0.1, 0.9], [0.9, 0.1]]),
        },
        Counterexample::Example2 => CasePair {
            seen: build([0.9, 0.1], [[0.9, 0.1], [0.49, 0.51]]),
            unseen: build([0.1, 0.9], [[0.9, 0.1], [0.49, 0.51]]),
        },
    }
}

/// Risks of the seen-domain Bayes classifier for one counterexample, with
/// the information quantities behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: Counterexample,
    pub seen_risk: f64,
    pub unseen_risk: f64,
    pub i_seen_yz: f64,
    pub i_unseen_yz: f64,
    /// KL between the unseen and seen `(Y, Z)` joints.
    pub kl_joint: f64,
    /// KL between the `Z` marginals.
    pub kl_z_marginal: f64,
}

pub fn case_report(which: Counterexample) -> Result<CaseReport> {
    let pair = paper_case(which);
    let id = RepresentationMap::identity(2);
    let js = pushforward_joint(&pair.seen, &id)?;
    let ju = pushforward_joint(&pair.unseen, &id)?;
    let g = bayes_classifier(&js);
    Ok(CaseReport {
        case: which,
        seen_risk: classification_risk(&pair.seen, &id, &g)?,
        unseen_risk: classification_risk(&pair.unseen, &id, &g)?,
        i_seen_yz: mutual_information(&js),
        i_unseen_yz: mutual_information(&ju),
        kl_joint: kl_divergence(&ju, &js)?,
        kl_z_marginal: kl_divergence(&ju.marginal(Axis::Col), &js.marginal(Axis::Col))?,
    })
}

/// Expected `(seen, unseen)` risks of the two counterexamples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenRisks {
    pub example1: (f64, f64),
    pub example2: (f64, f64),
}

pub const GOLDEN_RISKS: GoldenRisks = GoldenRisks { example1: (0.1, 0.9), example2: (0.139, 0.451) };

impl GoldenRisks {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        let vals = [g.example1.0, g.example1.1, g.example2.0, g.example2.1];
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parse("golden risks must lie in [0, 1]".into()));
        }
        Ok(g)
    }

    pub fn expected(&self, which: Counterexample) -> (f64, f64) {
        match which {
            Counterexample::Example1 => self.example1,
            Counterexample::Example2 => self.example2,
        }
    }
}
