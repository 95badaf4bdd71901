//! Exact probability and information measures on finite spaces.
//!
//! Every quantity is in bits. The only place a logarithm base is chosen is
//! [`log2`]; `0 · log 0` is taken to be `0` throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sums within this distance of one are accepted as-is.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Sums further than [`NORMALIZATION_TOL`] but within this are renormalized;
/// anything beyond is rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;

#[inline]
pub fn log2(x: f64) -> f64 {
    x.log2()
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * log2(p)
    } else {
        0.0
    }
}

/// An ordered, finite set of named symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteSpace {
    labels: Vec<String>,
}

impl FiniteSpace {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidSpace("space must have at least one symbol".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// Space with labels `"{prefix}0"`, `"{prefix}1"`, ...
    pub fn indexed(prefix: &str, size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("{prefix}{i}")).collect())
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

fn check_and_normalize(mut probs: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidDistribution(format!("{what}: entry {i} is {p}")));
    }
    let sum: f64 = probs.iter().sum();
    let drift = (sum - 1.0).abs();
    if drift > RENORMALIZE_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: sums to {sum}")));
    }
    if drift > NORMALIZATION_TOL {
        probs.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(probs)
}

/// Anything that can be viewed as a flat probability vector with a shape.
pub trait ProbVector {
    fn probs(&self) -> &[f64];
    fn shape(&self) -> (usize, usize);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    space: FiniteSpace,
    probs: Vec<f64>,
}

impl Pmf {
    pub fn new(space: FiniteSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.size() {
            return Err(Error::SpaceMismatch(format!(
                "pmf has {} entries for a space of size {}",
                probs.len(),
                space.size()
            )));
        }
        let probs = check_and_normalize(probs, "pmf")?;
        Ok(Self { space, probs })
    }

    /// Pmf over an indexed space named `prefix`.
    pub fn from_probs(prefix: &str, probs: Vec<f64>) -> Result<Self> {
        Self::new(FiniteSpace::indexed(prefix, probs.len())?, probs)
    }

    pub fn uniform(space: FiniteSpace) -> Self {
        let n = space.size();
        Self { space, probs: vec![1.0 / n as f64; n] }
    }

    pub fn space(&self) -> &FiniteSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }
}

impl ProbVector for Pmf {
    fn probs(&self) -> &[f64] {
        &self.probs
    }
    fn shape(&self) -> (usize, usize) {
        (1, self.probs.len())
    }
}

/// Joint pmf stored row-major: `probs[r * cols + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPmf {
    row_space: FiniteSpace,
    col_space: FiniteSpace,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

impl JointPmf {
    pub fn new(row_space: FiniteSpace, col_space: FiniteSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != row_space.size() * col_space.size() {
            return Err(Error::SpaceMismatch(format!(
                "joint has {} entries for a {}x{} table",
                probs.len(),
                row_space.size(),
                col_space.size()
            )));
        }
        let probs = check_and_normalize(probs, "joint pmf")?;
        Ok(Self { row_space, col_space, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nc) {
            return Err(Error::InvalidDistribution("ragged joint table".into()));
        }
        Self::new(
            FiniteSpace::indexed("r", nr)?,
            FiniteSpace::indexed("c", nc)?,
            rows.concat(),
        )
    }

    /// Product joint `p(r) q(c)`.
    pub fn product(rows: &Pmf, cols: &Pmf) -> Self {
        let probs = rows
            .probs
            .iter()
            .flat_map(|&a| cols.probs.iter().map(move |&b| a * b))
            .collect();
        Self { row_space: rows.space.clone(), col_space: cols.space.clone(), probs }
    }

    pub fn row_space(&self) -> &FiniteSpace {
        &self.row_space
    }

    pub fn col_space(&self) -> &FiniteSpace {
        &self.col_space
    }

    pub fn rows(&self) -> usize {
        self.row_space.size()
    }

    pub fn cols(&self) -> usize {
        self.col_space.size()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.probs[r * self.cols() + c]
    }

    pub fn transpose(&self) -> Self {
        let (nr, nc) = (self.rows(), self.cols());
        let mut probs = vec![0.0; nr * nc];
        for r in 0..nr {
            for c in 0..nc {
                probs[c * nr + r] = self.probs[r * nc + c];
            }
        }
        Self { row_space: self.col_space.clone(), col_space: self.row_space.clone(), probs }
    }

    /// Marginal over `keep`, summing out the other axis.
    pub fn marginal(&self, keep: Axis) -> Pmf {
        let (nr, nc) = (self.rows(), self.cols());
        match keep {
            Axis::Row => Pmf {
                space: self.row_space.clone(),
                probs: (0..nr).map(|r| self.probs[r * nc..(r + 1) * nc].iter().sum()).collect(),
            },
            Axis::Col => Pmf {
                space: self.col_space.clone(),
                probs: (0..nc).map(|c| (0..nr).map(|r| self.probs[r * nc + c]).sum()).collect(),
            },
        }
    }

    /// Distribution of the other axis given `axis = index`.
    pub fn condition(&self, axis: Axis, index: usize) -> Result<Pmf> {
        let (nr, nc) = (self.rows(), self.cols());
        let (slice, space, name): (Vec<f64>, _, _) = match axis {
            Axis::Row => {
                if index >= nr {
                    return Err(Error::IndexOutOfRange { index, len: nr });
                }
                (self.probs[index * nc..(index + 1) * nc].to_vec(), &self.col_space, "row")
            }
            Axis::Col => {
                if index >= nc {
                    return Err(Error::IndexOutOfRange { index, len: nc });
                }
                ((0..nr).map(|r| self.probs[r * nc + index]).collect(), &self.row_space, "col")
            }
        };
        let mass: f64 = slice.iter().sum();
        if mass <= 0.0 {
            return Err(Error::ZeroMassCondition { axis: name, index });
        }
        Ok(Pmf { space: space.clone(), probs: slice.into_iter().map(|p| p / mass).collect() })
    }

    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::SpaceMismatch("mixing joints of different shape".into()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Ok(Self { row_space: self.row_space.clone(), col_space: self.col_space.clone(), probs })
    }
}

impl ProbVector for JointPmf {
    fn probs(&self) -> &[f64] {
        &self.probs
    }
    fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// Row-stochastic matrix `p(to | from)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    from_space: FiniteSpace,
    to_space: FiniteSpace,
    rows: Vec<Vec<f64>>,
}

impl Channel {
    pub fn new(from_space: FiniteSpace, to_space: FiniteSpace, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != from_space.size() {
            return Err(Error::SpaceMismatch(format!(
                "channel has {} rows for an input space of size {}",
                rows.len(),
                from_space.size()
            )));
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                if r.len() != to_space.size() {
                    return Err(Error::SpaceMismatch(format!(
                        "channel row {i} has {} entries, expected {}",
                        r.len(),
                        to_space.size()
                    )));
                }
                check_and_normalize(r, &format!("channel row {i}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { from_space, to_space, rows })
    }

    pub fn from_space(&self) -> &FiniteSpace {
        &self.from_space
    }

    pub fn to_space(&self) -> &FiniteSpace {
        &self.to_space
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Shannon entropy in bits.
pub fn entropy(p: &Pmf) -> f64 {
    entropy_of(&p.probs)
}

fn entropy_of(probs: &[f64]) -> f64 {
    // -0.0 + clamp keeps a point mass at exactly +0.
    (-probs.iter().map(|&p| plogp(p)).sum::<f64>()).max(0.0)
}

pub fn joint_entropy(j: &JointPmf) -> f64 {
    entropy_of(&j.probs)
}

/// `H(row | col) = Σ_c p(c) H(row | col = c)`.
pub fn conditional_entropy(j: &JointPmf) -> f64 {
    let (nr, nc) = (j.rows(), j.cols());
    let mut h = 0.0;
    for c in 0..nc {
        let pc: f64 = (0..nr).map(|r| j.probs[r * nc + c]).sum();
        if pc <= 0.0 {
            continue;
        }
        for r in 0..nr {
            let p = j.probs[r * nc + c];
            if p > 0.0 {
                h -= p * log2(p / pc);
            }
        }
    }
    h.max(0.0)
}

/// `I(row; col) = H(row) - H(row | col)`, clamped at zero against rounding.
pub fn mutual_information(j: &JointPmf) -> f64 {
    let (nr, nc) = (j.rows(), j.cols());
    let pr = j.marginal(Axis::Row);
    let pc = j.marginal(Axis::Col);
    let mut i = 0.0;
    for r in 0..nr {
        for c in 0..nc {
            let p = j.probs[r * nc + c];
            if p > 0.0 {
                i += p * log2(p / (pr.probs[r] * pc.probs[c]));
            }
        }
    }
    i.max(0.0)
}

fn check_shapes<P: ProbVector>(p: &P, q: &P) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(Error::SpaceMismatch(format!(
            "divergence between shapes {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok(())
}

fn kl_of(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut d = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::SupportViolation { index: i, p_val: a });
            }
            d += a * log2(a / b);
        }
    }
    Ok(d.max(0.0))
}

/// `KL(p || q)` in bits. A `p`-support point with `q = 0` is an error, not `+∞`.
pub fn kl_divergence<P: ProbVector>(p: &P, q: &P) -> Result<f64> {
    check_shapes(p, q)?;
    kl_of(p.probs(), q.probs())
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn js_divergence<P: ProbVector>(p: &P, q: &P) -> Result<f64> {
    check_shapes(p, q)?;
    let m: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| 0.5 * (a + b)).collect();
    // m covers both supports, so neither term can fail.
    let d = 0.5 * kl_of(p.probs(), &m)? + 0.5 * kl_of(q.probs(), &m)?;
    Ok(d.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    #[default]
    Kl,
    Js,
}

impl DivergenceKind {
    pub fn eval<P: ProbVector>(self, p: &P, q: &P) -> Result<f64> {
        match self {
            DivergenceKind::Kl => kl_divergence(p, q),
            DivergenceKind::Js => js_divergence(p, q),
        }
    }
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Self::Kl),
            "js" => Ok(Self::Js),
            other => Err(Error::Parse(format!("unknown divergence {other:?} (expected kl or js)"))),
        }
    }
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Js => "js",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pmf(p: &[f64]) -> Pmf {
        Pmf::from_probs("s", p.to_vec()).unwrap()
    }

    fn example1_seen() -> JointPmf {
        // rows Y, cols Z
        JointPmf::from_rows(&[vec![0.45, 0.05], vec![0.05, 0.45]]).unwrap()
    }

    fn example1_unseen() -> JointPmf {
        JointPmf::from_rows(&[vec![0.05, 0.45], vec![0.45, 0.05]]).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&pmf(&[0.5, 0.5])) - 1.0).abs() < 1e-15);
        assert_eq!(entropy(&pmf(&[1.0, 0.0, 0.0])), 0.0);
        assert!((entropy(&pmf(&[0.9, 0.1])) - 0.468996).abs() < 1e-6);
    }

    #[test]
    fn conditional_entropy_values() {
        let indep = JointPmf::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap();
        assert!((conditional_entropy(&indep) - 1.0).abs() < 1e-15);
        let diag = JointPmf::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(conditional_entropy(&diag), 0.0);
        assert!((conditional_entropy(&example1_seen()) - 0.468996).abs() < 1e-6);
    }

    #[test]
    fn mutual_information_values() {
        let indep = JointPmf::product(&pmf(&[0.3, 0.7]), &pmf(&[0.6, 0.4]));
        assert!(mutual_information(&indep).abs() < 1e-15);
        let diag = JointPmf::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((mutual_information(&diag) - 1.0).abs() < 1e-15);
        assert!((mutual_information(&example1_seen()) - 0.531004).abs() < 1e-6);
    }

    #[test]
    fn kl_values() {
        let p = example1_seen();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let d = kl_divergence(&example1_unseen(), &example1_seen()).unwrap();
        assert!((d - 2.535940).abs() < 1e-6);
        assert!((d - 0.8 * 9f64.log2()).abs() < 1e-12);
        assert!((kl_divergence(&pmf(&[1.0, 0.0]), &pmf(&[0.5, 0.5])).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_support_violation_is_an_error() {
        let err = kl_divergence(&pmf(&[0.5, 0.5]), &pmf(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::SupportViolation { index: 1, .. }));
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(matches!(
            kl_divergence(&pmf(&[0.5, 0.5]), &pmf(&[0.2, 0.3, 0.5])),
            Err(Error::SpaceMismatch(_))
        ));
    }

    #[test]
    fn js_values() {
        let p = pmf(&[0.9, 0.1]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!((js_divergence(&pmf(&[1.0, 0.0]), &pmf(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!((js_divergence(&p, &pmf(&[0.1, 0.9])).unwrap() - 0.531004).abs() < 1e-6);
    }

    #[test]
    fn marginals_and_conditions() {
        let diag = JointPmf::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(diag.marginal(Axis::Row).probs(), &[0.5, 0.5]);
        let lopsided = JointPmf::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.0]]).unwrap();
        assert!(matches!(
            lopsided.condition(Axis::Col, 1),
            Err(Error::ZeroMassCondition { axis: "col", index: 1 })
        ));
        let c = lopsided.condition(Axis::Col, 0).unwrap();
        assert_eq!(c.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn example2_seen_marginal_over_z() {
        // p(Y,Z) with p(Z) = (0.9, 0.1), p(Y=0|Z=0) = 0.9, p(Y=0|Z=1) = 0.49
        let j = JointPmf::from_rows(&[vec![0.81, 0.049], vec![0.09, 0.051]]).unwrap();
        let pz = j.marginal(Axis::Col);
        assert!((pz.get(0) - 0.9).abs() < 1e-15);
        assert!((pz.get(1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn construction_tolerances() {
        assert!(Pmf::from_probs("s", vec![0.5, 0.5 + 5e-10]).is_ok());
        assert!(matches!(
            Pmf::from_probs("s", vec![0.5, 0.5 + 1e-8]),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(Pmf::from_probs("s", vec![1.5, -0.5]).is_err());
        let renorm = Pmf::from_probs("s", vec![0.5, 0.5 + 5e-10]).unwrap();
        assert!((renorm.probs().iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOL);
        assert!(FiniteSpace::new(vec![]).is_err());
        assert!(FiniteSpace::new(vec!["a".into(), "a".into()]).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn joint(nr: usize, nc: usize) -> impl Strategy<Value = JointPmf> {
        simplex(nr * nc).prop_map(move |v| {
            JointPmf::new(
                FiniteSpace::indexed("r", nr).unwrap(),
                FiniteSpace::indexed("c", nc).unwrap(),
                v,
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn mi_entropy_identity(j in joint(3, 4)) {
            let lhs = mutual_information(&j);
            let rhs = entropy(&j.marginal(Axis::Row)) + entropy(&j.marginal(Axis::Col)) - joint_entropy(&j);
            prop_assert!((lhs - rhs).abs() < 1e-10);
            prop_assert!((lhs - mutual_information(&j.transpose())).abs() < 1e-12);
            let hc = conditional_entropy(&j);
            prop_assert!(hc >= 0.0 && hc <= entropy(&j.marginal(Axis::Row)) + 1e-12);
        }

        #[test]
        fn kl_nonnegative_and_zero_on_equality(p in simplex(5), q in simplex(5)) {
            let (p, q) = (pmf(&p), pmf(&q));
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            if p.probs().iter().zip(q.probs()).any(|(a, b)| (a - b).abs() > 1e-3) {
                prop_assert!(kl_divergence(&p, &q).unwrap() > 0.0);
            }
            let js = js_divergence(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&js));
            prop_assert!((js - js_divergence(&q, &p).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn kl_jointly_convex(p1 in joint(2, 3), p2 in joint(2, 3), q1 in joint(2, 3), q2 in joint(2, 3), lambda in 0.0f64..=1.0) {
            let lhs = kl_divergence(&p1.mix(&p2, lambda).unwrap(), &q1.mix(&q2, lambda).unwrap()).unwrap();
            let rhs = lambda * kl_divergence(&p1, &q1).unwrap() + (1.0 - lambda) * kl_divergence(&p2, &q2).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }
    }
}
