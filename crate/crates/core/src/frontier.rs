//! Exhaustive search over encoders for `W(ε)`, `Q(γ)` and the
//! reconstruction-alignment function `T(γ)`, plus the two bound/shape checks
//! built on them.
//!
//! The encoder search space is either every deterministic map `X -> Z` or
//! every stochastic map whose rows lie on the `1/resolution` simplex grid.
//! Maps carry stable ids; every scan evaluates maps in parallel, collects the
//! per-map results in id order and reduces serially, so results do not depend
//! on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{mutual_information, DivergenceKind};
use crate::repmap::{
    domain_discrepancy, pushforward_joint, reconstruction_loss, Decoder, DecoderOutput, Distortion,
    FiniteDomainModel, RepresentationMap,
};

pub const DEFAULT_SEARCH_CAP: u64 = 1_000_000;

/// Budget comparisons use `value <= budget + FEASIBILITY_TOL`.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Largest allowed Prop.-1 style slack violation.
pub const SLACK_TOL: f64 = 1e-9;

/// Largest allowed monotonicity violation of a computed `T(γ)` curve.
pub const MONOTONE_TOL: f64 = 1e-9;

/// A finite family of encoders with stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSource {
    x_size: usize,
    z_size: usize,
    /// `None` for deterministic maps.
    resolution: Option<u32>,
    rows: Vec<Vec<f64>>,
    count: u64,
}

/// Compositions of `total` into `parts` nonnegative integers, ordered so
/// that mass sits as early as possible first: `(r,0,..)`, `(r-1,1,0,..)`, ...
fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    fn rec(total: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=total).rev() {
            prefix.push(first);
            rec(total - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

impl MapSource {
    pub fn deterministic(x_size: usize, z_size: usize, cap: u64) -> Result<Self> {
        let rows = (0..z_size)
            .map(|z| {
                let mut r = vec![0.0; z_size];
                r[z] = 1.0;
                r
            })
            .collect();
        Self::build(x_size, z_size, None, rows, cap)
    }

    pub fn stochastic_grid(x_size: usize, z_size: usize, resolution: u32, cap: u64) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidConfig("simplex resolution must be >= 1".into()));
        }
        if z_size == 0 {
            return Err(Error::InvalidSpace("|Z| must be >= 1".into()));
        }
        // Bound the row count before materializing the grid.
        let row_count = binomial(resolution as u128 + z_size as u128 - 1, z_size as u128 - 1);
        if row_count > cap as u128 {
            return Err(Error::SearchSpaceTooLarge { count: row_count, cap });
        }
        let rows = compositions(resolution, z_size)
            .into_iter()
            .map(|c| {
                let mut r: Vec<f64> = c.iter().map(|&k| k as f64 / resolution as f64).collect();
                // Exact unit sum: put the rounding residue on the largest entry.
                let (imax, _) = c.iter().enumerate().max_by_key(|(i, k)| (**k, usize::MAX - i)).unwrap();
                let others: f64 = r.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, v)| v).sum();
                r[imax] = 1.0 - others;
                r
            })
            .collect();
        Self::build(x_size, z_size, Some(resolution), rows, cap)
    }

    fn build(x_size: usize, z_size: usize, resolution: Option<u32>, rows: Vec<Vec<f64>>, cap: u64) -> Result<Self> {
        if x_size == 0 || z_size == 0 {
            return Err(Error::InvalidSpace("|X| and |Z| must be >= 1".into()));
        }
        let n = rows.len() as u128;
        let count = (0..x_size).try_fold(1u128, |acc, _| acc.checked_mul(n)).unwrap_or(u128::MAX);
        if count > cap as u128 {
            return Err(Error::SearchSpaceTooLarge { count, cap });
        }
        Ok(Self { x_size, z_size, resolution, rows, count: count as u64 })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn z_size(&self) -> usize {
        self.z_size
    }

    pub fn resolution(&self) -> Option<u32> {
        self.resolution
    }

    /// Row indices of map `id`, input symbol 0 most significant.
    fn digits(&self, mut id: u64) -> Vec<usize> {
        let base = self.rows.len() as u64;
        let mut d = vec![0usize; self.x_size];
        for slot in d.iter_mut().rev() {
            *slot = (id % base) as usize;
            id /= base;
        }
        d
    }

    pub fn map(&self, id: u64) -> RepresentationMap {
        assert!(id < self.count, "map id {id} out of range");
        let rows = self.digits(id).into_iter().map(|i| self.rows[i].clone()).collect();
        RepresentationMap::new(self.z_size, rows, id).expect("grid rows are stochastic")
    }

    pub fn iter(&self) -> impl Iterator<Item = RepresentationMap> + '_ {
        (0..self.count).map(|id| self.map(id))
    }

    /// Evaluate `f` on every map, in parallel, returning results in id order.
    pub fn scan<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&RepresentationMap) -> T + Sync + Send,
    {
        (0..self.count).into_par_iter().map(|id| f(&self.map(id))).collect()
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k.min(n));
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

/// Every deterministic map `X -> Z`, in lexicographic id order.
pub fn enumerate_deterministic_maps(x_size: usize, z_size: usize, cap: u64) -> Result<Vec<RepresentationMap>> {
    Ok(MapSource::deterministic(x_size, z_size, cap)?.iter().collect())
}

/// Every map whose rows lie on the `1/resolution` simplex grid.
pub fn stochastic_map_grid(x_size: usize, z_size: usize, resolution: u32, cap: u64) -> Result<Vec<RepresentationMap>> {
    Ok(MapSource::stochastic_grid(x_size, z_size, resolution, cap)?.iter().collect())
}

/// Which domain the reconstruction loss is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconDomain {
    #[default]
    Unseen,
    Seen,
}

impl ReconDomain {
    pub fn pick<'a>(self, unseen: &'a FiniteDomainModel, seen: &'a FiniteDomainModel) -> &'a FiniteDomainModel {
        match self {
            ReconDomain::Unseen => unseen,
            ReconDomain::Seen => seen,
        }
    }
}

/// Per-`z` minimizer of `Σ_x p(x) f(z|x) ℓ(x, ·)`, i.e. the decoder with the
/// smallest reconstruction loss for `f`.
///
/// Symbolic distortions pick the best symbol (ties to the lowest index);
/// squared-Euclidean picks the conditional mean. Codes that `f` never
/// produces decode to symbol 0.
pub fn best_response_decoder(d: &FiniteDomainModel, f: &RepresentationMap, distortion: &Distortion) -> Result<Decoder> {
    if d.x_space().size() != f.x_size() || distortion.x_size() != f.x_size() {
        return Err(Error::SpaceMismatch("domain, map and distortion disagree on |X|".into()));
    }
    let nx = f.x_size();
    let mut outputs = Vec::with_capacity(f.z_size());
    for z in 0..f.z_size() {
        let w: Vec<f64> = (0..nx).map(|x| d.px().get(x) * f.prob(x, z)).collect();
        let mass: f64 = w.iter().sum();
        if mass <= 0.0 {
            outputs.push(DecoderOutput::Index(0));
            continue;
        }
        let out = match distortion {
            Distortion::Table { table } => {
                let mut best = 0;
                let mut best_cost = f64::INFINITY;
                for cand in 0..nx {
                    let cost: f64 = (0..nx).map(|x| w[x] * table[x][cand]).sum();
                    if cost < best_cost {
                        best_cost = cost;
                        best = cand;
                    }
                }
                DecoderOutput::Index(best)
            }
            Distortion::SquaredEuclidean { points } => {
                let dim = points[0].len();
                let mut c = vec![0.0; dim];
                for (x, p) in points.iter().enumerate() {
                    for (ci, pi) in c.iter_mut().zip(p) {
                        *ci += w[x] * pi;
                    }
                }
                c.iter_mut().for_each(|v| *v /= mass);
                DecoderOutput::Point(c)
            }
        };
        outputs.push(out);
    }
    Decoder::new(outputs)
}

/// Everything the W/Q searches need about one map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStats {
    pub id: u64,
    /// `K(f)`; `+∞` when the KL support condition fails.
    pub k: f64,
    pub i_unseen: f64,
    pub i_seen: f64,
    /// `min_θ R(f, θ)` on the reconstruction domain.
    pub r_best: f64,
}

fn discrepancy_or_inf(unseen: &FiniteDomainModel, seen: &FiniteDomainModel, f: &RepresentationMap, div: DivergenceKind) -> Result<f64> {
    match domain_discrepancy(unseen, seen, f, div) {
        Ok(k) => Ok(k),
        Err(Error::SupportViolation { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn within(value: f64, budget: f64) -> bool {
    value <= budget + FEASIBILITY_TOL
}

/// Per-map statistics over a whole search space, reusable across many
/// budget queries.
#[derive(Debug, Clone)]
pub struct MapTable {
    stats: Vec<MapStats>,
    i_unseen_yx: f64,
}

impl MapTable {
    pub fn build(
        unseen: &FiniteDomainModel,
        seen: &FiniteDomainModel,
        search: &MapSource,
        div: DivergenceKind,
        distortion: &Distortion,
        recon: ReconDomain,
    ) -> Result<Self> {
        check_pair(unseen, seen, search)?;
        distortion.validate(search.x_size())?;
        let rd = recon.pick(unseen, seen);
        let stats = search
            .scan(|f| -> Result<MapStats> {
                let theta = best_response_decoder(rd, f, distortion)?;
                Ok(MapStats {
                    id: f.id(),
                    k: discrepancy_or_inf(unseen, seen, f, div)?,
                    i_unseen: mutual_information(&pushforward_joint(unseen, f)?),
                    i_seen: mutual_information(&pushforward_joint(seen, f)?),
                    r_best: reconstruction_loss(rd, f, &theta, distortion)?,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stats, i_unseen_yx: mutual_information(&unseen.yx_joint()) })
    }

    pub fn stats(&self) -> &[MapStats] {
        &self.stats
    }

    /// `I_u(Y; X)`.
    pub fn i_unseen_yx(&self) -> f64 {
        self.i_unseen_yx
    }

    /// `W(ε) = max_{K(f) ≤ ε} |I_u(Y;Z) − I_s(Y;Z)|`.
    pub fn w(&self, eps: f64) -> Result<f64> {
        if !(eps >= 0.0) {
            return Err(Error::InvalidConfig(format!("discrepancy budget must be >= 0, got {eps}")));
        }
        self.stats
            .iter()
            .filter(|s| within(s.k, eps))
            .map(|s| (s.i_unseen - s.i_seen).abs())
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(Error::NoFeasibleMap { budget: eps })
    }

    /// `Q(γ) = max_{R(f,θ) ≤ γ} I_u(Y;X) − I_u(Y;Z)`.
    ///
    /// The objective does not involve `θ`, so a map is feasible iff its
    /// best-response decoder meets the budget.
    pub fn q(&self, gamma: f64) -> Result<f64> {
        if !(gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("reconstruction budget must be >= 0, got {gamma}")));
        }
        self.stats
            .iter()
            .filter(|s| within(s.r_best, gamma))
            .map(|s| self.i_unseen_yx - s.i_unseen)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(Error::NoFeasibleMap { budget: gamma })
    }
}

fn check_pair(unseen: &FiniteDomainModel, seen: &FiniteDomainModel, search: &MapSource) -> Result<()> {
    if unseen.x_space().size() != seen.x_space().size() || unseen.y_space().size() != seen.y_space().size() {
        return Err(Error::SpaceMismatch("seen and unseen domains must share X and Y".into()));
    }
    if unseen.x_space().size() != search.x_size() {
        return Err(Error::SpaceMismatch(format!(
            "search space maps |X| = {} but the domains have {}",
            search.x_size(),
            unseen.x_space().size()
        )));
    }
    Ok(())
}

/// `W(ε)` over the given search space.
pub fn compute_w(
    unseen: &FiniteDomainModel,
    seen: &FiniteDomainModel,
    eps: f64,
    search: &MapSource,
    div: DivergenceKind,
) -> Result<f64> {
    check_pair(unseen, seen, search)?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidConfig(format!("discrepancy budget must be >= 0, got {eps}")));
    }
    let found = search
        .scan(|f| -> Result<Option<f64>> {
            if !within(discrepancy_or_inf(unseen, seen, f, div)?, eps) {
                return Ok(None);
            }
            let iu = mutual_information(&pushforward_joint(unseen, f)?);
            let is = mutual_information(&pushforward_joint(seen, f)?);
            Ok(Some((iu - is).abs()))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    found
        .into_iter()
        .flatten()
        .reduce(f64::max)
        .ok_or(Error::NoFeasibleMap { budget: eps })
}

/// `Q(γ)` on `d` over the given search space, each map paired with its
/// best-response decoder.
pub fn compute_q(d: &FiniteDomainModel, gamma: f64, search: &MapSource, distortion: &Distortion) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig(format!("reconstruction budget must be >= 0, got {gamma}")));
    }
    if d.x_space().size() != search.x_size() {
        return Err(Error::SpaceMismatch("search space and domain disagree on |X|".into()));
    }
    distortion.validate(search.x_size())?;
    let iyx = mutual_information(&d.yx_joint());
    let found = search
        .scan(|f| -> Result<Option<f64>> {
            let theta = best_response_decoder(d, f, distortion)?;
            if !within(reconstruction_loss(d, f, &theta, distortion)?, gamma) {
                return Ok(None);
            }
            Ok(Some(iyx - mutual_information(&pushforward_joint(d, f)?)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    found
        .into_iter()
        .flatten()
        .reduce(f64::max)
        .ok_or(Error::NoFeasibleMap { budget: gamma })
}

/// One sample of `T(γ)`. `k_min` and `map_id` are `None` when no searched
/// map meets the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub gamma: f64,
    pub k_min: Option<f64>,
    pub map_id: Option<u64>,
    pub decoder_id: Option<u64>,
}

impl FrontierPoint {
    pub fn feasible(&self) -> bool {
        self.k_min.is_some()
    }
}

/// `T(γ) = min { K(f) : R(f, θ) ≤ γ }` for a fixed decoder, at each grid
/// value. Reconstruction is measured on the unseen domain.
#[allow(clippy::too_many_arguments)]
pub fn trade_off_curve(
    unseen: &FiniteDomainModel,
    seen: &FiniteDomainModel,
    decoder: &Decoder,
    distortion: &Distortion,
    gamma_grid: &[f64],
    search: &MapSource,
    div: DivergenceKind,
) -> Result<Vec<FrontierPoint>> {
    trade_off_curve_on(unseen, seen, decoder, distortion, gamma_grid, search, div, ReconDomain::Unseen)
}

#[allow(clippy::too_many_arguments)]
pub fn trade_off_curve_on(
    unseen: &FiniteDomainModel,
    seen: &FiniteDomainModel,
    decoder: &Decoder,
    distortion: &Distortion,
    gamma_grid: &[f64],
    search: &MapSource,
    div: DivergenceKind,
    recon: ReconDomain,
) -> Result<Vec<FrontierPoint>> {
    check_pair(unseen, seen, search)?;
    distortion.validate(search.x_size())?;
    if gamma_grid.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
        return Err(Error::InvalidConfig("gamma grid values must be finite and >= 0".into()));
    }
    if gamma_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("gamma grid must be sorted ascending".into()));
    }
    let rd = recon.pick(unseen, seen);
    let pairs = search
        .scan(|f| -> Result<(f64, f64)> {
            Ok((reconstruction_loss(rd, f, decoder, distortion)?, discrepancy_or_inf(unseen, seen, f, div)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let decoder_id = decoder.id(search.x_size());
    Ok(gamma_grid
        .iter()
        .map(|&gamma| {
            let mut best: Option<(u64, f64)> = None;
            for (id, &(r, k)) in pairs.iter().enumerate() {
                if within(r, gamma) && best.is_none_or(|(_, bk)| k < bk) {
                    best = Some((id as u64, k));
                }
            }
            FrontierPoint { gamma, k_min: best.map(|b| b.1), map_id: best.map(|b| b.0), decoder_id }
        })
        .collect())
}

/// Every quantity in the two-term lower bound on `I_u(Y; Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub map_id: u64,
    pub i_u_yz: f64,
    pub i_s_yz: f64,
    pub i_u_yx: f64,
    /// `K(f)`; serialized as `null` when infinite.
    pub k_f: f64,
    pub w_of_k: f64,
    pub q_of_r: f64,
    pub r_f_theta: f64,
    /// `I_u(Y;Z) − (I_s(Y;Z) − W(K(f)))`
    pub slack_1: f64,
    /// `I_u(Y;Z) − (I_u(Y;X) − Q(R(f,θ)))`
    pub slack_2: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.slack_1 >= -SLACK_TOL && self.slack_2 >= -SLACK_TOL
    }

    /// The tighter of the two lower bounds on `I_u(Y; Z)`.
    pub fn lower_bound(&self) -> f64 {
        (self.i_s_yz - self.w_of_k).max(self.i_u_yx - self.q_of_r)
    }
}

/// Evaluate both lower bounds for one `(f, θ)`, with `W` and `Q` computed
/// over `search`.
#[allow(clippy::too_many_arguments)]
pub fn verify_prop1(
    unseen: &FiniteDomainModel,
    seen: &FiniteDomainModel,
    f: &RepresentationMap,
    decoder: &Decoder,
    distortion: &Distortion,
    div: DivergenceKind,
    search: &MapSource,
) -> Result<BoundReport> {
    let table = MapTable::build(unseen, seen, search, div, distortion, ReconDomain::Unseen)?;
    bound_report(&table, unseen, seen, f, decoder, distortion, div)
}

/// [`verify_prop1`] against a prebuilt table.
pub fn bound_report(
    table: &MapTable,
    unseen: &FiniteDomainModel,
    seen: &FiniteDomainModel,
    f: &RepresentationMap,
    decoder: &Decoder,
    distortion: &Distortion,
    div: DivergenceKind,
) -> Result<BoundReport> {
    let i_u_yz = mutual_information(&pushforward_joint(unseen, f)?);
    let i_s_yz = mutual_information(&pushforward_joint(seen, f)?);
    let i_u_yx = table.i_unseen_yx();
    let k_f = discrepancy_or_inf(unseen, seen, f, div)?;
    let r_f_theta = reconstruction_loss(unseen, f, decoder, distortion)?;
    let w_of_k = table.w(k_f)?;
    let q_of_r = table.q(r_f_theta)?;
    Ok(BoundReport {
        map_id: f.id(),
        i_u_yz,
        i_s_yz,
        i_u_yx,
        k_f,
        w_of_k,
        q_of_r,
        r_f_theta,
        slack_1: i_u_yz - (i_s_yz - w_of_k),
        slack_2: i_u_yz - (i_u_yx - q_of_r),
    })
}

/// Bound reports for every map in `search`, each paired with its own
/// best-response decoder.
pub fn verify_prop1_all(
    unseen: &FiniteDomainModel,
    seen: &FiniteDomainModel,
    distortion: &Distortion,
    div: DivergenceKind,
    search: &MapSource,
) -> Result<Vec<BoundReport>> {
    let table = MapTable::build(unseen, seen, search, div, distortion, ReconDomain::Unseen)?;
    search
        .scan(|f| -> Result<BoundReport> {
            let theta = best_response_decoder(unseen, f, distortion)?;
            bound_report(&table, unseen, seen, f, &theta, distortion, div)
        })
        .into_iter()
        .collect()
}

/// Shape diagnostics of a computed `T(γ)` curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub feasible_points: usize,
    /// `max_i max(0, T(γ_{i+1}) − T(γ_i))`.
    pub max_monotonicity_violation: f64,
    /// Largest amount by which a point lies above the chord of its two
    /// neighbours.
    pub max_convexity_violation: f64,
    pub convexity_tolerance: f64,
    pub monotone: bool,
    pub convex: bool,
}

impl ShapeReport {
    pub fn passes(&self) -> bool {
        self.monotone && self.convex
    }
}

/// Tolerance for grid curves: `1e-6` plus the K-range of the curve divided
/// by the simplex resolution. Deterministic-only curves (`None`) get no
/// convexity tolerance bound, since step functions are exempt.
pub fn default_convexity_tolerance(curve: &[FrontierPoint], resolution: Option<u32>) -> f64 {
    let ks: Vec<f64> = curve.iter().filter_map(|p| p.k_min).filter(|k| k.is_finite()).collect();
    match resolution {
        None => f64::INFINITY,
        Some(r) => {
            let range = ks.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - ks.iter().copied().fold(f64::INFINITY, f64::min);
            1e-6 + if range.is_finite() { range / r as f64 } else { 0.0 }
        }
    }
}

/// Monotonicity and midpoint-convexity of `T(γ)` over its feasible, finite
/// points.
pub fn verify_prop2(curve: &[FrontierPoint], convexity_tolerance: f64) -> Result<ShapeReport> {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter_map(|p| p.k_min.filter(|k| k.is_finite()).map(|k| (p.gamma, k)))
        .collect();
    if pts.len() < 3 {
        return Err(Error::CurveTooShort { feasible: pts.len() });
    }
    let mono = pts.windows(2).map(|w| (w[1].1 - w[0].1).max(0.0)).fold(0.0, f64::max);
    let convex = pts
        .windows(3)
        .map(|w| {
            let ((g0, t0), (g1, t1), (g2, t2)) = (w[0], w[1], w[2]);
            if g2 <= g0 {
                return 0.0;
            }
            let chord = ((g2 - g1) * t0 + (g1 - g0) * t2) / (g2 - g0);
            (t1 - chord).max(0.0)
        })
        .fold(0.0, f64::max);
    Ok(ShapeReport {
        feasible_points: pts.len(),
        max_monotonicity_violation: mono,
        max_convexity_violation: convex,
        convexity_tolerance,
        monotone: mono <= MONOTONE_TOL,
        convex: convex <= convexity_tolerance,
    })
}

/// Evenly spaced budgets, parsed from `start:stop:count`.
pub fn parse_gamma_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("gamma grid {spec:?} is not start:stop:count")));
    }
    let num = |s: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("gamma grid value {s:?}: {e}")))
    };
    let (a, b) = (num(parts[0])?, num(parts[1])?);
    let n: usize = parts[2]
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("gamma grid count {:?}: {e}", parts[2])))?;
    if !a.is_finite() || !b.is_finite() || a < 0.0 || b < a {
        return Err(Error::Parse(format!("gamma grid needs 0 <= start <= stop, got {a}:{b}")));
    }
    match n {
        0 => Err(Error::Parse("gamma grid count must be >= 1".into())),
        1 => Ok(vec![a]),
        _ if n > 100_000 => Err(Error::Parse(format!("gamma grid count {n} exceeds 100000"))),
        _ => Ok((0..n).map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()),
    }
}
