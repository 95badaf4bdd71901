//! Test-only oracles. Nothing here calls into the library's computation
//! paths: joints, information measures and searches are recomputed from raw
//! tables with plain nested loops.
#![allow(dead_code)]

use recalign::instance::Instance;
use recalign::prob::ProbVector;

pub const TOL_BUDGET: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RawDomain {
    pub px: Vec<f64>,
    pub ch: Vec<Vec<f64>>,
}

pub fn raw(inst: &Instance) -> (RawDomain, RawDomain) {
    let r = |d: &recalign::repmap::FiniteDomainModel| RawDomain {
        px: d.px().probs().to_vec(),
        ch: d.label_channel().rows().to_vec(),
    };
    (r(&inst.unseen), r(&inst.seen))
}

pub type Map = Vec<Vec<f64>>;

/// All stochastic rows over `nz` codes at step `1/res` (any order).
pub fn grid_rows(nz: usize, res: u32) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    match nz {
        1 => out.push(vec![1.0]),
        2 => {
            for a in 0..=res {
                out.push(vec![a as f64 / res as f64, (res - a) as f64 / res as f64]);
            }
        }
        3 => {
            for a in 0..=res {
                for b in 0..=(res - a) {
                    let c = res - a - b;
                    out.push(vec![a as f64 / res as f64, b as f64 / res as f64, c as f64 / res as f64]);
                }
            }
        }
        _ => panic!("oracle grid supports |Z| <= 3"),
    }
    out
}

/// Every map on three inputs built from `rows`, via three nested loops.
pub fn maps3(rows: &[Vec<f64>]) -> Vec<Map> {
    let mut out = Vec::new();
    for r0 in rows {
        for r1 in rows {
            for r2 in rows {
                out.push(vec![r0.clone(), r1.clone(), r2.clone()]);
            }
        }
    }
    out
}

pub fn det_rows(nz: usize) -> Vec<Vec<f64>> {
    (0..nz).map(|z| (0..nz).map(|k| if k == z { 1.0 } else { 0.0 }).collect()).collect()
}

/// `p(y, z)` as `[y][z]`.
pub fn joint_yz(d: &RawDomain, f: &Map) -> Vec<Vec<f64>> {
    let ny = d.ch[0].len();
    let nz = f[0].len();
    let mut j = vec![vec![0.0; nz]; ny];
    for x in 0..d.px.len() {
        for y in 0..ny {
            for z in 0..nz {
                j[y][z] += d.px[x] * d.ch[x][y] * f[x][z];
            }
        }
    }
    j
}

pub fn mi(j: &[Vec<f64>]) -> f64 {
    let ny = j.len();
    let nz = j[0].len();
    let mut py = vec![0.0; ny];
    let mut pz = vec![0.0; nz];
    for y in 0..ny {
        for z in 0..nz {
            py[y] += j[y][z];
            pz[z] += j[y][z];
        }
    }
    let mut s = 0.0;
    for y in 0..ny {
        for z in 0..nz {
            if j[y][z] > 0.0 {
                s += j[y][z] * (j[y][z] / (py[y] * pz[z])).log2();
            }
        }
    }
    s
}

/// KL in bits, `None` when `q` misses part of `p`'s support.
pub fn kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> Option<f64> {
    let mut s = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        for (&a, &b) in pr.iter().zip(qr) {
            if a > 0.0 {
                if b <= 0.0 {
                    return None;
                }
                s += a * (a / b).log2();
            }
        }
    }
    Some(s)
}

pub fn identity_map(n: usize) -> Map {
    det_rows(n)
}

pub fn i_yx(d: &RawDomain) -> f64 {
    mi(&joint_yz(d, &identity_map(d.px.len())))
}

/// 0/1 reconstruction loss with decoder `theta[z] = x̂`.
pub fn recon01(d: &RawDomain, f: &Map, theta: &[usize]) -> f64 {
    let mut r = 0.0;
    for x in 0..d.px.len() {
        for z in 0..f[0].len() {
            if theta[z] != x {
                r += d.px[x] * f[x][z];
            }
        }
    }
    r
}

/// Every decoder in `X^Z`.
pub fn all_decoders(nx: usize, nz: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..nz {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..nx).map(move |x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn oracle_w(u: &RawDomain, s: &RawDomain, maps: &[Map], eps: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in maps {
        let (ju, js) = (joint_yz(u, f), joint_yz(s, f));
        let Some(k) = kl(&ju, &js) else { continue };
        if k <= eps + TOL_BUDGET {
            let v = (mi(&ju) - mi(&js)).abs();
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    best
}

pub fn oracle_q(u: &RawDomain, maps: &[Map], gamma: f64) -> Option<f64> {
    let iyx = i_yx(u);
    let nx = u.px.len();
    let mut best: Option<f64> = None;
    for f in maps {
        for theta in all_decoders(nx, f[0].len()) {
            if recon01(u, f, &theta) <= gamma + TOL_BUDGET {
                let v = iyx - mi(&joint_yz(u, f));
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
    }
    best
}

pub fn oracle_t(u: &RawDomain, s: &RawDomain, maps: &[Map], theta: &[usize], gamma: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in maps {
        if recon01(u, f, theta) <= gamma + TOL_BUDGET {
            let k = kl(&joint_yz(u, f), &joint_yz(s, f)).unwrap_or(f64::INFINITY);
            best = Some(best.map_or(k, |b: f64| b.min(k)));
        }
    }
    best
}
