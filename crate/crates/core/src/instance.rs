//! JSON instance files for the finite-domain tools.
//!
//! ```json
//! {
//!   "name": "demo",
//!   "x_labels": ["a", "b", "c"],
//!   "y_labels": ["neg", "pos"],
//!   "z_size": 3,
//!   "unseen": { "px": [0.2, 0.5, 0.3], "channel": [[0.8, 0.2], [0.3, 0.7], [0.5, 0.5]] },
//!   "seen":   { "px": [0.4, 0.3, 0.3], "channel": [[0.6, 0.4], [0.1, 0.9], [0.7, 0.3]] },
//!   "distortion": { "kind": "zero_one" },
//!   "decoder": [0, 1, 2],
//!   "reconstruction_domain": "unseen"
//! }
//! ```
//!
//! `x_labels`/`y_labels` are optional (indexed names are generated).
//! `distortion` defaults to 0/1 and may also be
//! `{"kind": "table", "table": [[..]]}` or
//! `{"kind": "squared_euclidean", "points": [[..]]}`. `decoder` is the fixed
//! `θ` used for `T(γ)`; it defaults to the truncated identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontier::ReconDomain;
use crate::prob::{Channel, FiniteSpace, Pmf, ProbVector};
use crate::repmap::{Decoder, DecoderOutput, Distortion, FiniteDomainModel};

/// Largest `|X|`, `|Y|` or `|Z|` an instance file may declare.
pub const MAX_SPACE: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainFile {
    px: Vec<f64>,
    channel: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DistortionFile {
    ZeroOne,
    Table { table: Vec<Vec<f64>> },
    SquaredEuclidean { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    x_labels: Option<Vec<String>>,
    #[serde(default)]
    y_labels: Option<Vec<String>>,
    z_size: usize,
    unseen: DomainFile,
    seen: DomainFile,
    #[serde(default)]
    distortion: Option<DistortionFile>,
    #[serde(default)]
    decoder: Option<Vec<DecoderOutput>>,
    #[serde(default)]
    reconstruction_domain: ReconDomain,
}

/// A seen/unseen pair over shared finite spaces, with everything the
/// frontier tools need.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub name: String,
    pub unseen: FiniteDomainModel,
    pub seen: FiniteDomainModel,
    pub z_size: usize,
    pub distortion: Distortion,
    pub decoder: Decoder,
    pub reconstruction_domain: ReconDomain,
}

fn at(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Parse(format!("{path}: {e}"))
}

fn domain(
    path: &str,
    d: DomainFile,
    xs: &FiniteSpace,
    ys: &FiniteSpace,
) -> Result<FiniteDomainModel> {
    let px = Pmf::new(xs.clone(), d.px).map_err(at(&format!("{path}.px")))?;
    let ch = Channel::new(xs.clone(), ys.clone(), d.channel).map_err(at(&format!("{path}.channel")))?;
    FiniteDomainModel::new(px, ch).map_err(at(path))
}

impl Instance {
    /// Parse and validate an instance. Syntax errors carry line and column;
    /// semantic errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        Self::from_file(file)
    }

    fn from_file(file: InstanceFile) -> Result<Self> {
        let nx = file.unseen.px.len();
        let ny = file.unseen.channel.first().map_or(0, Vec::len);
        for (what, n) in [("|X|", nx), ("|Y|", ny), ("z_size", file.z_size)] {
            if n == 0 || n > MAX_SPACE {
                return Err(Error::Parse(format!("{what} = {n} must be in 1..={MAX_SPACE}")));
            }
        }
        let xs = match file.x_labels {
            Some(l) => FiniteSpace::new(l).map_err(at("x_labels"))?,
            None => FiniteSpace::indexed("x", nx).expect("nx >= 1"),
        };
        let ys = match file.y_labels {
            Some(l) => FiniteSpace::new(l).map_err(at("y_labels"))?,
            None => FiniteSpace::indexed("y", ny).expect("ny >= 1"),
        };
        let unseen = domain("unseen", file.unseen, &xs, &ys)?;
        let seen = domain("seen", file.seen, &xs, &ys)?;
        let distortion = match file.distortion.unwrap_or(DistortionFile::ZeroOne) {
            DistortionFile::ZeroOne => Distortion::zero_one(xs.size()),
            DistortionFile::Table { table } => Distortion::Table { table },
            DistortionFile::SquaredEuclidean { points } => Distortion::SquaredEuclidean { points },
        };
        distortion.validate(xs.size()).map_err(at("distortion"))?;
        let decoder = match file.decoder {
            Some(outputs) => {
                if outputs.len() != file.z_size {
                    return Err(Error::Parse(format!(
                        "decoder: {} outputs for z_size {}",
                        outputs.len(),
                        file.z_size
                    )));
                }
                for (z, o) in outputs.iter().enumerate() {
                    // Probe every output against x = 0 to catch bad indices or dimensions.
                    distortion.eval(0, o).map_err(at(&format!("decoder[{z}]")))?;
                }
                Decoder::new(outputs).map_err(at("decoder"))?
            }
            None => Decoder::truncated_identity(file.z_size, xs.size()),
        };
        Ok(Self {
            name: file.name.unwrap_or_else(|| "instance".into()),
            unseen,
            seen,
            z_size: file.z_size,
            distortion,
            decoder,
            reconstruction_domain: file.reconstruction_domain,
        })
    }

    pub fn x_size(&self) -> usize {
        self.unseen.x_space().size()
    }

    pub fn y_size(&self) -> usize {
        self.unseen.y_space().size()
    }

    pub fn to_json(&self) -> String {
        let dom = |d: &FiniteDomainModel| DomainFile {
            px: d.px().probs().to_vec(),
            channel: d.label_channel().rows().to_vec(),
        };
        let file = InstanceFile {
            name: Some(self.name.clone()),
            x_labels: Some(self.unseen.x_space().labels().to_vec()),
            y_labels: Some(self.unseen.y_space().labels().to_vec()),
            z_size: self.z_size,
            unseen: dom(&self.unseen),
            seen: dom(&self.seen),
            distortion: Some(match &self.distortion {
                Distortion::Table { table } => DistortionFile::Table { table: table.clone() },
                Distortion::SquaredEuclidean { points } => {
                    DistortionFile::SquaredEuclidean { points: points.clone() }
                }
            }),
            decoder: Some(self.decoder.outputs().to_vec()),
            reconstruction_domain: self.reconstruction_domain,
        };
        serde_json::to_string_pretty(&file).expect("instance serializes")
    }

    /// Random instance with strictly positive tables and 0/1 distortion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, x_size: usize, y_size: usize, z_size: usize) -> Self {
        let mut simplex = |n: usize| -> Vec<f64> {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        };
        let mut dom = || {
            let px = simplex(x_size);
            let ch = (0..x_size).map(|_| simplex(y_size)).collect();
            FiniteDomainModel::from_tables(px, ch).expect("random tables are valid")
        };
        let unseen = dom();
        let seen = dom();
        Self {
            name: "random".into(),
            unseen,
            seen,
            z_size,
            distortion: Distortion::zero_one(x_size),
            decoder: Decoder::truncated_identity(z_size, x_size),
            reconstruction_domain: ReconDomain::Unseen,
        }
    }
}

/// Instance files that ship with the crate, by name.
pub const SHIPPED: &[(&str, &str)] = &[
    ("demo", include_str!("../instances/demo.json")),
    ("identical", include_str!("../instances/identical.json")),
    ("covariate_shift", include_str!("../instances/covariate_shift.json")),
];

pub fn shipped(name: &str) -> Option<Instance> {
    SHIPPED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Instance::from_json(text).expect("shipped instances parse"))
}
