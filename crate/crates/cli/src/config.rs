//! Experiment configuration files.
//!
//! The format is flat `key = value` text with dotted sections and `#`
//! comments:
//!
//! ```text
//! fl.k_m = 5
//! agg.kind = gas
//! agg.base = bulyan
//! agg.p = 100
//! attack.kind = hybrid_sparse
//! mask.method = random-layer
//! ```
//!
//! Every key is optional. Keys that the chosen kinds do not use are
//! rejected so typos surface early. [`RunConfig::canonical_text`] writes
//! every resolved value in key order; parsing it again gives the same
//! configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use sparsebyz::aggregate::{Aggregator, RfaParams};
use sparsebyz::attack::{SearchParams, Z1Policy};
use sparsebyz::sim::{LrSchedule, PartitionKind};

use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Splits config text into a key-value map. Duplicate keys are an error.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(config_err(format!(
                "line {}: expected `key = value`",
                n + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        let valid = !key.is_empty()
            && key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.');
        if !valid {
            return Err(config_err(format!("line {}: bad key `{key}`", n + 1)));
        }
        if value.is_empty() {
            return Err(config_err(format!("line {}: `{key}` has no value", n + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(config_err(format!("line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(out)
}

struct Reader {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| config_err(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn req<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.opt(key)?
            .ok_or_else(|| config_err(format!("missing required key `{key}`")))
    }

    fn finish(self) -> Result<()> {
        let unused: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            let list: Vec<&str> = unused.iter().map(|s| s.as_str()).collect();
            Err(config_err(format!(
                "unknown or unused keys for this configuration: {}",
                list.join(", ")
            )))
        }
    }
}

#[derive(Default)]
struct Writer(BTreeMap<String, String>);

impl Writer {
    fn put(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn put_opt(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.put(key, v);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 2000,
            test_per_class: 200,
            dim: 64,
            spread: 0.15,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs(BlobSpec),
    Idx(IdxPaths),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelArch {
    Mlp2 { hidden: usize },
    Cnn2 { conv1: usize, conv2: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMethod {
    Random,
    RandomLayer,
    Erk,
    Force,
}

impl MaskMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMethod::Random => "random",
            MaskMethod::RandomLayer => "random-layer",
            MaskMethod::Erk => "erk",
            MaskMethod::Force => "force",
        }
    }
}

impl FromStr for MaskMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "random" => MaskMethod::Random,
            "random-layer" => MaskMethod::RandomLayer,
            "erk" => MaskMethod::Erk,
            "force" => MaskMethod::Force,
            _ => {
                return Err(format!(
                    "unknown mask method `{s}` (random, random-layer, erk, force)"
                ))
            }
        })
    }
}

impl Display for MaskMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub method: MaskMethod,
    pub delta: f64,
    pub critical: bool,
    /// Occupancy cap on the final fully connected layer (FORCE only).
    pub fc_cap: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    File(PathBuf),
    Generate(MaskSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttackSpec {
    None,
    BitFlip,
    LabelFlip,
    Alie {
        z: Option<f64>,
    },
    Ipm {
        z: f64,
    },
    MinMax,
    MinSum,
    HybridSparse {
        mask: MaskSource,
        z1: Z1Policy,
        z2: f64,
    },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::BitFlip => "bitflip",
            AttackSpec::LabelFlip => "labelflip",
            AttackSpec::Alie { .. } => "alie",
            AttackSpec::Ipm { .. } => "ipm",
            AttackSpec::MinMax => "minmax",
            AttackSpec::MinSum => "minsum",
            AttackSpec::HybridSparse { .. } => "hybrid_sparse",
        }
    }

    fn signed(&self) -> bool {
        matches!(
            self,
            AttackSpec::Alie { .. }
                | AttackSpec::MinMax
                | AttackSpec::MinSum
                | AttackSpec::HybridSparse { .. }
        )
    }

    fn searches(&self) -> bool {
        matches!(
            self,
            AttackSpec::MinMax
                | AttackSpec::MinSum
                | AttackSpec::HybridSparse {
                    z1: Z1Policy::MinSumAdaptive(_),
                    ..
                }
        )
    }
}

/// A fully resolved experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub partition: PartitionKind,
    pub model: ModelArch,
    pub k: usize,
    pub k_m: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub aggregator: Aggregator,
    pub attack: AttackSpec,
    /// Subtract the perturbation (`attack.sign = minus`).
    pub subtract: bool,
    pub search: SearchParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("empty config resolves")
    }
}

fn read_aggregator(r: &mut Reader, kind: &str, k_m: usize, nested: bool) -> Result<Aggregator> {
    Ok(match kind {
        "mean" => Aggregator::Mean,
        "krum" => Aggregator::Krum {
            k_m: r.get("agg.k_m", k_m)?,
            neighborhood: r.opt("agg.neighborhood")?,
        },
        "multikrum" => Aggregator::MultiKrum {
            k_m: r.get("agg.k_m", k_m)?,
            n_select: r.opt("agg.n_select")?,
            neighborhood: r.opt("agg.neighborhood")?,
        },
        "bulyan" => Aggregator::Bulyan {
            k_m: r.get("agg.k_m", k_m)?,
        },
        "cc" if !nested => Aggregator::Cc {
            tau: r.get("agg.tau", 1.0)?,
            iters: r.get("agg.iters", 1)?,
        },
        "cm" => Aggregator::Cm,
        "tm" => Aggregator::Tm {
            k_m: r.get("agg.k_m", k_m)?,
        },
        "rfa" => {
            let d = RfaParams::default();
            Aggregator::Rfa(RfaParams {
                eps: r.get("agg.eps", d.eps)?,
                max_iters: r.get("agg.max_iters", d.max_iters)?,
                tol: r.get("agg.tol", d.tol)?,
            })
        }
        "signsgd" => Aggregator::SignSgd,
        "gas" if !nested => {
            let p = r.get("agg.p", 100)?;
            let base: String = r.get("agg.base", "bulyan".to_string())?;
            Aggregator::Gas {
                p,
                base: Box::new(read_aggregator(r, &base, k_m, true)?),
            }
        }
        "cc" | "gas" => return Err(config_err(format!("agg.base cannot be `{kind}`"))),
        other => return Err(config_err(format!("unknown aggregator `{other}`"))),
    })
}

fn write_aggregator(w: &mut Writer, agg: &Aggregator, key: &str) {
    w.put(key, agg.name());
    match agg {
        Aggregator::Mean | Aggregator::Cm | Aggregator::SignSgd => {}
        Aggregator::Krum { k_m, neighborhood } => {
            w.put("agg.k_m", k_m);
            w.put_opt("agg.neighborhood", *neighborhood);
        }
        Aggregator::MultiKrum {
            k_m,
            n_select,
            neighborhood,
        } => {
            w.put("agg.k_m", k_m);
            w.put_opt("agg.n_select", *n_select);
            w.put_opt("agg.neighborhood", *neighborhood);
        }
        Aggregator::Bulyan { k_m } | Aggregator::Tm { k_m } => w.put("agg.k_m", k_m),
        Aggregator::Cc { tau, iters } => {
            w.put("agg.tau", tau);
            w.put("agg.iters", iters);
        }
        Aggregator::Rfa(p) => {
            w.put("agg.eps", p.eps);
            w.put("agg.max_iters", p.max_iters);
            w.put("agg.tol", p.tol);
        }
        Aggregator::Gas { p, base } => {
            w.put("agg.p", p);
            write_aggregator(w, base, "agg.base");
        }
    }
}

fn read_bool(r: &mut Reader, key: &str, default: bool) -> Result<bool> {
    match r.raw(key).as_deref() {
        None => Ok(default),
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(v) => Err(config_err(format!(
            "`{key}`: expected true or false, got `{v}`"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Reader {
            map: parse_entries(text)?,
            used: BTreeSet::new(),
        };
        let seed = r.get("seed", 0u64)?;

        let source: String = r.get("data.source", "blobs".to_string())?;
        let data = match source.as_str() {
            "blobs" => {
                let d = BlobSpec::default();
                DataSource::Blobs(BlobSpec {
                    classes: r.get("data.classes", d.classes)?,
                    train_per_class: r.get("data.train_per_class", d.train_per_class)?,
                    test_per_class: r.get("data.test_per_class", d.test_per_class)?,
                    dim: r.get("data.dim", d.dim)?,
                    spread: r.get("data.spread", d.spread)?,
                    seed: r.get("data.seed", d.seed)?,
                })
            }
            "idx" => DataSource::Idx(IdxPaths {
                train_images: r.req("data.train_images")?,
                train_labels: r.req("data.train_labels")?,
                test_images: r.req("data.test_images")?,
                test_labels: r.req("data.test_labels")?,
            }),
            other => {
                return Err(config_err(format!(
                    "unknown data.source `{other}` (blobs, idx)"
                )))
            }
        };
        let partition = match r.get("data.partition", "iid".to_string())?.as_str() {
            "iid" => PartitionKind::Iid,
            "dirichlet" => PartitionKind::Dirichlet(r.get("data.alpha", 1.0)?),
            other => {
                return Err(config_err(format!(
                    "unknown data.partition `{other}` (iid, dirichlet)"
                )))
            }
        };

        let model = match r.get("model.arch", "mlp2".to_string())?.as_str() {
            "mlp2" => ModelArch::Mlp2 {
                hidden: r.get("model.hidden", 32)?,
            },
            "cnn2" => ModelArch::Cnn2 {
                conv1: r.get("model.conv1", 4)?,
                conv2: r.get("model.conv2", 8)?,
            },
            other => {
                return Err(config_err(format!(
                    "unknown model.arch `{other}` (mlp2, cnn2)"
                )))
            }
        };

        let k = r.get("fl.k", 25)?;
        let k_m = r.get("fl.k_m", 5)?;
        let beta = r.get("fl.beta", 0.9)?;
        let epochs = r.get("fl.epochs", 5)?;
        let batch_size = r.get("fl.batch_size", 32)?;

        let agg_kind: String = r.get("agg.kind", "mean".to_string())?;
        let aggregator = read_aggregator(&mut r, &agg_kind, k_m, false)?;
        let default_lr = if aggregator == Aggregator::SignSgd {
            0.01
        } else {
            0.1
        };
        let lr = LrSchedule {
            initial: r.get("lr.initial", default_lr)?,
            decay_factor: r.get("lr.decay_factor", 0.1)?,
            decay_at: r.get("lr.decay_at", 0.75)?,
        };

        let attack = match r.get("attack.kind", "none".to_string())?.as_str() {
            "none" => AttackSpec::None,
            "bitflip" => AttackSpec::BitFlip,
            "labelflip" => AttackSpec::LabelFlip,
            "alie" => AttackSpec::Alie {
                z: r.opt("attack.z")?,
            },
            "ipm" => AttackSpec::Ipm {
                z: r.get("attack.z", 0.4)?,
            },
            "minmax" => AttackSpec::MinMax,
            "minsum" => AttackSpec::MinSum,
            "hybrid_sparse" => {
                let z1 = match r.get("attack.z1_policy", "fixed".to_string())?.as_str() {
                    "fixed" => Z1Policy::Fixed(r.opt("attack.z1")?),
                    "adaptive" => Z1Policy::MinSumAdaptive(r.opt("attack.z1")?),
                    other => {
                        return Err(config_err(format!(
                            "unknown attack.z1_policy `{other}` (fixed, adaptive)"
                        )))
                    }
                };
                let z2 = r.get("attack.z2", 1.5)?;
                let mask = match r.opt::<PathBuf>("attack.mask_path")? {
                    Some(p) => MaskSource::File(p),
                    None => {
                        let method: MaskMethod = r
                            .get("mask.method", "random-layer".to_string())?
                            .parse()
                            .map_err(config_err)?;
                        let force = method == MaskMethod::Force;
                        MaskSource::Generate(MaskSpec {
                            method,
                            delta: r.get("mask.delta", 0.2)?,
                            critical: read_bool(&mut r, "mask.critical", true)?,
                            fc_cap: if force { r.opt("mask.fc_cap")? } else { None },
                            steps: if force { r.get("mask.steps", 10)? } else { 10 },
                            batch_size: if force {
                                r.get("mask.batch_size", 32)?
                            } else {
                                32
                            },
                            seed: r.get("mask.seed", 0)?,
                        })
                    }
                };
                AttackSpec::HybridSparse { mask, z1, z2 }
            }
            other => return Err(config_err(format!("unknown attack.kind `{other}`"))),
        };
        let subtract = if attack.signed() {
            match r.get("attack.sign", "minus".to_string())?.as_str() {
                "minus" => true,
                "plus" => false,
                other => {
                    return Err(config_err(format!(
                        "attack.sign must be minus or plus, got `{other}`"
                    )))
                }
            }
        } else {
            true
        };
        let search = if attack.searches() {
            let d = SearchParams::default();
            SearchParams {
                z_hi: r.get("attack.z_hi", d.z_hi)?,
                tol: r.get("attack.tol", d.tol)?,
                max_iters: r.get("attack.max_iters", d.max_iters)?,
            }
        } else {
            SearchParams::default()
        };
        r.finish()?;

        Ok(RunConfig {
            seed,
            data,
            partition,
            model,
            k,
            k_m,
            beta,
            epochs,
            batch_size,
            lr,
            aggregator,
            attack,
            subtract,
            search,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every resolved key and value.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut w = Writer::default();
        w.put("seed", self.seed);
        match &self.data {
            DataSource::Blobs(b) => {
                w.put("data.source", "blobs");
                w.put("data.classes", b.classes);
                w.put("data.train_per_class", b.train_per_class);
                w.put("data.test_per_class", b.test_per_class);
                w.put("data.dim", b.dim);
                w.put("data.spread", b.spread);
                w.put("data.seed", b.seed);
            }
            DataSource::Idx(p) => {
                w.put("data.source", "idx");
                w.put("data.train_images", p.train_images.display());
                w.put("data.train_labels", p.train_labels.display());
                w.put("data.test_images", p.test_images.display());
                w.put("data.test_labels", p.test_labels.display());
            }
        }
        match self.partition {
            PartitionKind::Iid => w.put("data.partition", "iid"),
            PartitionKind::Dirichlet(a) => {
                w.put("data.partition", "dirichlet");
                w.put("data.alpha", a);
            }
        }
        match self.model {
            ModelArch::Mlp2 { hidden } => {
                w.put("model.arch", "mlp2");
                w.put("model.hidden", hidden);
            }
            ModelArch::Cnn2 { conv1, conv2 } => {
                w.put("model.arch", "cnn2");
                w.put("model.conv1", conv1);
                w.put("model.conv2", conv2);
            }
        }
        w.put("fl.k", self.k);
        w.put("fl.k_m", self.k_m);
        w.put("fl.beta", self.beta);
        w.put("fl.epochs", self.epochs);
        w.put("fl.batch_size", self.batch_size);
        w.put("lr.initial", self.lr.initial);
        w.put("lr.decay_factor", self.lr.decay_factor);
        w.put("lr.decay_at", self.lr.decay_at);
        write_aggregator(&mut w, &self.aggregator, "agg.kind");

        w.put("attack.kind", self.attack.name());
        match &self.attack {
            AttackSpec::Alie { z } => w.put_opt("attack.z", *z),
            AttackSpec::Ipm { z } => w.put("attack.z", z),
            AttackSpec::HybridSparse { mask, z1, z2 } => {
                match z1 {
                    Z1Policy::Fixed(z) => {
                        w.put("attack.z1_policy", "fixed");
                        w.put_opt("attack.z1", *z);
                    }
                    Z1Policy::MinSumAdaptive(z) => {
                        w.put("attack.z1_policy", "adaptive");
                        w.put_opt("attack.z1", *z);
                    }
                }
                w.put("attack.z2", z2);
                match mask {
                    MaskSource::File(p) => w.put("attack.mask_path", p.display()),
                    MaskSource::Generate(m) => {
                        w.put("mask.method", m.method);
                        w.put("mask.delta", m.delta);
                        w.put("mask.critical", m.critical);
                        w.put("mask.seed", m.seed);
                        if m.method == MaskMethod::Force {
                            w.put_opt("mask.fc_cap", m.fc_cap);
                            w.put("mask.steps", m.steps);
                            w.put("mask.batch_size", m.batch_size);
                        }
                    }
                }
            }
            _ => {}
        }
        if self.attack.signed() {
            w.put("attack.sign", if self.subtract { "minus" } else { "plus" });
        }
        if self.attack.searches() {
            w.put("attack.z_hi", self.search.z_hi);
            w.put("attack.tol", self.search.tol);
            w.put("attack.max_iters", self.search.max_iters);
        }
        w.0
    }

    /// Resolved configuration as sorted `key = value` lines.
    pub fn canonical_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
