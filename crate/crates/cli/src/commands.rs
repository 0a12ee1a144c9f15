use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sparsebyz::aggregate::{AggregatorState, ClientUpdate};
use sparsebyz::attack::{AttackConfig, AttackKind};
use sparsebyz::data::{load_idx, partition_iid, synthetic_blobs, synthetic_blobs_split, Dataset};
use sparsebyz::linalg::ParamVector;
use sparsebyz::model::{InputShape, Model, ModelSpec};
use sparsebyz::prune::{
    format_occupancy, read_mask, write_mask, Caps, MaskKind, MaskPolicy, SparseMask,
};
use sparsebyz::sim::{run_experiment, ExperimentConfig, RunStatus};

use crate::config::{
    AttackSpec, DataSource, MaskMethod, MaskSource, MaskSpec, ModelArch, RunConfig,
};
use crate::error::CliError;
use crate::manifest::{manifest_path_for, unix_now, RunManifest};
use crate::metrics::MetricsWriter;
use crate::plot::{read_series, render_svg};

type Result<T> = std::result::Result<T, CliError>;

fn dataset_err(e: sparsebyz::Error) -> CliError {
    CliError::Dataset(e.to_string())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir)
            .map_err(CliError::io(format!("cannot create {}", dir.display()))),
        _ => Ok(()),
    }
}

/// Loads train and test sets and builds the model spec that fits them.
pub fn load_data(cfg: &RunConfig, base: &Path) -> Result<(Dataset, Dataset, ModelSpec)> {
    let (train, test) = match &cfg.data {
        DataSource::Blobs(b) => synthetic_blobs_split(
            b.classes,
            b.train_per_class,
            b.test_per_class,
            b.dim,
            b.spread,
            b.seed,
        )
        .map_err(|e| CliError::Config(e.to_string()))?,
        DataSource::Idx(p) => {
            let train = load_idx(
                resolve(base, &p.train_images),
                resolve(base, &p.train_labels),
            )
            .map_err(dataset_err)?;
            let test = load_idx(resolve(base, &p.test_images), resolve(base, &p.test_labels))
                .map_err(dataset_err)?;
            if train.shape() != test.shape() {
                return Err(CliError::Dataset(format!(
                    "train images are {}x{}, test images {}x{}",
                    train.shape().rows,
                    train.shape().cols,
                    test.shape().rows,
                    test.shape().cols
                )));
            }
            (train, test)
        }
    };
    let classes = train.classes().max(test.classes());
    let len = train.shape().len();
    let (shape, spec) = match cfg.model {
        ModelArch::Mlp2 { hidden } => {
            (InputShape::flat(len), ModelSpec::mlp2(len, hidden, classes))
        }
        ModelArch::Cnn2 { conv1, conv2 } => {
            let shape = match cfg.data {
                DataSource::Idx(_) => train.shape(),
                DataSource::Blobs(_) => {
                    let side = (len as f64).sqrt().round() as usize;
                    if side * side != len {
                        return Err(CliError::Config(format!(
                            "cnn2 on blobs needs a square data.dim, got {len}"
                        )));
                    }
                    InputShape::image(side, side)
                }
            };
            (
                shape,
                ModelSpec::cnn2(shape.rows, shape.cols, conv1, conv2, classes),
            )
        }
    };
    spec.validate()?;
    let train = train.with_shape(shape).map_err(dataset_err)?;
    let test = test.with_shape(shape).map_err(dataset_err)?;
    Ok((train, test, spec))
}

pub fn mask_policy(m: &MaskSpec, spec: &ModelSpec) -> Result<MaskPolicy> {
    let kind = match m.method {
        MaskMethod::Random => MaskKind::RandomGlobal,
        MaskMethod::RandomLayer => MaskKind::RandomLayerwise,
        MaskMethod::Erk => MaskKind::Erk,
        MaskMethod::Force => MaskKind::Force {
            steps: m.steps,
            batch_size: m.batch_size,
        },
    };
    let mut caps = Caps::new();
    if let Some(cap) = m.fc_cap {
        if m.method != MaskMethod::Force {
            return Err(CliError::Config(
                "an FC cap only applies to force masks".into(),
            ));
        }
        let layout = spec.layout();
        let fc = layout
            .final_fc()
            .ok_or_else(|| CliError::Config("model has no fully connected layer".into()))?;
        caps.insert(fc.name.clone(), cap);
    }
    Ok(MaskPolicy {
        kind,
        delta: m.delta,
        critical_layers: m.critical,
        caps,
        seed: m.seed,
    })
}

/// Turns a resolved config into a simulator config.
pub fn experiment(
    cfg: &RunConfig,
    spec: ModelSpec,
    base: &Path,
    threads: Option<usize>,
) -> Result<ExperimentConfig> {
    let mut hybrid_mask = None;
    let kind = match &cfg.attack {
        AttackSpec::None => AttackKind::None,
        AttackSpec::BitFlip => AttackKind::BitFlip,
        AttackSpec::LabelFlip => AttackKind::LabelFlip,
        AttackSpec::Alie { z } => AttackKind::Alie(*z),
        AttackSpec::Ipm { z } => AttackKind::Ipm(*z),
        AttackSpec::MinMax => AttackKind::MinMax,
        AttackSpec::MinSum => AttackKind::MinSum,
        AttackSpec::HybridSparse { mask, z1, z2 } => {
            let layout = Arc::new(spec.layout());
            let mask = match mask {
                MaskSource::File(p) => {
                    let path = resolve(base, p);
                    let f = File::open(&path).map_err(|e| {
                        CliError::Config(format!("cannot open mask {}: {e}", path.display()))
                    })?;
                    read_mask(BufReader::new(f), layout)
                        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                }
                MaskSource::Generate(m) => {
                    hybrid_mask = Some(mask_policy(m, &spec)?);
                    SparseMask::zeros(layout)
                }
            };
            AttackKind::HybridSparse {
                mask,
                z1: z1.clone(),
                z2: *z2,
            }
        }
    };
    let attack = AttackConfig {
        kind,
        subtract: cfg.subtract,
        search: cfg.search,
    };
    let exp = ExperimentConfig {
        model: spec,
        partition: cfg.partition,
        k: cfg.k,
        k_m: cfg.k_m,
        beta: cfg.beta,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        aggregator: cfg.aggregator.clone(),
        attack,
        hybrid_mask,
        seed: cfg.seed,
        threads,
    };
    exp.validate()?;
    // Catch rules that cannot run with k clients before training starts.
    let d = spec.layout().dim();
    let probe: Vec<ClientUpdate> = (0..cfg.k)
        .map(|client_id| ClientUpdate {
            client_id,
            momentum: ParamVector::zeros(d),
        })
        .collect();
    AggregatorState::new(cfg.aggregator.clone())?
        .aggregate(&probe)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(exp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub rows: usize,
    pub final_accuracy: f64,
    pub manifest: RunManifest,
}

/// Runs an experiment, writing the metrics CSV and the manifest sidecar.
/// A diverged run still writes both and then returns
/// [`CliError::Diverged`].
pub fn cmd_run(args: &RunArgs) -> Result<RunSummary> {
    let started_at = unix_now();
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.threads == Some(0) {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let base = args.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let (train, test, spec) = load_data(&cfg, &base)?;
    let exp = experiment(&cfg, spec, &base, args.threads)?;

    create_parent(&args.out)?;
    let file = File::create(&args.out).map_err(CliError::io(format!(
        "cannot create {}",
        args.out.display()
    )))?;
    let mut writer = MetricsWriter::new(BufWriter::new(file))
        .map_err(CliError::io(format!("cannot write {}", args.out.display())))?;
    let mut rows = 0;
    let outcome = run_experiment(exp, &train, &test, |m| {
        rows += 1;
        writer.write(m).map_err(sparsebyz::Error::from)
    })?;

    let manifest_path = manifest_path_for(&args.out);
    let status = match outcome.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { round } => format!("diverged at round {round}"),
    };
    let manifest = RunManifest {
        config_path: args.config.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg,
        threads: args.threads,
        metrics_path: args.out.clone(),
        manifest_path: manifest_path.clone(),
        started_at,
        finished_at: unix_now(),
        status,
    };
    fs::write(&manifest_path, manifest.to_json()).map_err(CliError::io(format!(
        "cannot write {}",
        manifest_path.display()
    )))?;
    if let RunStatus::Diverged { round } = outcome.status {
        return Err(CliError::Diverged(round));
    }
    Ok(RunSummary {
        rows,
        final_accuracy: outcome.final_accuracy,
        manifest,
    })
}

/// Parses `mlp2:IN:HIDDEN:CLASSES` or `cnn2:ROWS:COLS:C1:C2:CLASSES`.
pub fn parse_model_spec(s: &str) -> Result<ModelSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || {
        CliError::Config(format!(
            "bad model spec `{s}` (mlp2:IN:HIDDEN:CLASSES or cnn2:ROWS:COLS:C1:C2:CLASSES)"
        ))
    };
    let nums: Vec<usize> = parts[1..]
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let spec = match (parts[0], nums.as_slice()) {
        ("mlp2", &[n_in, hidden, classes]) => ModelSpec::mlp2(n_in, hidden, classes),
        ("cnn2", &[rows, cols, c1, c2, classes]) => ModelSpec::cnn2(rows, cols, c1, c2, classes),
        _ => return Err(bad()),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MakeMaskArgs {
    pub method: MaskMethod,
    pub delta: f64,
    pub critical: bool,
    pub fc_cap: Option<f64>,
    pub model: String,
    /// IDX image file, or `blobs` for synthetic data.
    pub data: Option<String>,
    pub labels: Option<PathBuf>,
    pub steps: Option<usize>,
    pub batch_size: usize,
    /// Colluding clients the FORCE data is split across.
    pub clients: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct MaskSummary {
    pub mask: SparseMask,
    pub occupancy: String,
    pub occupancy_path: PathBuf,
}

fn force_data(args: &MakeMaskArgs, spec: &ModelSpec) -> Result<Dataset> {
    let data = args
        .data
        .as_deref()
        .ok_or_else(|| CliError::Config("force masks need --data".into()))?;
    let ds = if data == "blobs" {
        synthetic_blobs(spec.classes, 200, spec.input.len(), 0.15, args.data_seed)
            .map_err(|e| CliError::Config(e.to_string()))?
    } else {
        let labels = args.labels.as_ref().ok_or_else(|| {
            CliError::Config("--data with an IDX file also needs --labels".into())
        })?;
        let ds = load_idx(data, labels).map_err(dataset_err)?;
        if ds.classes() > spec.classes {
            return Err(CliError::Dataset(format!(
                "data has {} classes, model has {}",
                ds.classes(),
                spec.classes
            )));
        }
        ds
    };
    if ds.shape().len() != spec.input.len() {
        return Err(CliError::Dataset(format!(
            "data has {} features per sample, model expects {}",
            ds.shape().len(),
            spec.input.len()
        )));
    }
    ds.with_shape(spec.input).map_err(dataset_err)
}

/// Builds a mask, writes it with its occupancy sidecar, and returns both.
pub fn cmd_make_mask(args: &MakeMaskArgs) -> Result<MaskSummary> {
    let spec = parse_model_spec(&args.model)?;
    let force = args.method == MaskMethod::Force;
    if force && args.steps.is_none() {
        return Err(CliError::Config("force masks need --steps".into()));
    }
    if !force && (args.steps.is_some() || args.data.is_some()) {
        return Err(CliError::Config(
            "--steps and --data only apply to force masks".into(),
        ));
    }
    let m = MaskSpec {
        method: args.method,
        delta: args.delta,
        critical: args.critical,
        fc_cap: args.fc_cap,
        steps: args.steps.unwrap_or(0),
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let policy = mask_policy(&m, &spec)?;
    let mask = if force {
        if args.clients == 0 {
            return Err(CliError::Config("--clients must be at least 1".into()));
        }
        let data = force_data(args, &spec)?;
        let parts = partition_iid(&data, args.clients, args.seed)?;
        let theta = Model::init(spec, args.seed)?;
        policy.build(&spec, Some((theta.params(), &data, parts.assignments())))?
    } else {
        policy.build(&spec, None)?
    };

    create_parent(&args.out)?;
    let mut buf = Vec::new();
    write_mask(&mask, &mut buf)?;
    fs::write(&args.out, buf)
        .map_err(CliError::io(format!("cannot write {}", args.out.display())))?;
    let occupancy = format_occupancy(&mask);
    let occupancy_path = args.out.with_extension("occupancy.txt");
    fs::write(&occupancy_path, &occupancy).map_err(CliError::io(format!(
        "cannot write {}",
        occupancy_path.display()
    )))?;
    Ok(MaskSummary {
        mask,
        occupancy,
        occupancy_path,
    })
}

/// Renders one polyline per input CSV.
pub fn cmd_plot(inputs: &[PathBuf], metric: &str, out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(CliError::Config("no input CSVs".into()));
    }
    let series = inputs
        .iter()
        .map(|p| read_series(p, metric))
        .collect::<Result<Vec<_>>>()?;
    create_parent(out)?;
    let mut f =
        File::create(out).map_err(CliError::io(format!("cannot create {}", out.display())))?;
    f.write_all(render_svg(&series, metric).as_bytes())
        .map_err(CliError::io(format!("cannot write {}", out.display())))
}
