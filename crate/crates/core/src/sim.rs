//! The federated training loop with Byzantine clients and per-round
//! diagnostics.
//!
//! Clients `0..k - k_m` are benign; the last `k_m` ids are Byzantine. One
//! aggregation happens per mini-batch step, and an epoch is
//! `ceil((n_train / k) / batch_size)` rounds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregate::{agg_cm, Aggregator, AggregatorState, ClientUpdate};
use crate::attack::{attack_bitflip, AttackConfig, AttackKind};
use crate::data::{flip_label, partition_dirichlet, partition_iid, Dataset, Partition};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{angle_degrees, cosine_similarity, dist, index_mean, norm, sub, ParamVector};
use crate::model::{Batch, Model, ModelSpec};
use crate::prune::MaskPolicy;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionKind {
    Iid,
    Dirichlet(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    /// Fraction of the total epochs after which the decay applies.
    pub decay_at: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            decay_factor: 0.1,
            decay_at: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub partition: PartitionKind,
    pub k: usize,
    pub k_m: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub aggregator: Aggregator,
    pub attack: AttackConfig,
    /// When set and the attack is hybrid sparse, the attack mask is rebuilt
    /// from this policy at the initial model, with FORCE drawing on the
    /// Byzantine partitions.
    pub hybrid_mask: Option<MaskPolicy>,
    pub seed: u64,
    /// Worker threads for client steps; `None` uses the rayon default.
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, aggregator: Aggregator) -> Self {
        Self {
            model,
            partition: PartitionKind::Iid,
            k: 25,
            k_m: 5,
            beta: 0.9,
            epochs: 10,
            batch_size: 32,
            lr: LrSchedule::default(),
            aggregator,
            attack: AttackConfig::none(),
            hybrid_mask: None,
            seed: 0,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.k == 0 || 2 * self.k_m >= self.k {
            return Err(Error::invalid(format!(
                "need k_m < k/2, got k = {}, k_m = {}",
                self.k, self.k_m
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.beta
            )));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {}",
                self.lr.initial
            )));
        }
        if !(self.lr.decay_factor > 0.0) || !(0.0..=1.0).contains(&self.lr.decay_at) {
            return Err(Error::invalid(
                "decay factor must be > 0 and decay point in [0, 1]",
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be >= 1"));
        }
        if let PartitionKind::Dirichlet(a) = self.partition {
            if !(a > 0.0) {
                return Err(Error::invalid(format!(
                    "Dirichlet alpha must be > 0, got {a}"
                )));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be >= 1"));
        }
        if self.attack.kind.is_vector_attack() && self.k - self.k_m < 2 {
            return Err(Error::invalid(
                "vector attacks need at least 2 benign clients",
            ));
        }
        self.aggregator.validate()?;
        self.attack.validate()
    }

    pub fn rounds_per_epoch(&self, n_train: usize) -> usize {
        let per_client = n_train as f64 / self.k as f64;
        ((per_client / self.batch_size as f64).ceil() as usize).max(1)
    }
}

/// One row of per-round diagnostics. Absent values are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub escape_cm: Option<f64>,
    pub escape_tm: Option<f64>,
    pub byz_selected_frac: Option<f64>,
    pub drift_norm: Option<f64>,
    pub angle_deg: Option<f64>,
    pub temporal_cos: Option<f64>,
}

impl RoundMetrics {
    fn empty(round: usize, epoch: usize) -> Self {
        Self {
            round,
            epoch,
            train_loss: None,
            test_acc: None,
            escape_cm: None,
            escape_tm: None,
            byz_selected_frac: None,
            drift_norm: None,
            angle_deg: None,
            temporal_cos: None,
        }
    }
}

/// Fraction of coordinates where `aggregate` equals the Byzantine value
/// within `1e-12`.
pub fn escape_ratio_cm(byz: &[f64], aggregate: &[f64]) -> Result<f64> {
    check_dim(byz.len(), aggregate.len())?;
    if byz.is_empty() {
        return Err(Error::Empty("escape ratio input"));
    }
    let hits = byz
        .iter()
        .zip(aggregate)
        .filter(|(b, a)| (*b - *a).abs() <= 1e-12)
        .count();
    Ok(hits as f64 / byz.len() as f64)
}

/// Fraction of coordinates where the Byzantine value would be kept by a
/// trimmed mean dropping `k_m` values at each end. Equal values are
/// resolved in the Byzantine value's favor.
pub fn escape_ratio_tm<V: AsRef<[f64]>>(byz: &[f64], updates: &[V], k_m: usize) -> Result<f64> {
    let k = updates.len();
    if k <= 2 * k_m {
        return Err(Error::Infeasible(format!(
            "trimmed mean needs k > 2 k_m, got k = {k}, k_m = {k_m}"
        )));
    }
    for u in updates {
        check_dim(byz.len(), u.as_ref().len())?;
    }
    if byz.is_empty() {
        return Err(Error::Empty("escape ratio input"));
    }
    let mut kept = 0usize;
    for (c, &b) in byz.iter().enumerate() {
        let below = updates.iter().filter(|u| u.as_ref()[c] < b).count();
        let equal = updates.iter().filter(|u| u.as_ref()[c] == b).count();
        // Copies of b occupy sorted ranks [below, below + equal).
        let (lo, hi) = (below, below + equal.max(1));
        if lo < k - k_m && hi > k_m {
            kept += 1;
        }
    }
    Ok(kept as f64 / byz.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftMetrics {
    pub norm: f64,
    pub angle_deg: Option<f64>,
    pub temporal_cos: Option<f64>,
    /// The drift after clipping to the `tau` ball.
    pub effective: ParamVector,
}

/// Drift of the Byzantine vector from the reference, its clipped
/// ("effective") version, the angle between that and the reference, and the
/// cosine with the previous round's effective perturbation.
pub fn reference_drift_metrics(
    byz: &[f64],
    reference: &[f64],
    tau: f64,
    prev_effective: Option<&[f64]>,
) -> Result<DriftMetrics> {
    check_dim(reference.len(), byz.len())?;
    let drift = sub(byz, reference);
    let n = norm(&drift);
    let scale = if n > tau { tau / n } else { 1.0 };
    let effective = ParamVector::new(drift.iter().map(|x| x * scale).collect());
    let angle_deg = angle_degrees(&effective, reference).ok();
    let temporal_cos = match prev_effective {
        Some(p) => {
            check_dim(p.len(), byz.len())?;
            cosine_similarity(&effective, p).ok()
        }
        None => None,
    };
    Ok(DriftMetrics {
        norm: n,
        angle_deg,
        temporal_cos,
        effective,
    })
}

/// One momentum step `(1 - beta) g + beta m`, in place.
pub fn momentum_step(m: &mut [f64], g: &[f64], beta: f64) {
    for (mi, gi) in m.iter_mut().zip(g) {
        *mi = (1.0 - beta) * gi + beta * *mi;
    }
}

struct Client {
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    momentum: Vec<f64>,
}

impl Client {
    fn new(indices: Vec<usize>, seed: u64, id: usize, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let mut order = indices.clone();
        order.shuffle(&mut rng);
        Self {
            indices,
            order,
            cursor: 0,
            rng,
            momentum: vec![0.0; d],
        }
    }

    /// The next `bs` samples of this client's reshuffled data stream.
    fn next_batch(&mut self, bs: usize) -> Vec<usize> {
        let n = bs.min(self.indices.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Parameters or the training loss became non-finite at this round.
    Diverged {
        round: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub metrics: Vec<RoundMetrics>,
    /// Accuracy at the end of the last epoch (`1/C` after divergence).
    pub final_accuracy: f64,
}

/// Everything observed in a single round, for inspection in tests.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub metrics: RoundMetrics,
    pub benign_mean: ParamVector,
    pub byzantine: Option<ParamVector>,
    pub aggregate: ParamVector,
    pub lr: f64,
}

/// Step-by-step driver of an experiment.
pub struct Simulation<'a> {
    cfg: ExperimentConfig,
    test: &'a Dataset,
    train: &'a Dataset,
    model: Model,
    clients: Vec<Client>,
    state: AggregatorState,
    attack: AttackConfig,
    rpe: usize,
    round: usize,
    prev_aggregate: Option<ParamVector>,
    prev_effective: Option<ParamVector>,
    pool: rayon::ThreadPool,
    diverged: Option<usize>,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: ExperimentConfig, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        for ds in [train, test] {
            check_dim(cfg.model.input.len(), ds.shape().len())?;
            if ds.classes() > cfg.model.classes {
                return Err(Error::invalid(format!(
                    "dataset has {} classes, model has {}",
                    ds.classes(),
                    cfg.model.classes
                )));
            }
        }
        if test.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads.unwrap_or(0))
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;

        let model = Model::init(cfg.model, cfg.seed)?;
        let partition: Partition = match cfg.partition {
            PartitionKind::Iid => partition_iid(train, cfg.k, cfg.seed.wrapping_add(1))?,
            PartitionKind::Dirichlet(a) => {
                partition_dirichlet(train, cfg.k, a, cfg.seed.wrapping_add(1))?
            }
        };
        let d = model.dim();
        let clients: Vec<Client> = partition
            .assignments()
            .iter()
            .enumerate()
            .map(|(id, idx)| Client::new(idx.clone(), cfg.seed.wrapping_add(2), id, d))
            .collect();

        let mut attack = cfg.attack.clone();
        if let (AttackKind::HybridSparse { mask, .. }, Some(policy)) =
            (&mut attack.kind, &cfg.hybrid_mask)
        {
            let byz: Vec<Vec<usize>> = partition.assignments()[cfg.k - cfg.k_m..].to_vec();
            if byz.is_empty() {
                return Err(Error::invalid("hybrid attack needs k_m >= 1"));
            }
            *mask =
                pool.install(|| policy.build(&cfg.model, Some((model.params(), train, &byz))))?;
        }
        if let AttackKind::HybridSparse { mask, .. } = &attack.kind {
            check_dim(d, mask.dim())?;
        }

        let state = AggregatorState::new(cfg.aggregator.clone())?;
        let rpe = cfg.rounds_per_epoch(train.len());
        Ok(Self {
            cfg,
            test,
            train,
            model,
            clients,
            state,
            attack,
            rpe,
            round: 0,
            prev_aggregate: None,
            prev_effective: None,
            pool,
            diverged: None,
        })
    }

    pub fn rounds_per_epoch(&self) -> usize {
        self.rpe
    }

    pub fn total_rounds(&self) -> usize {
        self.rpe * self.cfg.epochs
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// The resolved attack (with any policy-built mask in place).
    pub fn attack(&self) -> &AttackConfig {
        &self.attack
    }

    pub fn is_finished(&self) -> bool {
        self.diverged.is_some() || self.round >= self.total_rounds()
    }

    fn lr_at(&self, round: usize) -> f64 {
        let epoch_pos = round as f64 / self.rpe as f64;
        if epoch_pos >= self.cfg.lr.decay_at * self.cfg.epochs as f64 {
            self.cfg.lr.initial * self.cfg.lr.decay_factor
        } else {
            self.cfg.lr.initial
        }
    }

    fn tau(&self) -> f64 {
        match &self.cfg.aggregator {
            Aggregator::Cc { tau, .. } => *tau,
            _ => 1.0,
        }
    }

    pub fn evaluate(&self) -> Result<f64> {
        self.pool.install(|| evaluate(&self.model, self.test))
    }

    /// Runs one aggregation round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        if self.is_finished() {
            return Err(Error::invalid("simulation already finished"));
        }
        let round = self.round;
        let (k, k_m) = (self.cfg.k, self.cfg.k_m);
        let n_benign = k - k_m;
        let kind = self.attack.kind.clone();
        let vector_attack = k_m > 0 && kind.is_vector_attack();
        let spec = &self.cfg.model;
        let params = self.model.params().as_slice();
        let (train, bs, beta) = (self.train, self.cfg.batch_size, self.cfg.beta);

        // Byzantine clients skip local training under vector attacks.
        let losses: Vec<Option<f64>> = self
            .pool
            .install(|| {
                self.clients
                    .par_iter_mut()
                    .enumerate()
                    .map(|(id, client)| -> Result<Option<f64>> {
                        let byzantine = id >= n_benign;
                        if byzantine && vector_attack {
                            return Ok(None);
                        }
                        let idx = client.next_batch(bs);
                        let mut batch: Batch = train.batch(&idx);
                        if byzantine && matches!(kind, AttackKind::LabelFlip) {
                            for y in &mut batch.labels {
                                *y = flip_label(*y, spec.classes)?;
                            }
                        }
                        let (loss, mut g) = crate::model::loss_and_grad_at(spec, params, &batch)?;
                        if byzantine && matches!(kind, AttackKind::BitFlip) {
                            g = attack_bitflip(&g);
                        }
                        momentum_step(&mut client.momentum, &g, beta);
                        Ok((!byzantine).then_some(loss))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .map_err(|e| Error::Round {
                round,
                source: Box::new(e),
            })?;

        let benign: Vec<&[f64]> = self.clients[..n_benign]
            .iter()
            .map(|c| c.momentum.as_slice())
            .collect();
        let benign_mean = index_mean(&benign)?;
        let crafted = if vector_attack {
            self.attack
                .craft(&benign, k, k_m)
                .map_err(|e| Error::Round {
                    round,
                    source: Box::new(e),
                })?
                .map(|c| c.vector)
        } else {
            None
        };

        let updates: Vec<ClientUpdate> = self
            .clients
            .iter()
            .enumerate()
            .map(|(id, c)| ClientUpdate {
                client_id: id,
                momentum: match (&crafted, id >= n_benign) {
                    (Some(v), true) => v.clone(),
                    _ => ParamVector::new(c.momentum.clone()),
                },
            })
            .collect();

        let (agg, next_state) = self
            .pool
            .install(|| self.state.aggregate(&updates))
            .map_err(|e| Error::Round {
                round,
                source: Box::new(e),
            })?;
        self.state = next_state;

        let lr = self.lr_at(round);
        self.model.apply_update(&agg.value, lr)?;

        let epoch = round / self.rpe;
        let mut m = RoundMetrics::empty(round, epoch);
        let benign_losses: Vec<f64> = losses.into_iter().flatten().collect();
        m.train_loss = Some(benign_losses.iter().sum::<f64>() / benign_losses.len() as f64);

        if k_m > 0 {
            if let Some(sel) = &agg.selected {
                let byz = sel.iter().filter(|&&id| id >= n_benign).count();
                m.byz_selected_frac = Some(byz as f64 / k_m as f64);
            }
        }
        if let Some(byz) = &crafted {
            let vs: Vec<&[f64]> = updates.iter().map(|u| u.momentum.as_slice()).collect();
            m.escape_cm = Some(escape_ratio_cm(byz, &agg_cm(&vs)?)?);
            m.escape_tm = Some(escape_ratio_tm(byz, &vs, k_m)?);
            let zero;
            let reference = match &self.prev_aggregate {
                Some(r) => r.as_slice(),
                None => {
                    zero = vec![0.0; byz.len()];
                    &zero
                }
            };
            let drift = reference_drift_metrics(
                byz,
                reference,
                self.tau(),
                self.prev_effective.as_deref(),
            )?;
            m.drift_norm = Some(drift.norm);
            m.angle_deg = drift.angle_deg;
            m.temporal_cos = drift.temporal_cos;
            self.prev_effective = Some(drift.effective);
        }
        self.prev_aggregate = Some(agg.value.clone());

        let finite = self.model.params().is_finite() && m.train_loss.is_some_and(f64::is_finite);
        if !finite {
            self.diverged = Some(round);
        } else if round % self.rpe == self.rpe - 1 {
            m.test_acc = Some(self.evaluate()?);
        }
        self.round += 1;

        Ok(RoundRecord {
            metrics: m,
            benign_mean,
            byzantine: crafted,
            aggregate: agg.value,
            lr,
        })
    }

    /// Runs to completion, handing each row to `on_row` as it is produced.
    /// After divergence, one row per remaining epoch records accuracy `1/C`.
    pub fn run(
        mut self,
        mut on_row: impl FnMut(&RoundMetrics) -> Result<()>,
    ) -> Result<RunOutcome> {
        let mut metrics = Vec::with_capacity(self.total_rounds());
        let mut final_accuracy = 1.0 / self.cfg.model.classes as f64;
        while !self.is_finished() {
            let rec = self.step()?;
            if let Some(a) = rec.metrics.test_acc {
                final_accuracy = a;
            }
            on_row(&rec.metrics)?;
            metrics.push(rec.metrics);
        }
        let status = match self.diverged {
            None => RunStatus::Completed,
            Some(round) => {
                let chance = 1.0 / self.cfg.model.classes as f64;
                final_accuracy = chance;
                let first_epoch = round / self.rpe;
                for epoch in first_epoch..self.cfg.epochs {
                    let mut m = RoundMetrics::empty((epoch + 1) * self.rpe - 1, epoch);
                    m.test_acc = Some(chance);
                    on_row(&m)?;
                    metrics.push(m);
                }
                RunStatus::Diverged { round }
            }
        };
        Ok(RunOutcome {
            status,
            metrics,
            final_accuracy,
        })
    }
}

/// Fraction of `test` classified correctly.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64> {
    let correct = (0..test.len())
        .into_par_iter()
        .map(|i| {
            model
                .predict(test.sample(i))
                .map(|p| usize::from(p == test.labels()[i]))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / test.len() as f64)
}

/// Convenience wrapper: build a [`Simulation`] and run it.
pub fn run_experiment(
    cfg: ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    on_row: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<RunOutcome> {
    Simulation::new(cfg, train, test)?.run(on_row)
}

/// Distance between two parameter vectors; exported for diagnostics.
pub fn param_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(dist(a, b))
}
