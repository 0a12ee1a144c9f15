//! Sparse mask generation for the hybrid attack.
//!
//! A mask bit of 1 marks a coordinate for the aggressive `z2` perturbation.
//! Only weight segments are ever selected; bias coordinates stay 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::linalg::ParamVector;
use crate::model::{loss_and_grad_at, Batch, LayerLayout, ModelSpec, SegmentKind};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMask {
    bits: Vec<bool>,
    layout: Arc<LayerLayout>,
    ones: usize,
    per_layer: Vec<f64>,
}

impl SparseMask {
    pub fn from_bits(bits: Vec<bool>, layout: Arc<LayerLayout>) -> Result<Self> {
        check_dim(layout.dim(), bits.len())?;
        let per_layer = layout
            .segments()
            .iter()
            .map(|s| bits[s.range()].iter().filter(|&&b| b).count() as f64 / s.len as f64)
            .collect();
        let ones = bits.iter().filter(|&&b| b).count();
        Ok(Self {
            bits,
            layout,
            ones,
            per_layer,
        })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        Self::from_bits(vec![false; layout.dim()], layout).expect("dimension matches layout")
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn ones(&self) -> usize {
        self.ones
    }

    /// Achieved fraction of ones over all `d` coordinates.
    pub fn delta(&self) -> f64 {
        self.ones as f64 / self.bits.len() as f64
    }

    /// Achieved fraction of ones in each segment, in layout order.
    pub fn per_layer(&self) -> &[f64] {
        &self.per_layer
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    pub fn segment_ones(&self, name: &str) -> Result<usize> {
        let seg = self.layout.segment(name)?;
        Ok(self.bits[seg.range()].iter().filter(|&&b| b).count())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid(format!(
            "delta must be in [0, 1], got {delta}"
        )));
    }
    Ok(())
}

fn weight_indices(layout: &LayerLayout) -> Vec<usize> {
    layout.weight_segments().flat_map(|s| s.range()).collect()
}

fn round_count(delta: f64, n: usize) -> usize {
    ((delta * n as f64).round() as usize).min(n)
}

/// Exactly `round(delta * d_w)` ones spread uniformly over all weight
/// coordinates.
pub fn mask_random_global(layout: Arc<LayerLayout>, delta: f64, seed: u64) -> Result<SparseMask> {
    check_delta(delta)?;
    let mut idx = weight_indices(&layout);
    let count = round_count(delta, idx.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut bits = vec![false; layout.dim()];
    for &i in &idx[..count] {
        bits[i] = true;
    }
    SparseMask::from_bits(bits, layout)
}

/// Exactly `round(delta * len)` ones inside every weight segment.
pub fn mask_random_layerwise(
    layout: Arc<LayerLayout>,
    delta: f64,
    seed: u64,
) -> Result<SparseMask> {
    check_delta(delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![false; layout.dim()];
    for seg in layout.weight_segments() {
        let count = round_count(delta, seg.len);
        for i in index::sample(&mut rng, seg.len, count) {
            bits[seg.offset + i] = true;
        }
    }
    SparseMask::from_bits(bits, layout)
}

/// Sets every coordinate of the named segments to 1.
pub fn apply_critical_layers<S: AsRef<str>>(
    mask: &SparseMask,
    critical: &[S],
) -> Result<SparseMask> {
    let mut bits = mask.bits.clone();
    for name in critical {
        let seg = mask.layout.segment(name.as_ref())?;
        bits[seg.range()].iter_mut().for_each(|b| *b = true);
    }
    SparseMask::from_bits(bits, mask.layout.clone())
}

/// Integer counts close to `quotas` summing to `total`, never above `caps`:
/// floors first, then one extra each by largest remainder (ties to lower
/// index), skipping full entries.
fn apportion(quotas: &[f64], caps: &[usize], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(caps)
        .map(|(q, &c)| (q.floor() as usize).min(c))
        .collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(counts.iter().sum());
    while missing > 0 {
        let before = missing;
        for &i in &order {
            if missing == 0 {
                break;
            }
            if counts[i] < caps[i] {
                counts[i] += 1;
                missing -= 1;
            }
        }
        if before == missing {
            break;
        }
    }
    counts
}

fn erk_raw_density(seg: &crate::model::Segment) -> f64 {
    match seg.kind {
        SegmentKind::Conv => {
            let s = &seg.shape;
            (s[0] + s[1] + s[2] + s[3]) as f64 / seg.len as f64
        }
        SegmentKind::FullyConnected => {
            let s = &seg.shape;
            (s[0] + s[1]) as f64 / seg.len as f64
        }
        SegmentKind::Bias => 0.0,
    }
}

/// Per-segment ones counts under the Erdos-Renyi-Kernel rule for a global
/// budget of `round(delta * d_w)`.
pub fn erk_counts(layout: &LayerLayout, delta: f64) -> Result<Vec<(String, usize)>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!(
            "ERK needs 0 < delta < 1, got {delta}"
        )));
    }
    let segs: Vec<_> = layout.weight_segments().collect();
    let d_w: usize = segs.iter().map(|s| s.len).sum();
    let budget = round_count(delta, d_w);
    let raw: Vec<f64> = segs.iter().map(|s| erk_raw_density(s)).collect();

    let mut dense = vec![false; segs.len()];
    let eps = loop {
        let fixed: usize = segs
            .iter()
            .zip(&dense)
            .filter(|(_, &d)| d)
            .map(|(s, _)| s.len)
            .sum();
        let weight: f64 = segs
            .iter()
            .zip(&raw)
            .zip(&dense)
            .filter(|(_, &d)| !d)
            .map(|((s, r), _)| r * s.len as f64)
            .sum();
        if fixed > budget {
            return Err(Error::MaskInfeasible(format!(
                "ERK clipping leaves {fixed} ones for a budget of {budget}"
            )));
        }
        if weight == 0.0 {
            break 0.0;
        }
        let eps = (budget - fixed) as f64 / weight;
        let mut changed = false;
        for (i, r) in raw.iter().enumerate() {
            if !dense[i] && eps * r > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            break eps;
        }
    };

    let quotas: Vec<f64> = segs
        .iter()
        .zip(&raw)
        .zip(&dense)
        .map(|((s, r), &d)| {
            if d {
                s.len as f64
            } else {
                eps * r * s.len as f64
            }
        })
        .collect();
    let caps: Vec<usize> = segs.iter().map(|s| s.len).collect();
    let counts = apportion(&quotas, &caps, budget);
    if counts.iter().sum::<usize>() != budget {
        return Err(Error::MaskInfeasible(format!(
            "ERK cannot place {budget} ones"
        )));
    }
    Ok(segs.iter().map(|s| s.name.clone()).zip(counts).collect())
}

/// ERK mask; within each segment the ones are drawn uniformly per seed.
pub fn mask_erk(layout: Arc<LayerLayout>, delta: f64, seed: u64) -> Result<SparseMask> {
    let counts = erk_counts(&layout, delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![false; layout.dim()];
    for (name, count) in counts {
        let seg = layout.segment(&name)?;
        for i in index::sample(&mut rng, seg.len, count) {
            bits[seg.offset + i] = true;
        }
    }
    SparseMask::from_bits(bits, layout)
}

/// Connection sensitivity `|theta * grad|`.
pub fn saliency(theta: &[f64], grad: &[f64]) -> Result<ParamVector> {
    check_dim(theta.len(), grad.len())?;
    Ok(ParamVector::new(
        theta.iter().zip(grad).map(|(t, g)| (t * g).abs()).collect(),
    ))
}

/// SNIP saliency of the loss on `batch` at `theta`.
pub fn snip_saliency(spec: &ModelSpec, theta: &[f64], batch: &Batch) -> Result<ParamVector> {
    let (_, grad) = loss_and_grad_at(spec, theta, batch)?;
    saliency(theta, &grad)
}

/// Remaining-weight count at step `t` of `T` for an exponential decay from
/// `d` to `kappa`: `floor(exp((t/T) ln kappa + (1 - t/T) ln d))`.
pub fn sparsity_schedule(d: usize, kappa: usize, steps: usize, t: usize) -> Result<usize> {
    if kappa == 0 || kappa > d {
        return Err(Error::invalid(format!(
            "need 1 <= kappa <= d, got kappa = {kappa}, d = {d}"
        )));
    }
    if steps == 0 || t > steps {
        return Err(Error::invalid(format!(
            "need T >= 1 and 0 <= t <= T, got t = {t}, T = {steps}"
        )));
    }
    if t == 0 {
        return Ok(d);
    }
    if t == steps {
        return Ok(kappa);
    }
    let f = t as f64 / steps as f64;
    let v = (f * (kappa as f64).ln() + (1.0 - f) * (d as f64).ln()).exp();
    // exp/ln round trips land a hair below exact integers such as 100.
    let r = v.round();
    let v = if (v - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        v.floor()
    };
    Ok((v as usize).clamp(kappa, d))
}

/// Per-segment upper bounds on ones density, keyed by segment name.
pub type Caps = BTreeMap<String, f64>;

fn segment_quotas(layout: &LayerLayout, caps: &Caps) -> Result<Vec<Option<usize>>> {
    for (name, &cap) in caps {
        let seg = layout.segment(name)?;
        if !seg.kind.is_weight() {
            return Err(Error::invalid(format!("cap on bias segment {name}")));
        }
        if !(cap > 0.0 && cap <= 1.0) {
            return Err(Error::invalid(format!(
                "cap for {name} must be in (0, 1], got {cap}"
            )));
        }
    }
    Ok(layout
        .segments()
        .iter()
        .map(|s| {
            if !s.kind.is_weight() {
                Some(0)
            } else {
                caps.get(&s.name)
                    .map(|c| (c * s.len as f64).floor() as usize)
            }
        })
        .collect())
}

/// Top-`count` weight coordinates by saliency (ties to the lower index),
/// skipping coordinates whose segment has reached its quota.
fn select_with_quotas(
    layout: &LayerLayout,
    scores: &[f64],
    quotas: &[Option<usize>],
    count: usize,
) -> Vec<bool> {
    let mut order = weight_indices(layout);
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut used = vec![0usize; quotas.len()];
    let mut bits = vec![false; layout.dim()];
    let mut taken = 0;
    for i in order {
        if taken == count {
            break;
        }
        let s = layout.segment_of(i).expect("index within layout");
        if quotas[s].is_some_and(|q| used[s] >= q) {
            continue;
        }
        used[s] += 1;
        bits[i] = true;
        taken += 1;
    }
    bits
}

/// Iterative FORCE pruning with a caller-supplied gradient oracle.
///
/// `grads(t, masked_theta)` returns one gradient per colluding client,
/// evaluated at `c_{t-1} * theta`. Consensus saliency is the client mean of
/// `|theta * grad|`; step `t` keeps the `kappa_t` most salient weights
/// subject to `caps`. The final mask has exactly `kappa` ones.
pub fn force_prune_with<F>(
    layout: Arc<LayerLayout>,
    theta: &[f64],
    kappa: usize,
    steps: usize,
    caps: &Caps,
    mut grads: F,
) -> Result<SparseMask>
where
    F: FnMut(usize, &[f64]) -> Result<Vec<Vec<f64>>>,
{
    check_dim(layout.dim(), theta.len())?;
    let d_w = layout.weight_dim();
    let quotas = segment_quotas(&layout, caps)?;
    let capacity: usize = layout
        .segments()
        .iter()
        .zip(&quotas)
        .map(|(s, q)| q.unwrap_or(s.len))
        .sum();
    if kappa > capacity {
        return Err(Error::MaskInfeasible(format!(
            "caps allow at most {capacity} ones, asked for {kappa}"
        )));
    }
    sparsity_schedule(d_w, kappa, steps, 0)?;

    let mut bits: Vec<bool> = layout
        .segments()
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.kind.is_weight(), s.len))
        .collect();
    for t in 1..=steps {
        let masked: Vec<f64> = theta
            .iter()
            .zip(
                layout
                    .segments()
                    .iter()
                    .flat_map(|s| std::iter::repeat_n(s.kind.is_weight(), s.len)),
            )
            .zip(&bits)
            .map(|((&x, is_w), &b)| if is_w && !b { 0.0 } else { x })
            .collect();
        let gs = grads(t, &masked)?;
        if gs.is_empty() {
            return Err(Error::Empty("colluding client gradients"));
        }
        let mut consensus = vec![0.0; theta.len()];
        for g in &gs {
            check_dim(theta.len(), g.len())?;
            for ((c, x), gi) in consensus.iter_mut().zip(theta).zip(g) {
                *c += (x * gi).abs();
            }
        }
        let n = gs.len() as f64;
        consensus.iter_mut().for_each(|c| *c /= n);
        let count = sparsity_schedule(d_w, kappa, steps, t)?.min(capacity);
        bits = select_with_quotas(&layout, &consensus, &quotas, count);
    }
    SparseMask::from_bits(bits, layout)
}

/// FORCE parameters for [`force_prune`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceParams {
    pub kappa: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// FORCE over a colluded dataset: at each step every colluding client
/// draws a fresh mini-batch from its own index list.
pub fn force_prune(
    spec: &ModelSpec,
    theta: &[f64],
    data: &Dataset,
    clients: &[Vec<usize>],
    params: ForceParams,
    caps: &Caps,
) -> Result<SparseMask> {
    if clients.is_empty() || clients.iter().any(|c| c.is_empty()) {
        return Err(Error::Empty("colluded dataset"));
    }
    if params.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let layout = Arc::new(spec.layout());
    let mut rngs: Vec<ChaCha8Rng> = (0..clients.len())
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(params.seed);
            r.set_stream(c as u64);
            r
        })
        .collect();
    force_prune_with(
        layout,
        theta,
        params.kappa,
        params.steps,
        caps,
        |_, masked| {
            let batches: Vec<Batch> = clients
                .iter()
                .zip(rngs.iter_mut())
                .map(|(idx, rng)| {
                    let pick: Vec<usize> =
                        index::sample(rng, idx.len(), params.batch_size.min(idx.len()))
                            .into_iter()
                            .map(|i| idx[i])
                            .collect();
                    data.batch(&pick)
                })
                .collect();
            batches
                .par_iter()
                .map(|b| loss_and_grad_at(spec, masked, b).map(|(_, g)| g.into_vec()))
                .collect()
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyRow {
    pub name: String,
    pub kind: SegmentKind,
    pub len: usize,
    pub ones: usize,
    pub fraction: f64,
}

pub fn layer_occupancy_report(mask: &SparseMask) -> Vec<OccupancyRow> {
    mask.layout
        .segments()
        .iter()
        .map(|s| {
            let ones = mask.bits[s.range()].iter().filter(|&&b| b).count();
            OccupancyRow {
                name: s.name.clone(),
                kind: s.kind,
                len: s.len,
                ones,
                fraction: ones as f64 / s.len as f64,
            }
        })
        .collect()
}

/// Plain-text segment table with per-segment occupancy.
pub fn format_occupancy(mask: &SparseMask) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "# d = {}, ones = {}, delta = {:.6}",
        mask.dim(),
        mask.ones(),
        mask.delta()
    )
    .unwrap();
    writeln!(
        out,
        "{:<16} {:<5} {:>10} {:>10} {:>10} {:>10}",
        "segment", "kind", "offset", "len", "ones", "fraction"
    )
    .unwrap();
    for (row, seg) in layer_occupancy_report(mask)
        .iter()
        .zip(mask.layout.segments())
    {
        writeln!(
            out,
            "{:<16} {:<5} {:>10} {:>10} {:>10} {:>10.6}",
            row.name,
            row.kind.as_str(),
            seg.offset,
            row.len,
            row.ones,
            row.fraction
        )
        .unwrap();
    }
    out
}

pub const MASK_MAGIC: &[u8; 4] = b"SBMK";
pub const MASK_VERSION: u32 = 1;

/// Writes the binary mask format: magic, version, `d`, ones count, then the
/// ascending one-indices, all little-endian.
pub fn write_mask<W: Write>(mask: &SparseMask, mut w: W) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    w.write_all(&MASK_VERSION.to_le_bytes())?;
    w.write_all(&(mask.dim() as u64).to_le_bytes())?;
    w.write_all(&(mask.ones() as u64).to_le_bytes())?;
    for i in mask.indices() {
        w.write_all(&(i as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::BadMaskFile(format!("truncated while reading {what}")))?;
    Ok(buf)
}

pub fn read_mask<R: Read>(mut r: R, layout: Arc<LayerLayout>) -> Result<SparseMask> {
    let magic: [u8; 4] = read_array(&mut r, "magic")?;
    if &magic != MASK_MAGIC {
        return Err(Error::BadMaskFile(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(&mut r, "version")?);
    if version != MASK_VERSION {
        return Err(Error::BadMaskFile(format!("unsupported version {version}")));
    }
    let d = u64::from_le_bytes(read_array(&mut r, "dimension")?) as usize;
    check_dim(layout.dim(), d)?;
    let ones = u64::from_le_bytes(read_array(&mut r, "count")?) as usize;
    if ones > d {
        return Err(Error::BadMaskFile(format!("{ones} ones in dimension {d}")));
    }
    let mut bits = vec![false; d];
    let mut prev: Option<usize> = None;
    for _ in 0..ones {
        let i = u64::from_le_bytes(read_array(&mut r, "index")?) as usize;
        if i >= d || prev.is_some_and(|p| i <= p) {
            return Err(Error::BadMaskFile(format!(
                "index {i} out of order or range"
            )));
        }
        bits[i] = true;
        prev = Some(i);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::BadMaskFile("trailing bytes".into()));
    }
    SparseMask::from_bits(bits, layout)
}

/// Mask construction strategy.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskKind {
    RandomGlobal,
    RandomLayerwise,
    Erk,
    Force { steps: usize, batch_size: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPolicy {
    pub kind: MaskKind,
    pub delta: f64,
    pub critical_layers: bool,
    pub caps: Caps,
    pub seed: u64,
}

impl MaskPolicy {
    /// Builds the mask. FORCE additionally needs the model parameters and
    /// the colluded data (`theta`, `data`, `clients`).
    pub fn build(
        &self,
        spec: &ModelSpec,
        force_inputs: Option<(&[f64], &Dataset, &[Vec<usize>])>,
    ) -> Result<SparseMask> {
        let layout = Arc::new(spec.layout());
        let mask = match &self.kind {
            MaskKind::RandomGlobal => mask_random_global(layout.clone(), self.delta, self.seed)?,
            MaskKind::RandomLayerwise => {
                mask_random_layerwise(layout.clone(), self.delta, self.seed)?
            }
            MaskKind::Erk => mask_erk(layout.clone(), self.delta, self.seed)?,
            MaskKind::Force { steps, batch_size } => {
                check_delta(self.delta)?;
                let (theta, data, clients) = force_inputs.ok_or_else(|| {
                    Error::invalid("FORCE needs model parameters and colluded data")
                })?;
                let params = ForceParams {
                    kappa: round_count(self.delta, layout.weight_dim()).max(1),
                    steps: *steps,
                    batch_size: *batch_size,
                    seed: self.seed,
                };
                force_prune(spec, theta, data, clients, params, &self.caps)?
            }
        };
        if self.critical_layers {
            apply_critical_layers(&mask, &layout.critical_segments())
        } else {
            Ok(mask)
        }
    }
}
