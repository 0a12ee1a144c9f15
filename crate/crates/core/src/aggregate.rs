//! Server-side aggregation rules.
//!
//! The free functions take plain vectors and break ties by position. The
//! stateful entry point [`AggregatorState::aggregate`] sorts updates by
//! `client_id` first, so position ties become client-id ties.

use std::ops::Range;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{common_dim, dist, index_mean, norm, sq_dist, ParamVector};

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub momentum: ParamVector,
}

impl AsRef<[f64]> for ClientUpdate {
    fn as_ref(&self) -> &[f64] {
        &self.momentum
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RfaParams {
    pub eps: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RfaParams {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// An aggregation rule and its hyperparameters. `k_m` is the number of
/// Byzantine clients the rule is tuned for.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregator {
    Mean,
    Krum {
        k_m: usize,
        neighborhood: Option<usize>,
    },
    MultiKrum {
        k_m: usize,
        n_select: Option<usize>,
        neighborhood: Option<usize>,
    },
    Bulyan {
        k_m: usize,
    },
    Cc {
        tau: f64,
        iters: usize,
    },
    Cm,
    Tm {
        k_m: usize,
    },
    Rfa(RfaParams),
    SignSgd,
    Gas {
        p: usize,
        base: Box<Aggregator>,
    },
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Krum { .. } => "krum",
            Aggregator::MultiKrum { .. } => "multikrum",
            Aggregator::Bulyan { .. } => "bulyan",
            Aggregator::Cc { .. } => "cc",
            Aggregator::Cm => "cm",
            Aggregator::Tm { .. } => "tm",
            Aggregator::Rfa(_) => "rfa",
            Aggregator::SignSgd => "signsgd",
            Aggregator::Gas { .. } => "gas",
        }
    }

    /// True for rules that pick whole client updates (Krum, Multi-Krum, Bulyan).
    pub fn selects_clients(&self) -> bool {
        matches!(
            self,
            Aggregator::Krum { .. } | Aggregator::MultiKrum { .. } | Aggregator::Bulyan { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Aggregator::Krum {
                neighborhood: Some(0),
                ..
            }
            | Aggregator::MultiKrum {
                neighborhood: Some(0),
                ..
            } => Err(Error::invalid("Krum neighborhood must be >= 1")),
            Aggregator::MultiKrum {
                n_select: Some(0), ..
            } => Err(Error::invalid("Multi-Krum n_select must be >= 1")),
            Aggregator::Cc { tau, iters } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return Err(Error::invalid(format!(
                        "clipping radius must be > 0, got {tau}"
                    )));
                }
                if *iters == 0 {
                    return Err(Error::invalid("clipping iterations must be >= 1"));
                }
                Ok(())
            }
            Aggregator::Rfa(p) => {
                if !(p.eps > 0.0) || !(p.tol >= 0.0) {
                    return Err(Error::invalid("RFA needs eps > 0 and tol >= 0"));
                }
                Ok(())
            }
            Aggregator::Gas { p, base } => {
                if *p == 0 {
                    return Err(Error::invalid("GAS chunk count must be >= 1"));
                }
                if matches!(**base, Aggregator::Cc { .. } | Aggregator::Gas { .. }) {
                    return Err(Error::invalid(format!(
                        "GAS base must be a stateless rule, got {}",
                        base.name()
                    )));
                }
                base.validate()
            }
            _ => Ok(()),
        }
    }
}

/// Result of one aggregation call.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub value: ParamVector,
    /// Client ids picked by Krum-family rules, in selection order.
    pub selected: Option<Vec<usize>>,
}

/// An aggregation rule plus the reference vector carried between rounds
/// by centered clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorState {
    pub rule: Aggregator,
    pub reference: Option<ParamVector>,
}

impl AggregatorState {
    pub fn new(rule: Aggregator) -> Result<Self> {
        rule.validate()?;
        Ok(Self {
            rule,
            reference: None,
        })
    }

    /// Aggregates one round of updates and returns the next state.
    pub fn aggregate(&self, updates: &[ClientUpdate]) -> Result<(Aggregate, AggregatorState)> {
        let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
        sorted.sort_by_key(|u| u.client_id);
        let vs: Vec<&[f64]> = sorted.iter().map(|u| u.momentum.as_slice()).collect();
        let d = common_dim(&vs)?;
        let ids = |idx: Vec<usize>| Some(idx.into_iter().map(|i| sorted[i].client_id).collect());

        let mut next = self.clone();
        let (value, selected) = match &self.rule {
            Aggregator::Krum { k_m, neighborhood } => {
                let nb = neighborhood.unwrap_or_else(|| krum_neighborhood(vs.len(), *k_m));
                let (v, idx) = agg_multikrum(&vs, 1, nb)?;
                (v, ids(idx))
            }
            Aggregator::MultiKrum {
                k_m,
                n_select,
                neighborhood,
            } => {
                let nb = neighborhood.unwrap_or_else(|| krum_neighborhood(vs.len(), *k_m));
                let n = n_select.unwrap_or(vs.len().saturating_sub(*k_m).max(1));
                let (v, idx) = agg_multikrum(&vs, n, nb)?;
                (v, ids(idx))
            }
            Aggregator::Bulyan { k_m } => {
                let (v, idx) = bulyan(&vs, *k_m)?;
                (v, ids(idx))
            }
            Aggregator::Cc { tau, iters } => {
                let zero;
                let reference = match &self.reference {
                    Some(r) => {
                        check_dim(d, r.len())?;
                        r.as_slice()
                    }
                    None => {
                        zero = vec![0.0; d];
                        &zero
                    }
                };
                let v = agg_cc(&vs, reference, *tau, *iters)?;
                next.reference = Some(v.clone());
                (v, None)
            }
            rule => (apply_stateless(rule, &vs)?, None),
        };
        Ok((Aggregate { value, selected }, next))
    }
}

fn apply_stateless(rule: &Aggregator, vs: &[&[f64]]) -> Result<ParamVector> {
    match rule {
        Aggregator::Mean => agg_mean(vs),
        Aggregator::Krum { k_m, neighborhood } => {
            let nb = neighborhood.unwrap_or_else(|| krum_neighborhood(vs.len(), *k_m));
            Ok(agg_multikrum(vs, 1, nb)?.0)
        }
        Aggregator::MultiKrum {
            k_m,
            n_select,
            neighborhood,
        } => {
            let nb = neighborhood.unwrap_or_else(|| krum_neighborhood(vs.len(), *k_m));
            let n = n_select.unwrap_or(vs.len().saturating_sub(*k_m).max(1));
            Ok(agg_multikrum(vs, n, nb)?.0)
        }
        Aggregator::Bulyan { k_m } => agg_bulyan(vs, *k_m),
        Aggregator::Cm => agg_cm(vs),
        Aggregator::Tm { k_m } => agg_tm(vs, *k_m),
        Aggregator::Rfa(p) => agg_rfa(vs, *p),
        Aggregator::SignSgd => agg_signsgd(vs),
        Aggregator::Gas { p, base } => agg_gas(vs, *p, base),
        Aggregator::Cc { .. } => Err(Error::invalid("centered clipping needs a reference state")),
    }
}

pub fn agg_mean<V: AsRef<[f64]>>(vs: &[V]) -> Result<ParamVector> {
    index_mean(vs)
}

/// Default Krum neighborhood `k - k_m - 2`, clamped into `[1, k - 1]`.
pub fn krum_neighborhood(k: usize, k_m: usize) -> usize {
    k.saturating_sub(k_m + 2)
        .clamp(1, k.saturating_sub(1).max(1))
}

fn distance_matrix<V: AsRef<[f64]>>(vs: &[V]) -> Vec<Vec<f64>> {
    let k = vs.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = sq_dist(vs[i].as_ref(), vs[j].as_ref());
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Krum score of each member of `pool`: the sum of squared distances to
/// its `nb` nearest other members.
fn pool_scores(dm: &[Vec<f64>], pool: &[usize], nb: usize) -> Vec<f64> {
    pool.iter()
        .map(|&i| {
            let mut ds: Vec<f64> = pool
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dm[i][j])
                .collect();
            ds.sort_by(f64::total_cmp);
            ds[..nb].iter().sum()
        })
        .collect()
}

fn check_neighborhood(k: usize, nb: usize) -> Result<()> {
    if nb == 0 || nb >= k {
        return Err(Error::invalid(format!(
            "Krum neighborhood {nb} outside [1, {}]",
            k.saturating_sub(1)
        )));
    }
    Ok(())
}

pub fn krum_scores<V: AsRef<[f64]>>(vs: &[V], neighborhood: usize) -> Result<Vec<f64>> {
    common_dim(vs)?;
    check_neighborhood(vs.len(), neighborhood)?;
    let pool: Vec<usize> = (0..vs.len()).collect();
    Ok(pool_scores(&distance_matrix(vs), &pool, neighborhood))
}

/// Indices of the `n_select` lowest Krum scores, ties to the lower index.
pub fn multikrum_select<V: AsRef<[f64]>>(
    vs: &[V],
    n_select: usize,
    neighborhood: usize,
) -> Result<Vec<usize>> {
    if n_select == 0 || n_select > vs.len() {
        return Err(Error::invalid(format!(
            "n_select {n_select} outside [1, {}]",
            vs.len()
        )));
    }
    let scores = krum_scores(vs, neighborhood)?;
    let mut order: Vec<usize> = (0..vs.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(n_select);
    Ok(order)
}

/// Average of the Multi-Krum selection, plus the selected indices.
pub fn agg_multikrum<V: AsRef<[f64]>>(
    vs: &[V],
    n_select: usize,
    neighborhood: usize,
) -> Result<(ParamVector, Vec<usize>)> {
    let idx = multikrum_select(vs, n_select, neighborhood)?;
    let chosen: Vec<&[f64]> = idx.iter().map(|&i| vs[i].as_ref()).collect();
    Ok((index_mean(&chosen)?, idx))
}

pub fn agg_krum<V: AsRef<[f64]>>(vs: &[V], neighborhood: usize) -> Result<ParamVector> {
    Ok(agg_multikrum(vs, 1, neighborhood)?.0)
}

/// Stage one of Bulyan: repeated Krum over a shrinking pool until
/// `k - 2 k_m` updates are chosen. The neighborhood inside a pool of size
/// `n` is `n - k_m - 2`, clamped into `[1, n - 1]`.
pub fn bulyan_select<V: AsRef<[f64]>>(vs: &[V], k_m: usize) -> Result<Vec<usize>> {
    let k = vs.len();
    common_dim(vs)?;
    if k < 4 * k_m + 3 {
        return Err(Error::Infeasible(format!(
            "Bulyan needs k >= 4 k_m + 3, got k = {k}, k_m = {k_m}"
        )));
    }
    let dm = distance_matrix(vs);
    let mut pool: Vec<usize> = (0..k).collect();
    let mut selected = Vec::with_capacity(k - 2 * k_m);
    while selected.len() < k - 2 * k_m {
        let pick = if pool.len() == 1 {
            0
        } else {
            let nb = krum_neighborhood(pool.len(), k_m);
            let scores = pool_scores(&dm, &pool, nb);
            (0..pool.len())
                .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(pool[a].cmp(&pool[b])))
                .expect("pool is non-empty")
        };
        selected.push(pool.remove(pick));
    }
    Ok(selected)
}

fn bulyan<V: AsRef<[f64]>>(vs: &[V], k_m: usize) -> Result<(ParamVector, Vec<usize>)> {
    let selected = bulyan_select(vs, k_m)?;
    let keep = selected.len() - 2 * k_m;
    let d = vs[0].as_ref().len();
    let mut out = vec![0.0; d];
    let mut col: Vec<(f64, usize)> = Vec::with_capacity(selected.len());
    for (c, o) in out.iter_mut().enumerate() {
        col.clear();
        col.extend(selected.iter().map(|&i| (vs[i].as_ref()[c], i)));
        col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let values: Vec<f64> = col.iter().map(|x| x.0).collect();
        let med = median_of_sorted(&values);
        col.sort_by(|a, b| {
            (a.0 - med)
                .abs()
                .total_cmp(&(b.0 - med).abs())
                .then(a.0.total_cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        *o = col[..keep].iter().map(|x| x.0).sum::<f64>() / keep as f64;
    }
    Ok((ParamVector::new(out), selected))
}

pub fn agg_bulyan<V: AsRef<[f64]>>(vs: &[V], k_m: usize) -> Result<ParamVector> {
    Ok(bulyan(vs, k_m)?.0)
}

/// Projects `m` onto the ball of radius `tau` around `reference`.
pub fn clip_to_ball(m: &[f64], reference: &[f64], tau: f64) -> Result<ParamVector> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "clipping radius must be > 0, got {tau}"
        )));
    }
    check_dim(reference.len(), m.len())?;
    let diff: Vec<f64> = m.iter().zip(reference).map(|(x, r)| x - r).collect();
    let n = norm(&diff);
    if n <= tau {
        return Ok(ParamVector::new(m.to_vec()));
    }
    let s = tau / n;
    Ok(ParamVector::new(
        reference
            .iter()
            .zip(&diff)
            .map(|(r, e)| r + s * e)
            .collect(),
    ))
}

/// Centered clipping: `iters` rounds of clip-then-average, each centered
/// on the previous average.
pub fn agg_cc<V: AsRef<[f64]>>(
    vs: &[V],
    reference: &[f64],
    tau: f64,
    iters: usize,
) -> Result<ParamVector> {
    let d = common_dim(vs)?;
    check_dim(d, reference.len())?;
    if iters == 0 {
        return Err(Error::invalid("clipping iterations must be >= 1"));
    }
    let mut center = ParamVector::new(reference.to_vec());
    for _ in 0..iters {
        let clipped = vs
            .iter()
            .map(|v| clip_to_ball(v.as_ref(), &center, tau))
            .collect::<Result<Vec<_>>>()?;
        center = index_mean(&clipped)?;
    }
    Ok(center)
}

/// Mean computed as offsets from the first value, so a run of equal
/// values averages to exactly that value.
fn anchored_mean(xs: &[f64]) -> f64 {
    let a = xs[0];
    a + xs.iter().map(|x| x - a).sum::<f64>() / xs.len() as f64
}

pub(crate) fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn coordinatewise<V: AsRef<[f64]>>(
    vs: &[V],
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<ParamVector> {
    let d = common_dim(vs)?;
    let mut col = vec![0.0; vs.len()];
    let out = (0..d)
        .map(|c| {
            for (x, v) in col.iter_mut().zip(vs) {
                *x = v.as_ref()[c];
            }
            col.sort_by(f64::total_cmp);
            f(&col)
        })
        .collect();
    Ok(ParamVector::new(out))
}

/// Coordinate-wise median; an even count averages the two middle values.
pub fn agg_cm<V: AsRef<[f64]>>(vs: &[V]) -> Result<ParamVector> {
    coordinatewise(vs, median_of_sorted)
}

/// Coordinate-wise trimmed mean dropping `k_m` values at each end.
pub fn agg_tm<V: AsRef<[f64]>>(vs: &[V], k_m: usize) -> Result<ParamVector> {
    if vs.len() <= 2 * k_m {
        return Err(Error::Infeasible(format!(
            "trimmed mean needs k > 2 k_m, got k = {}, k_m = {k_m}",
            vs.len()
        )));
    }
    let keep = vs.len() - 2 * k_m;
    coordinatewise(vs, |s| anchored_mean(&s[k_m..k_m + keep]))
}

fn rfa_objective<V: AsRef<[f64]>>(x: &[f64], vs: &[V]) -> f64 {
    vs.iter().map(|v| dist(x, v.as_ref())).sum()
}

/// Smoothed Weiszfeld iteration for the geometric median, started at the
/// mean. Returns the iterate with the lowest objective seen.
pub fn agg_rfa<V: AsRef<[f64]>>(vs: &[V], params: RfaParams) -> Result<ParamVector> {
    if !(params.eps > 0.0) {
        return Err(Error::invalid("RFA eps must be > 0"));
    }
    let mut x = index_mean(vs)?.into_vec();
    let mut best_obj = rfa_objective(&x, vs);
    let mut best = x.clone();
    let d = x.len();
    for _ in 0..params.max_iters {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for v in vs {
            let w = 1.0 / dist(&x, v.as_ref()).max(params.eps);
            den += w;
            for (n, y) in num.iter_mut().zip(v.as_ref()) {
                *n += w * y;
            }
        }
        num.iter_mut().for_each(|n| *n /= den);
        let step = dist(&num, &x);
        x = num;
        let obj = rfa_objective(&x, vs);
        if obj < best_obj {
            best_obj = obj;
            best.clone_from(&x);
        }
        if step < params.tol {
            break;
        }
    }
    Ok(ParamVector::new(best))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Majority vote of coordinate signs, with `sign(0) = 0`.
pub fn agg_signsgd<V: AsRef<[f64]>>(vs: &[V]) -> Result<ParamVector> {
    let d = common_dim(vs)?;
    let mut votes = vec![0.0; d];
    for v in vs {
        for (t, &x) in votes.iter_mut().zip(v.as_ref()) {
            *t += sign(x);
        }
    }
    Ok(ParamVector::new(votes.into_iter().map(sign).collect()))
}

/// `p` contiguous index ranges covering `0..d`; the first `d mod p` are one
/// element longer.
pub fn chunk_ranges(d: usize, p: usize) -> Result<Vec<Range<usize>>> {
    if p == 0 || p > d {
        return Err(Error::invalid(format!("chunk count {p} outside [1, {d}]")));
    }
    let (base, extra) = (d / p, d % p);
    let mut start = 0;
    Ok((0..p)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Runs `base` independently on each of `p` chunks and concatenates.
pub fn agg_gas<V: AsRef<[f64]>>(vs: &[V], p: usize, base: &Aggregator) -> Result<ParamVector> {
    let d = common_dim(vs)?;
    if matches!(base, Aggregator::Cc { .. } | Aggregator::Gas { .. }) {
        return Err(Error::invalid(format!(
            "GAS base must be stateless, got {}",
            base.name()
        )));
    }
    let mut out = Vec::with_capacity(d);
    for r in chunk_ranges(d, p)? {
        let subs: Vec<&[f64]> = vs.iter().map(|v| &v.as_ref()[r.clone()]).collect();
        out.extend_from_slice(&apply_stateless(base, &subs)?);
    }
    Ok(ParamVector::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_d(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    fn updates(vs: &[Vec<f64>]) -> Vec<ClientUpdate> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| ClientUpdate {
                client_id: i,
                momentum: ParamVector::new(v.clone()),
            })
            .collect()
    }

    #[test]
    fn mean_cases() {
        assert_eq!(agg_mean(&one_d(&[1.0, 3.0])).unwrap().as_slice(), &[2.0]);
        assert_eq!(
            agg_mean(&[vec![4.0, -1.0]]).unwrap().as_slice(),
            &[4.0, -1.0]
        );
        assert!(agg_mean::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn krum_example_scores() {
        let vs = one_d(&[0.0, 1.0, 2.0, 3.0, 10.0]);
        assert_eq!(
            krum_scores(&vs, 2).unwrap(),
            vec![5.0, 2.0, 2.0, 5.0, 113.0]
        );
        assert_eq!(agg_krum(&vs, 2).unwrap().as_slice(), &[1.0]);
        assert_eq!(
            krum_scores(&vec![vec![1.0, 2.0]; 4], 2).unwrap(),
            vec![0.0; 4]
        );
        assert!(krum_scores(&vs, 0).is_err());
        assert!(krum_scores(&vs, 5).is_err());
    }

    #[test]
    fn multikrum_cases() {
        let vs = one_d(&[0.0, 1.0, 2.0, 3.0, 10.0]);
        let (v, idx) = agg_multikrum(&vs, 5, 2).unwrap();
        assert_eq!(v, agg_mean(&vs).unwrap());
        assert_eq!(idx.len(), 5);
        let (_, idx) = agg_multikrum(&vs, 4, 2).unwrap();
        assert!(!idx.contains(&4));
        assert!(agg_multikrum(&vs, 0, 2).is_err());
        assert!(agg_multikrum(&vs, 6, 2).is_err());
    }

    #[test]
    fn krum_default_neighborhood() {
        assert_eq!(krum_neighborhood(25, 5), 18);
        assert_eq!(krum_neighborhood(5, 1), 2);
        assert_eq!(krum_neighborhood(3, 2), 1);
    }

    #[test]
    fn bulyan_cases() {
        let same = vec![vec![1.5, -2.0]; 7];
        assert_eq!(agg_bulyan(&same, 1).unwrap().as_slice(), &[1.5, -2.0]);

        let vs = one_d(&[0.0, 1.0, 5.0, 2.0]);
        let m = agg_bulyan(&vs, 0).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-12);

        let mut xs = vec![0.0, 0.1, -0.1, 0.05, -0.05, 0.2, -0.2, 0.15, -0.15];
        xs.extend([100.0, 100.0]);
        let out = agg_bulyan(&one_d(&xs), 2).unwrap();
        assert!((-0.2..=0.2).contains(&out[0]));

        assert!(matches!(
            agg_bulyan(&one_d(&[0.0; 10]), 2),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn clip_cases() {
        let c = clip_to_ball(&[3.0, 4.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(
            clip_to_ball(&[0.3, 0.4], &[0.0, 0.0], 1.0)
                .unwrap()
                .as_slice(),
            &[0.3, 0.4]
        );
        assert_eq!(
            clip_to_ball(&[2.0], &[2.0], 1.0).unwrap().as_slice(),
            &[2.0]
        );
        assert!(clip_to_ball(&[1.0], &[0.0], 0.0).is_err());
        assert!(clip_to_ball(&[1.0], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn cc_cases() {
        let vs = one_d(&[0.5, 3.0]);
        assert_eq!(agg_cc(&vs, &[0.0], 1.0, 1).unwrap().as_slice(), &[0.75]);
        let inside = vec![vec![0.1, 0.2], vec![-0.3, 0.1]];
        assert_eq!(
            agg_cc(&inside, &[0.0, 0.0], 1.0, 1).unwrap(),
            agg_mean(&inside).unwrap()
        );
        assert!(agg_cc(&vs, &[0.0], 1.0, 0).is_err());
    }

    #[test]
    fn cc_reference_is_threaded() {
        let state = AggregatorState::new(Aggregator::Cc { tau: 1.0, iters: 1 }).unwrap();
        let ups = updates(&one_d(&[0.5, 3.0]));
        let (a, next) = state.aggregate(&ups).unwrap();
        assert_eq!(a.value.as_slice(), &[0.75]);
        assert_eq!(state.reference, None);
        assert_eq!(next.reference.as_ref().unwrap().as_slice(), &[0.75]);
        let (b, _) = next.aggregate(&ups).unwrap();
        // Second round clips around 0.75: 0.5 stays, 3.0 becomes 1.75.
        assert!((b.value[0] - 1.125).abs() < 1e-15);
    }

    #[test]
    fn cm_cases() {
        assert_eq!(
            agg_cm(&one_d(&[1.0, 2.0, 100.0])).unwrap().as_slice(),
            &[2.0]
        );
        assert_eq!(agg_cm(&one_d(&[1.0, 3.0])).unwrap().as_slice(), &[2.0]);
    }

    #[test]
    fn tm_cases() {
        let vs = one_d(&[1.0, 2.0, 3.0, 4.0, 100.0]);
        assert_eq!(agg_tm(&vs, 1).unwrap().as_slice(), &[3.0]);
        assert_eq!(agg_tm(&vs, 0).unwrap(), agg_mean(&vs).unwrap());
        assert!(matches!(
            agg_tm(&one_d(&[1.0, 2.0]), 1),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn rfa_cases() {
        let h = 3f64.sqrt() / 2.0;
        let tri = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]];
        let x = agg_rfa(&tri, RfaParams::default()).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-9 && (x[1] - h / 3.0).abs() < 1e-9);

        let x = agg_rfa(&one_d(&[0.0, 0.0, 10.0]), RfaParams::default()).unwrap();
        assert!(x[0].abs() < 1e-6, "{}", x[0]);
        assert!(agg_rfa::<Vec<f64>>(&[], RfaParams::default()).is_err());
    }

    #[test]
    fn signsgd_cases() {
        let vs = vec![vec![1.0, -2.0], vec![3.0, -1.0], vec![-1.0, 4.0]];
        assert_eq!(agg_signsgd(&vs).unwrap().as_slice(), &[1.0, -1.0]);
        assert_eq!(
            agg_signsgd(&[vec![-0.5, 0.0, 2.0]]).unwrap().as_slice(),
            &[-1.0, 0.0, 1.0]
        );
        assert_eq!(
            agg_signsgd(&one_d(&[1.0, -1.0])).unwrap().as_slice(),
            &[0.0]
        );
    }

    #[test]
    fn gas_cases() {
        let lens: Vec<usize> = chunk_ranges(10, 3)
            .unwrap()
            .iter()
            .map(|r| r.len())
            .collect();
        assert_eq!(lens, vec![4, 3, 3]);
        assert!(chunk_ranges(3, 4).is_err());
        assert!(chunk_ranges(3, 0).is_err());

        let vs: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                (0..6)
                    .map(|c| ((i * 7 + c * 3) % 11) as f64 - 5.0)
                    .collect()
            })
            .collect();
        let mk = Aggregator::MultiKrum {
            k_m: 1,
            n_select: Some(3),
            neighborhood: Some(4),
        };
        assert_eq!(
            agg_gas(&vs, 1, &mk).unwrap(),
            agg_multikrum(&vs, 3, 4).unwrap().0
        );
        assert_eq!(
            agg_gas(&vs, 6, &Aggregator::Cm).unwrap(),
            agg_cm(&vs).unwrap()
        );
        assert_eq!(
            agg_gas(&vs, 1, &Aggregator::Bulyan { k_m: 1 }).unwrap(),
            agg_bulyan(&vs, 1).unwrap()
        );
        assert!(agg_gas(&vs, 2, &Aggregator::Cc { tau: 1.0, iters: 1 }).is_err());
    }

    #[test]
    fn state_validation() {
        assert!(AggregatorState::new(Aggregator::Cc { tau: 0.0, iters: 1 }).is_err());
        assert!(AggregatorState::new(Aggregator::Cc { tau: 1.0, iters: 0 }).is_err());
        assert!(AggregatorState::new(Aggregator::Gas {
            p: 2,
            base: Box::new(Aggregator::Gas {
                p: 1,
                base: Box::new(Aggregator::Mean)
            })
        })
        .is_err());
        assert!(AggregatorState::new(Aggregator::Gas {
            p: 0,
            base: Box::new(Aggregator::Cm)
        })
        .is_err());
        assert!(AggregatorState::new(Aggregator::MultiKrum {
            k_m: 1,
            n_select: Some(0),
            neighborhood: None
        })
        .is_err());
    }

    #[test]
    fn selection_reports_client_ids() {
        let mut ups = updates(&one_d(&[0.0, 1.0, 2.0, 3.0, 10.0]));
        for (u, id) in ups.iter_mut().zip([40, 41, 42, 43, 44]) {
            u.client_id = id;
        }
        ups.reverse();
        let state = AggregatorState::new(Aggregator::Krum {
            k_m: 1,
            neighborhood: Some(2),
        })
        .unwrap();
        let (a, _) = state.aggregate(&ups).unwrap();
        assert_eq!(a.selected, Some(vec![41]));
        assert_eq!(a.value.as_slice(), &[1.0]);
    }

    fn all_rules(k_m: usize) -> Vec<Aggregator> {
        vec![
            Aggregator::Mean,
            Aggregator::Krum {
                k_m,
                neighborhood: None,
            },
            Aggregator::MultiKrum {
                k_m,
                n_select: None,
                neighborhood: None,
            },
            Aggregator::Bulyan { k_m },
            Aggregator::Cc { tau: 1.0, iters: 1 },
            Aggregator::Cm,
            Aggregator::Tm { k_m },
            Aggregator::Rfa(RfaParams::default()),
            Aggregator::SignSgd,
            Aggregator::Gas {
                p: 2,
                base: Box::new(Aggregator::Tm { k_m }),
            },
        ]
    }

    fn instance(k: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), k)
    }

    proptest! {
        #[test]
        fn permutation_invariance(vs in instance(7, 3), perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle()) {
            let ups = updates(&vs);
            let shuffled: Vec<ClientUpdate> = perm.iter().map(|&i| ups[i].clone()).collect();
            for rule in all_rules(1) {
                let state = AggregatorState::new(rule.clone()).unwrap();
                let (a, _) = state.aggregate(&ups).unwrap();
                let (b, _) = state.aggregate(&shuffled).unwrap();
                prop_assert_eq!(a, b, "{}", rule.name());
            }
        }

        #[test]
        fn translation_equivariance(vs in instance(7, 3), shift in prop::collection::vec(-5.0..5.0f64, 3)) {
            let moved: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
            let rules: Vec<(&str, Box<dyn Fn(&[Vec<f64>]) -> ParamVector>)> = vec![
                ("mean", Box::new(|v: &[Vec<f64>]| agg_mean(v).unwrap())),
                ("krum", Box::new(|v: &[Vec<f64>]| agg_krum(v, 4).unwrap())),
                ("multikrum", Box::new(|v: &[Vec<f64>]| agg_multikrum(v, 3, 4).unwrap().0)),
                ("bulyan", Box::new(|v: &[Vec<f64>]| agg_bulyan(v, 1).unwrap())),
                ("cm", Box::new(|v: &[Vec<f64>]| agg_cm(v).unwrap())),
                ("tm", Box::new(|v: &[Vec<f64>]| agg_tm(v, 2).unwrap())),
                ("rfa", Box::new(|v: &[Vec<f64>]| agg_rfa(v, RfaParams { eps: 1e-12, max_iters: 1000, tol: 1e-12 }).unwrap())),
            ];
            for (name, f) in rules {
                let a = f(&vs);
                let b = f(&moved);
                for c in 0..3 {
                    prop_assert!((a[c] + shift[c] - b[c]).abs() < 1e-6, "{} coord {}", name, c);
                }
            }
        }

        #[test]
        fn cm_tm_breakdown(b in prop::collection::vec(-3.0..3.0f64, 4), byz in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 4), 0..4)) {
            let mut vs = vec![b.clone(); 5];
            vs.extend(byz.iter().cloned());
            let k_m = byz.len();
            prop_assert_eq!(agg_cm(&vs).unwrap().into_vec(), b.clone());
            prop_assert_eq!(agg_tm(&vs, k_m).unwrap().into_vec(), b);
        }

        #[test]
        fn cc_single_iteration_stays_in_ball(vs in instance(6, 4), r in prop::collection::vec(-3.0..3.0f64, 4), tau in 0.1..3.0f64) {
            let out = agg_cc(&vs, &r, tau, 1).unwrap();
            prop_assert!(dist(&out, &r) <= tau * (1.0 + 1e-12));
        }

        #[test]
        fn cc_iterations_move_at_most_tau_each(vs in instance(6, 4), r in prop::collection::vec(-3.0..3.0f64, 4), iters in 1usize..5) {
            let out = agg_cc(&vs, &r, 1.0, iters).unwrap();
            prop_assert!(dist(&out, &r) <= iters as f64 * (1.0 + 1e-12));
        }

        #[test]
        fn rfa_not_worse_than_mean(vs in instance(5, 3)) {
            let x = agg_rfa(&vs, RfaParams::default()).unwrap();
            let m = agg_mean(&vs).unwrap();
            prop_assert!(rfa_objective(&x, &vs) <= rfa_objective(&m, &vs));
        }

        #[test]
        fn median_is_bounded(vs in instance(6, 3)) {
            let m = agg_cm(&vs).unwrap();
            for c in 0..3 {
                let lo = vs.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = vs.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= m[c] && m[c] <= hi);
            }
        }

        #[test]
        fn signsgd_outputs_are_signs(vs in instance(5, 6)) {
            let s = agg_signsgd(&vs).unwrap();
            prop_assert!(s.iter().all(|x| [-1.0, 0.0, 1.0].contains(x)));
        }
    }
}
