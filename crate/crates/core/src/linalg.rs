//! Dense vector arithmetic and index-wise statistics over client updates.
//!
//! Everything here is double precision with naive left-to-right
//! accumulation, so results depend only on the order of the inputs.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::model::LayerLayout;

/// Flat parameter (or update) vector, optionally tagged with the layer
/// layout it was flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Option<Arc<LayerLayout>>,
}

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data, layout: None }
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(vec![0.0; d])
    }

    pub fn with_layout(data: Vec<f64>, layout: Arc<LayerLayout>) -> Result<Self> {
        check_dim(layout.dim(), data.len())?;
        Ok(Self {
            data,
            layout: Some(layout),
        })
    }

    pub fn layout(&self) -> Option<&Arc<LayerLayout>> {
        self.layout.as_ref()
    }

    /// Re-tags the vector, keeping the data.
    pub fn set_layout(&mut self, layout: Option<Arc<LayerLayout>>) -> Result<()> {
        if let Some(l) = &layout {
            check_dim(l.dim(), self.data.len())?;
        }
        self.layout = layout;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("vector"));
    }
    Ok(norm(v))
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

pub fn angle_degrees(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_similarity(a, b)?.acos().to_degrees())
}

/// Coordinate-wise arithmetic mean.
pub fn index_mean<V: AsRef<[f64]>>(vs: &[V]) -> Result<ParamVector> {
    let d = common_dim(vs)?;
    let mut acc = vec![0.0; d];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v.as_ref()) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(ParamVector::new(acc))
}

/// Coordinate-wise population standard deviation (divides by `n`).
pub fn index_std<V: AsRef<[f64]>>(vs: &[V]) -> Result<ParamVector> {
    if vs.len() < 2 {
        return Err(Error::invalid(format!(
            "standard deviation needs at least 2 vectors, got {}",
            vs.len()
        )));
    }
    let mean = index_mean(vs)?;
    let mut acc = vec![0.0; mean.len()];
    for v in vs {
        for ((a, x), m) in acc.iter_mut().zip(v.as_ref()).zip(mean.iter()) {
            let e = x - m;
            *a += e * e;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a = (*a / n).sqrt());
    Ok(ParamVector::new(acc))
}

pub(crate) fn common_dim<V: AsRef<[f64]>>(vs: &[V]) -> Result<usize> {
    let first = vs.first().ok_or(Error::Empty("vector set"))?;
    let d = first.as_ref().len();
    for v in &vs[1..] {
        check_dim(d, v.as_ref().len())?;
    }
    Ok(d)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let e = x - y;
            e * e
        })
        .sum()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}
