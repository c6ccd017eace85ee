//! The feature memory: one dataset-level representation per class, kept up
//! to date with a cosine-weighted class composite and a polynomially
//! annealed moving average. Memory values never receive gradient updates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::IGNORE_LABEL;
use crate::numerics::{Parameter, Tensor};
use crate::seeding::rng_for;

/// `K×C` store of class representations.
///
/// The values live in a frozen [`Parameter`] so that the pipeline can route
/// gradients towards them like any other input while the buffer is
/// guaranteed to stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMemory {
    values: Parameter,
    update_count: u64,
}

impl FeatureMemory {
    pub fn new(values: Tensor) -> Result<Self> {
        Self::with_count(values, 0)
    }

    pub fn with_count(values: Tensor, update_count: u64) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim("memory", format!("expected K×C, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite { op: "memory init".into() });
        }
        for k in 0..values.shape()[0] {
            if values.row(k).iter().all(|&v| v == 0.0) {
                return Err(Error::Validation(format!("memory row {k} is all zero")));
            }
        }
        Ok(FeatureMemory {
            values: Parameter::frozen(values),
            update_count,
        })
    }

    /// Builds a memory without the nonzero-row check (test fixtures, ablations).
    pub fn from_raw(values: Tensor) -> Self {
        FeatureMemory {
            values: Parameter::frozen(values),
            update_count: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values.value
    }

    /// Gradient buffer attached to the memory values; stays all-zero.
    pub fn grad(&self) -> &Tensor {
        &self.values.grad
    }

    pub fn parameter(&self) -> &Parameter {
        &self.values
    }

    pub(crate) fn parameter_mut(&mut self) -> &mut Parameter {
        &mut self.values
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.values.value.row(k)
    }

    /// Pairwise cosine similarity between memory rows (`K×K`).
    pub fn cosine_matrix(&self) -> Tensor {
        let k = self.num_classes();
        let mut out = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in 0..k {
                out.data_mut()[i * k + j] = cosine(self.row(i), self.row(j));
            }
        }
        out
    }
}

/// Polynomially annealed momentum: starts at `m0`, ends at `m0 / 100`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub m0: f64,
    pub power: f64,
    pub total_iters: u64,
}

impl MomentumSchedule {
    pub fn new(m0: f64, power: f64, total_iters: u64) -> Result<Self> {
        if !(m0 > 0.0 && m0 < 1.0) {
            return Err(Error::Range {
                what: "m0",
                value: m0,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::Validation(format!("momentum power must be > 0, got {power}")));
        }
        if total_iters == 0 {
            return Err(Error::Validation("momentum schedule needs T >= 1".into()));
        }
        Ok(MomentumSchedule {
            m0,
            power,
            total_iters,
        })
    }

    pub fn at(&self, t: u64) -> Result<f64> {
        momentum_at(self, t)
    }
}

pub fn momentum_at(s: &MomentumSchedule, t: u64) -> Result<f64> {
    if t > s.total_iters {
        return Err(Error::Range {
            what: "iteration",
            value: t as f64,
            lo: 0.0,
            hi: s.total_iters as f64,
        });
    }
    let floor = s.m0 / 100.0;
    let frac = 1.0 - t as f64 / s.total_iters as f64;
    Ok(frac.powf(s.power) * (s.m0 - floor) + floor)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mixing weights `(1 - S_i) / Σ_j (1 - S_j)` of the class composite, or
/// `None` when every representation is parallel to the memory row.
pub fn composite_weights(reps: &Tensor, memory_row: &[f64]) -> Option<Vec<f64>> {
    let n = reps.shape()[0];
    let dissim: Vec<f64> = (0..n).map(|i| 1.0 - cosine(reps.row(i), memory_row)).collect();
    let denom: f64 = dissim.iter().sum();
    if denom <= f64::EPSILON * n as f64 {
        return None;
    }
    Some(dissim.into_iter().map(|d| d / denom).collect())
}

fn weighted_rows(reps: &Tensor, weights: &[f64]) -> Tensor {
    let c = reps.shape()[1];
    let mut out = vec![0.0; c];
    for (i, &w) in weights.iter().enumerate() {
        for (o, r) in out.iter_mut().zip(reps.row(i)) {
            *o += w * r;
        }
    }
    Tensor::from_vec(&[c], out).expect("c > 0")
}

fn mean_rows(reps: &Tensor) -> Tensor {
    let n = reps.shape()[0];
    weighted_rows(reps, &vec![1.0 / n as f64; n])
}

/// Cosine-weighted composite of one class's pixel representations
/// (`N×C`): pixels less similar to the current memory row weigh more.
/// Falls back to the plain mean when all pixels are parallel to the row.
pub fn class_update_vector(reps: &Tensor, memory_row: &[f64]) -> Result<Tensor> {
    if reps.rank() != 2 || reps.shape()[1] != memory_row.len() {
        return Err(Error::dim(
            "class_update_vector",
            format!("reps {:?}, memory row of length {}", reps.shape(), memory_row.len()),
        ));
    }
    Ok(match composite_weights(reps, memory_row) {
        Some(w) => weighted_rows(reps, &w),
        None => mean_rows(reps),
    })
}

/// Maps a batch of pixel representations (`n×C`) with labels onto a `K×C`
/// composite. Rows of classes absent from `labels` are copied from memory.
pub fn transform(feats: &Tensor, labels: &[u8], memory: &FeatureMemory, use_cosine: bool) -> Result<Tensor> {
    let (k, c) = (memory.num_classes(), memory.dim());
    if feats.rank() != 2 || feats.shape()[0] != labels.len() || feats.shape()[1] != c {
        return Err(Error::dim(
            "transform",
            format!(
                "features {:?}, {} labels, memory {k}x{c}",
                feats.shape(),
                labels.len()
            ),
        ));
    }
    let mut out = memory.values().clone();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let l = l as usize;
        if l >= k {
            return Err(Error::Validation(format!("label {l} out of range for {k} classes")));
        }
        members[l].push(i);
    }
    for (class, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut rows = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            rows.extend_from_slice(feats.row(i));
        }
        let reps = Tensor::from_vec(&[idx.len(), c], rows)?;
        let v = if use_cosine {
            class_update_vector(&reps, memory.row(class))?
        } else {
            mean_rows(&reps)
        };
        out.row_mut(class).copy_from_slice(v.data());
    }
    Ok(out)
}

/// Moving-average update `M ← (1 − m)·M + m·R'`.
pub fn update_memory(memory: &mut FeatureMemory, r_prime: &Tensor, momentum: f64) -> Result<()> {
    if r_prime.shape() != memory.values().shape() {
        return Err(Error::dim(
            "update_memory",
            format!("memory {:?}, composite {:?}", memory.values().shape(), r_prime.shape()),
        ));
    }
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::Range {
            what: "momentum",
            value: momentum,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if !r_prime.is_finite() {
        return Err(Error::NonFinite { op: "memory composite".into() });
    }
    let vals = memory.values.value.data_mut();
    for (v, r) in vals.iter_mut().zip(r_prime.data()) {
        *v += momentum * (r - *v);
    }
    memory.update_count += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    RandomPixel,
    Clustering,
}

/// Centroid of `reps` weighted by each row's (nonnegative) cosine
/// similarity to the plain mean.
pub fn similarity_weighted_centroid(reps: &Tensor) -> Tensor {
    let mean = mean_rows(reps);
    let n = reps.shape()[0];
    let w: Vec<f64> = (0..n).map(|i| cosine(reps.row(i), mean.data()).max(0.0)).collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return mean;
    }
    let w: Vec<f64> = w.into_iter().map(|x| x / total).collect();
    weighted_rows(reps, &w)
}

/// Initializes the memory from a stream of `(features C×n, labels n)` pairs
/// computed by the untrained backbone.
///
/// `RandomPixel` keeps one uniformly drawn pixel per class (reservoir
/// sampling, so the draw is uniform over the whole stream). `Clustering`
/// uses the similarity-weighted centroid of every pixel of the class.
/// Classes never observed get a seeded standard-normal vector.
pub fn init_memory<I>(stream: I, num_classes: usize, dim: usize, mode: InitMode, seed: u64) -> Result<FeatureMemory>
where
    I: IntoIterator<Item = Result<(Tensor, Vec<u8>)>>,
{
    let mut rng = rng_for(seed, "memory-init");
    let mut picked: Vec<Option<Vec<f64>>> = vec![None; num_classes];
    let mut seen = vec![0u64; num_classes];
    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let mut any = false;
    for item in stream {
        let (feats, labels) = item?;
        any = true;
        if feats.channels() != dim || feats.positions() != labels.len() {
            return Err(Error::dim(
                "init_memory",
                format!("features {:?} with {} labels, dim {dim}", feats.shape(), labels.len()),
            ));
        }
        let pixels = feats.channels_last();
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::Validation(format!("label {l} out of range for {num_classes} classes")));
            }
            match mode {
                InitMode::RandomPixel => {
                    seen[l] += 1;
                    if rng.gen_range(0..seen[l]) == 0 {
                        picked[l] = Some(pixels.row(i).to_vec());
                    }
                }
                InitMode::Clustering => {
                    seen[l] += 1;
                    pools[l].extend_from_slice(pixels.row(i));
                }
            }
        }
    }
    if !any {
        return Err(Error::Validation("memory initialization needs a nonempty stream".into()));
    }
    let mut values = Vec::with_capacity(num_classes * dim);
    for k in 0..num_classes {
        let row = match mode {
            InitMode::RandomPixel => picked[k].take(),
            InitMode::Clustering if seen[k] > 0 => {
                let reps = Tensor::from_vec(&[seen[k] as usize, dim], std::mem::take(&mut pools[k]))?;
                Some(similarity_weighted_centroid(&reps).into_data())
            }
            InitMode::Clustering => None,
        };
        let row = match row {
            Some(r) if r.iter().any(|&v| v != 0.0) => r,
            _ => {
                log::warn!("class {k} has no usable pixel in the init stream; using a random vector");
                let mut r = rng_for(seed, &format!("memory-unseen-{k}"));
                (0..dim).map(|_| r.sample(StandardNormal)).collect()
            }
        };
        values.extend(row);
    }
    FeatureMemory::new(Tensor::from_vec(&[num_classes, dim], values)?)
}
