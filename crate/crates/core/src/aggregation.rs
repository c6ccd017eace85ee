//! Dataset-level context aggregation and the fusion function.
//!
//! A classification head predicts per-pixel class probabilities; these mix
//! the memory rows into a coarse context per pixel, which an attention step
//! refines against the pixel representations. The result is fused with the
//! original representations (and optional within-image context).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::FeatureMemory;
use crate::numerics::ops::{
    affine_1x1, affine_1x1_backward, relu, relu_backward, softmax, softmax_backward, softmax_rows_inplace,
};
use crate::numerics::{Parameter, Tensor};

pub(crate) type Visitor<'a> = dyn FnMut(&str, &mut Parameter) + 'a;

/// Weight/bias pair of a 1×1 convolution, He-uniform initialized.
pub(crate) fn affine_params<R: Rng>(cout: usize, cin: usize, rng: &mut R) -> (Parameter, Parameter) {
    let bound = (6.0 / cin as f64).sqrt();
    (
        Parameter::new(Tensor::uniform(&[cout, cin], bound, rng)),
        Parameter::new(Tensor::zeros(&[cout])),
    )
}

/// Per-position class probabilities, `K×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub probs: Tensor,
}

impl WeightMap {
    pub fn num_classes(&self) -> usize {
        self.probs.channels()
    }

    /// Largest deviation of a per-position class sum from 1.
    pub fn normalization_error(&self) -> f64 {
        max_column_sum_error(&self.probs)
    }
}

/// Largest `|Σ_k x[k, p] − 1|` over positions `p` of a channel-major tensor.
pub fn max_column_sum_error(x: &Tensor) -> f64 {
    let (k, n) = (x.channels(), x.positions());
    let d = x.data();
    (0..n)
        .map(|p| ((0..k).map(|c| d[c * n + p]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Two 1×1 convolutions with a rectifier between, then a softmax over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden_w: Parameter,
    pub hidden_b: Parameter,
    pub out_w: Parameter,
    pub out_b: Parameter,
}

pub struct HeadCache {
    input: Tensor,
    hidden: Tensor,
    probs: Tensor,
}

impl Head {
    pub fn new<R: Rng>(in_channels: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        let (hidden_w, hidden_b) = affine_params(hidden, in_channels, rng);
        let (out_w, out_b) = affine_params(num_classes, hidden, rng);
        Head {
            hidden_w,
            hidden_b,
            out_w,
            out_b,
        }
    }

    pub fn zeros(in_channels: usize, hidden: usize, num_classes: usize) -> Self {
        let z = |shape: &[usize]| Parameter::new(Tensor::zeros(shape));
        Head {
            hidden_w: z(&[hidden, in_channels]),
            hidden_b: z(&[hidden]),
            out_w: z(&[num_classes, hidden]),
            out_b: z(&[num_classes]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.hidden_w.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.out_w.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        let hidden = relu(&affine_1x1(x, &self.hidden_w, &self.hidden_b)?);
        let logits = affine_1x1(&hidden, &self.out_w, &self.out_b)?;
        let probs = softmax(&logits, 0)?;
        Ok((
            probs.clone(),
            HeadCache {
                input: x.clone(),
                hidden,
                probs,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache, dprobs: &Tensor) -> Tensor {
        let dlogits = softmax_backward(&cache.probs, dprobs, 0);
        let dhidden = affine_1x1_backward(&cache.hidden, &mut self.out_w, &mut self.out_b, &dlogits);
        let dpre = relu_backward(&cache.hidden, &dhidden);
        affine_1x1_backward(&cache.input, &mut self.hidden_w, &mut self.hidden_b, &dpre)
    }

    pub(crate) fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&format!("{prefix}.hidden.weight"), &mut self.hidden_w);
        f(&format!("{prefix}.hidden.bias"), &mut self.hidden_b);
        f(&format!("{prefix}.out.weight"), &mut self.out_w);
        f(&format!("{prefix}.out.bias"), &mut self.out_b);
    }
}

pub fn predict_weights(r: &Tensor, head: &Head) -> Result<WeightMap> {
    if r.channels() != head.in_channels() {
        return Err(Error::dim(
            "predict_weights",
            format!("features have {} channels, head expects {}", r.channels(), head.in_channels()),
        ));
    }
    Ok(WeightMap {
        probs: head.forward(r)?.0,
    })
}

/// Channel-major coarse context `C×n`: column `p` is `Σ_k w[k, p] · M[k]`.
pub(crate) fn coarse_channels(w: &Tensor, memory: &FeatureMemory) -> Result<Tensor> {
    let (k, c) = (memory.num_classes(), memory.dim());
    if w.channels() != k {
        return Err(Error::dim(
            "coarse_aggregate",
            format!("weight map has {} classes, memory has {k}", w.channels()),
        ));
    }
    let n = w.positions();
    let (wd, md) = (w.data(), memory.values().data());
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let orow = &mut out[ch * n..(ch + 1) * n];
        for class in 0..k {
            let m = md[class * c + ch];
            for (o, wv) in orow.iter_mut().zip(&wd[class * n..(class + 1) * n]) {
                *o += m * wv;
            }
        }
    }
    Tensor::from_vec(&[c, n], out)
}

/// Backward of [`coarse_channels`]. Returns the gradient w.r.t. the weight
/// map; the memory receives gradient only if its parameter is trainable.
pub(crate) fn coarse_channels_backward(
    w: &Tensor,
    memory: &mut FeatureMemory,
    dcoarse: &Tensor,
) -> Tensor {
    let (k, c) = (memory.num_classes(), memory.dim());
    let n = w.positions();
    let gd = dcoarse.data();
    let mut dw = Tensor::zeros(w.shape());
    {
        let md = memory.values().data();
        let dwd = dw.data_mut();
        for class in 0..k {
            let drow = &mut dwd[class * n..(class + 1) * n];
            for ch in 0..c {
                let m = md[class * c + ch];
                for (d, g) in drow.iter_mut().zip(&gd[ch * n..(ch + 1) * n]) {
                    *d += m * g;
                }
            }
        }
    }
    let param = memory.parameter_mut();
    if param.trainable {
        let wd = w.data();
        for class in 0..k {
            for ch in 0..c {
                let g: f64 = wd[class * n..(class + 1) * n]
                    .iter()
                    .zip(&gd[ch * n..(ch + 1) * n])
                    .map(|(a, b)| a * b)
                    .sum();
                param.accumulate_at(class * c + ch, g);
            }
        }
    }
    dw
}

/// `permute(W) ⊗ M`: the `(h·w)×C` probability-weighted mixture of memory rows.
pub fn coarse_aggregate(w: &WeightMap, memory: &FeatureMemory) -> Result<Tensor> {
    Ok(coarse_channels(&w.probs, memory)?.transpose())
}

/// Query/key/value/output projections of the refinement attention.
/// Queries, keys and values live in a `C/2`-dimensional space.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub q_w: Parameter,
    pub q_b: Parameter,
    pub k_w: Parameter,
    pub k_b: Parameter,
    pub v_w: Parameter,
    pub v_b: Parameter,
    pub o_w: Parameter,
    pub o_b: Parameter,
}

pub struct AttentionCache {
    r: Tensor,
    coarse: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Row-stochastic `n×n` attention matrix.
    pub p: Tensor,
    z: Tensor,
}

impl AttentionParams {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "attention needs an even channel count, got {channels}"
            )));
        }
        let d = channels / 2;
        let (q_w, q_b) = affine_params(d, channels, rng);
        let (k_w, k_b) = affine_params(d, channels, rng);
        let (v_w, v_b) = affine_params(d, channels, rng);
        let (o_w, o_b) = affine_params(channels, d, rng);
        Ok(AttentionParams {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        })
    }

    pub fn channels(&self) -> usize {
        self.q_w.shape()[1]
    }

    fn key_dim(&self) -> usize {
        self.q_w.shape()[0]
    }

    /// `r` is `C×h×w`, `coarse` is channel-major `C×(h·w)`.
    pub fn forward(&self, r: &Tensor, coarse: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let c = self.channels();
        if r.channels() != c || coarse.channels() != c || r.positions() != coarse.positions() {
            return Err(Error::dim(
                "refine_context",
                format!("features {:?}, coarse context {:?}, C = {c}", r.shape(), coarse.shape()),
            ));
        }
        let n = r.positions();
        let d = self.key_dim();
        let r_flat = r.clone().reshape(&[c, n])?;
        let q = affine_1x1(&r_flat, &self.q_w, &self.q_b)?;
        let k = affine_1x1(coarse, &self.k_w, &self.k_b)?;
        let v = affine_1x1(coarse, &self.v_w, &self.v_b)?;
        let scale = 1.0 / (d as f64).sqrt();

        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut p[i * n..(i + 1) * n];
            for dd in 0..d {
                let s = qd[dd * n + i] * scale;
                for (o, kv) in row.iter_mut().zip(&kd[dd * n..(dd + 1) * n]) {
                    *o += s * kv;
                }
            }
        }
        softmax_rows_inplace(&mut p, n);
        let mut z = vec![0.0; d * n];
        for dd in 0..d {
            let vrow = &vd[dd * n..(dd + 1) * n];
            for i in 0..n {
                z[dd * n + i] = p[i * n..(i + 1) * n].iter().zip(vrow).map(|(a, b)| a * b).sum();
            }
        }
        let z = Tensor::from_vec(&[d, n], z)?;
        let out = affine_1x1(&z, &self.o_w, &self.o_b)?.reshape(r.shape())?;
        Ok((
            out,
            AttentionCache {
                r: r_flat,
                coarse: coarse.clone(),
                q,
                k,
                v,
                p: Tensor::from_vec(&[n, n], p)?,
                z,
            },
        ))
    }

    /// Returns gradients w.r.t. `r` (shaped `C×n`) and the coarse context.
    pub fn backward(&mut self, cache: &AttentionCache, dout: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.channels();
        let d = self.key_dim();
        let n = cache.r.positions();
        let scale = 1.0 / (d as f64).sqrt();
        let dout = dout.clone().reshape(&[c, n])?;
        let dz = affine_1x1_backward(&cache.z, &mut self.o_w, &mut self.o_b, &dout);
        let (pd, vd, qd, kd, dzd) = (cache.p.data(), cache.v.data(), cache.q.data(), cache.k.data(), dz.data());

        let mut dv = vec![0.0; d * n];
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            let prow = &pd[i * n..(i + 1) * n];
            let dsrow = &mut ds[i * n..(i + 1) * n];
            for dd in 0..d {
                let g = dzd[dd * n + i];
                for (o, vv) in dsrow.iter_mut().zip(&vd[dd * n..(dd + 1) * n]) {
                    *o += g * vv;
                }
                for (o, pv) in dv[dd * n..(dd + 1) * n].iter_mut().zip(prow) {
                    *o += g * pv;
                }
            }
            // softmax backward on the row, folded with the score scale
            let dot: f64 = dsrow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (o, pv) in dsrow.iter_mut().zip(prow) {
                *o = pv * (*o - dot) * scale;
            }
        }
        let mut dq = vec![0.0; d * n];
        let mut dk = vec![0.0; d * n];
        for i in 0..n {
            let dsrow = &ds[i * n..(i + 1) * n];
            for dd in 0..d {
                dq[dd * n + i] = dsrow.iter().zip(&kd[dd * n..(dd + 1) * n]).map(|(a, b)| a * b).sum();
                let qv = qd[dd * n + i];
                for (o, s) in dk[dd * n..(dd + 1) * n].iter_mut().zip(dsrow) {
                    *o += qv * s;
                }
            }
        }
        let dq = Tensor::from_vec(&[d, n], dq)?;
        let dk = Tensor::from_vec(&[d, n], dk)?;
        let dv = Tensor::from_vec(&[d, n], dv)?;
        let dr = affine_1x1_backward(&cache.r, &mut self.q_w, &mut self.q_b, &dq);
        let mut dcoarse = affine_1x1_backward(&cache.coarse, &mut self.k_w, &mut self.k_b, &dk);
        dcoarse.add_assign(&affine_1x1_backward(&cache.coarse, &mut self.v_w, &mut self.v_b, &dv));
        Ok((dr, dcoarse))
    }

    pub(crate) fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&format!("{prefix}.query.weight"), &mut self.q_w);
        f(&format!("{prefix}.query.bias"), &mut self.q_b);
        f(&format!("{prefix}.key.weight"), &mut self.k_w);
        f(&format!("{prefix}.key.bias"), &mut self.k_b);
        f(&format!("{prefix}.value.weight"), &mut self.v_w);
        f(&format!("{prefix}.value.bias"), &mut self.v_b);
        f(&format!("{prefix}.out.weight"), &mut self.o_w);
        f(&format!("{prefix}.out.bias"), &mut self.o_b);
    }
}

/// Refines the `(h·w)×C` coarse context against the pixel representations
/// `r` (`C×h×w`); returns the refined context as `C×h×w`.
pub fn refine_context(r: &Tensor, coarse: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    if coarse.rank() != 2 {
        return Err(Error::dim("refine_context", format!("coarse context {:?}", coarse.shape())));
    }
    Ok(params.forward(r, &coarse.transpose())?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Add,
    WeightedAdd,
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionMode::Add),
            "weighted_add" => Ok(FusionMode::WeightedAdd),
            "concat" => Ok(FusionMode::Concat),
            _ => Err(Error::Validation(format!(
                "unknown fusion mode {s:?} (add | weighted_add | concat)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Add => "add",
            FusionMode::WeightedAdd => "weighted_add",
            FusionMode::Concat => "concat",
        })
    }
}

/// Fusion of `streams` feature maps of `channels` channels each.
///
/// `WeightedAdd` predicts a gate `2·sigmoid(z)` for every channel of every
/// stream from the concatenated inputs with a 1×1 convolution. Gate weights
/// start at zero, so an untrained weighted add equals plain add.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub mode: FusionMode,
    streams: usize,
    channels: usize,
    pub gate_w: Option<Parameter>,
    pub gate_b: Option<Parameter>,
}

pub struct FusionCache {
    concat: Option<Tensor>,
    gates: Option<Tensor>,
    inputs: Vec<Tensor>,
}

fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let mut shape = inputs[0].shape().to_vec();
    shape[0] = inputs.iter().map(|t| t.channels()).sum();
    let data: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

fn split_channels(t: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let c = t.channels() / parts;
    let mut shape = t.shape().to_vec();
    shape[0] = c;
    let chunk = t.len() / parts;
    t.data()
        .chunks(chunk)
        .map(|d| Tensor::from_vec(&shape, d.to_vec()))
        .collect()
}

fn gate(x: f64) -> f64 {
    2.0 / (1.0 + (-x).exp())
}

impl Fusion {
    pub fn new(mode: FusionMode, streams: usize, channels: usize) -> Self {
        let (gate_w, gate_b) = if mode == FusionMode::WeightedAdd {
            let width = streams * channels;
            (
                Some(Parameter::new(Tensor::zeros(&[width, width]))),
                Some(Parameter::new(Tensor::zeros(&[width]))),
            )
        } else {
            (None, None)
        };
        Fusion {
            mode,
            streams,
            channels,
            gate_w,
            gate_b,
        }
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    pub fn out_channels(&self) -> usize {
        match self.mode {
            FusionMode::Concat => self.streams * self.channels,
            FusionMode::Add | FusionMode::WeightedAdd => self.channels,
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, FusionCache)> {
        if inputs.len() != self.streams
            || inputs.iter().any(|t| t.shape() != inputs[0].shape() || t.channels() != self.channels)
        {
            return Err(Error::dim(
                "fuse",
                format!(
                    "expected {} inputs of {} channels, got {:?}",
                    self.streams,
                    self.channels,
                    inputs.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        match self.mode {
            FusionMode::Add => {
                let mut out = inputs[0].clone();
                for t in &inputs[1..] {
                    out.add_assign(t);
                }
                Ok((out, FusionCache { concat: None, gates: None, inputs: Vec::new() }))
            }
            FusionMode::Concat => Ok((
                concat_channels(inputs)?,
                FusionCache { concat: None, gates: None, inputs: Vec::new() },
            )),
            FusionMode::WeightedAdd => {
                let cat = concat_channels(inputs)?;
                let (gw, gb) = (self.gate_w.as_ref().expect("gate"), self.gate_b.as_ref().expect("gate"));
                let mut gates = affine_1x1(&cat, gw, gb)?;
                gates.data_mut().iter_mut().for_each(|v| *v = gate(*v));
                let chunk = inputs[0].len();
                let mut out = Tensor::zeros(inputs[0].shape());
                for (s, x) in inputs.iter().enumerate() {
                    let g = &gates.data()[s * chunk..(s + 1) * chunk];
                    for ((o, gv), xv) in out.data_mut().iter_mut().zip(g).zip(x.data()) {
                        *o += gv * xv;
                    }
                }
                Ok((
                    out,
                    FusionCache {
                        concat: Some(cat),
                        gates: Some(gates),
                        inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                    },
                ))
            }
        }
    }

    /// Gradients for each input stream, in input order.
    pub fn backward(&mut self, cache: &FusionCache, dout: &Tensor) -> Result<Vec<Tensor>> {
        match self.mode {
            FusionMode::Add => Ok(vec![dout.clone(); self.streams]),
            FusionMode::Concat => split_channels(dout, self.streams),
            FusionMode::WeightedAdd => {
                let gates = cache.gates.as_ref().expect("weighted cache");
                let cat = cache.concat.as_ref().expect("weighted cache");
                let chunk = dout.len();
                let mut dgate = Tensor::zeros(gates.shape());
                let mut direct = Vec::with_capacity(self.streams);
                for (s, x) in cache.inputs.iter().enumerate() {
                    let g = &gates.data()[s * chunk..(s + 1) * chunk];
                    let mut dx = dout.clone();
                    for ((d, gv), (dg, xv)) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(dgate.data_mut()[s * chunk..(s + 1) * chunk].iter_mut().zip(x.data()))
                    {
                        *dg = *d * xv * gv * (1.0 - 0.5 * gv);
                        *d *= gv;
                    }
                    direct.push(dx);
                }
                let gw = self.gate_w.as_mut().expect("gate");
                let gb = self.gate_b.as_mut().expect("gate");
                let dcat = affine_1x1_backward(cat, gw, gb, &dgate);
                let via_gate = split_channels(&dcat, self.streams)?;
                for (d, v) in direct.iter_mut().zip(&via_gate) {
                    d.add_assign(v);
                }
                Ok(direct)
            }
        }
    }

    pub(crate) fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        if let (Some(w), Some(b)) = (self.gate_w.as_mut(), self.gate_b.as_mut()) {
            f(&format!("{prefix}.gate.weight"), w);
            f(&format!("{prefix}.gate.bias"), b);
        }
    }
}

/// Fuses pixel representations with beyond-image context and, when given,
/// within-image context.
pub fn fuse(r: &Tensor, c_bi: &Tensor, c_wi: Option<&Tensor>, fusion: &Fusion) -> Result<Tensor> {
    let mut inputs = vec![r, c_bi];
    if let Some(c) = c_wi {
        inputs.push(c);
    }
    Ok(fusion.forward(&inputs)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, Differentiable};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, 1.0, rng)
    }

    fn random_weights(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        softmax(&random(&[k, n], rng), 0).unwrap()
    }

    /// Direct evaluation of the attention refinement with scalar loops.
    fn oracle_refine(r: &Tensor, coarse_nc: &Tensor, a: &AttentionParams) -> Tensor {
        let c = r.channels();
        let n = r.positions();
        let d = c / 2;
        let rf = r.clone().reshape(&[c, n]).unwrap();
        let proj = |w: &Parameter, b: &Parameter, get: &dyn Fn(usize, usize) -> f64, rows: usize, cols: usize| {
            let mut out = vec![vec![0.0; rows]; n];
            for p in 0..n {
                for o in 0..rows {
                    let mut s = b.value.data()[o];
                    for i in 0..cols {
                        s += w.value.at2(o, i) * get(p, i);
                    }
                    out[p][o] = s;
                }
            }
            out
        };
        let q = proj(&a.q_w, &a.q_b, &|p, i| rf.at2(i, p), d, c);
        let k = proj(&a.k_w, &a.k_b, &|p, i| coarse_nc.at2(p, i), d, c);
        let v = proj(&a.v_w, &a.v_b, &|p, i| coarse_nc.at2(p, i), d, c);
        let mut out = Tensor::zeros(&[c, n]);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() / ((c as f64) / 2.0).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..d).map(|t| (0..n).map(|j| e[j] / z * v[j][t]).sum()).collect();
            for o in 0..c {
                let mut s = a.o_b.value.data()[o];
                for t in 0..d {
                    s += a.o_w.value.at2(o, t) * mixed[t];
                }
                out.data_mut()[o * n + i] = s;
            }
        }
        out.reshape(r.shape()).unwrap()
    }

    #[test]
    fn zero_head_is_uniform_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random(&[4, 3, 3], &mut rng);
        let w = predict_weights(&r, &Head::zeros(4, 4, 5)).unwrap();
        assert!(w.probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let head = Head::new(4, 6, 3, &mut rng);
        let w = predict_weights(&r, &head).unwrap();
        assert!(w.normalization_error() < 1e-12);
        assert_eq!(predict_weights(&r, &head).unwrap(), w);
        assert!(predict_weights(&random(&[3, 2, 2], &mut rng), &head).is_err());
    }

    #[test]
    fn coarse_selection_and_uniform_cases() {
        let mem = FeatureMemory::new(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 4.0]]).unwrap()).unwrap();
        let w = WeightMap {
            probs: Tensor::from_vec(&[3, 1, 2], vec![0.0, 1.0 / 3.0, 1.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]).unwrap(),
        };
        let c = coarse_aggregate(&w, &mem).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.row(0), mem.row(1));
        assert_abs_diff_eq!(c.row(1)[0], -2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.row(1)[1], 6.5 / 3.0, epsilon = 1e-15);
        let bad = WeightMap { probs: Tensor::full(&[2, 1, 2], 0.5) };
        assert!(coarse_aggregate(&bad, &mem).is_err());
    }

    #[test]
    fn coarse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (k, c, h, wd) = (rng.gen_range(2..=5), rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let mem = FeatureMemory::from_raw(random(&[k, c], &mut rng));
            let probs = random_weights(k, h * wd, &mut rng).reshape(&[k, h, wd]).unwrap();
            let got = coarse_aggregate(&WeightMap { probs: probs.clone() }, &mem).unwrap();
            for p in 0..h * wd {
                for ch in 0..c {
                    let want: f64 = (0..k).map(|cl| probs.data()[cl * h * wd + p] * mem.values().at2(cl, ch)).sum();
                    assert_abs_diff_eq!(got.at2(p, ch), want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn refine_single_position_is_value_then_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = AttentionParams::new(4, &mut rng).unwrap();
        let r = random(&[4, 1, 1], &mut rng);
        let coarse = random(&[1, 4], &mut rng);
        let (out, cache) = a.forward(&r, &coarse.transpose()).unwrap();
        assert_eq!(cache.p.data(), &[1.0]);
        let v = affine_1x1(&coarse.transpose(), &a.v_w, &a.v_b).unwrap();
        let want = affine_1x1(&v, &a.o_w, &a.o_b).unwrap();
        assert!(out.reshape(&[4, 1]).unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn refine_identical_contexts_ignores_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = AttentionParams::new(4, &mut rng).unwrap();
        let row = random(&[1, 4], &mut rng);
        let coarse = Tensor::from_rows(&vec![row.row(0).to_vec(); 6]).unwrap();
        let r1 = random(&[4, 2, 3], &mut rng);
        let r2 = random(&[4, 2, 3], &mut rng);
        let o1 = refine_context(&r1, &coarse, &a).unwrap();
        let o2 = refine_context(&r2, &coarse, &a).unwrap();
        assert!(o1.max_abs_diff(&o2) < 1e-12);
        for ch in 0..4 {
            let plane = o1.row(ch);
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn refine_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..20 {
            let c = 2 * rng.gen_range(1..=4);
            let (h, w) = if case == 0 { (2, 2) } else { (rng.gen_range(1..=4), rng.gen_range(1..=4)) };
            let a = AttentionParams::new(c, &mut rng).unwrap();
            let r = random(&[c, h, w], &mut rng);
            let coarse = random(&[h * w, c], &mut rng);
            let got = refine_context(&r, &coarse, &a).unwrap();
            let want = oracle_refine(&r, &coarse, &a);
            assert!(got.max_abs_diff(&want) < 1e-12, "case {case}");
        }
        assert!(AttentionParams::new(5, &mut rng).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = AttentionParams::new(6, &mut rng).unwrap();
        let r = random(&[6, 3, 3], &mut rng);
        let coarse = random(&[6, 9], &mut rng);
        let (_, cache) = a.forward(&r, &coarse).unwrap();
        for i in 0..9 {
            assert_abs_diff_eq!(cache.p.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fuse_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random(&[3, 2, 2], &mut rng);
        let cbi = random(&[3, 2, 2], &mut rng);
        let cwi = random(&[3, 2, 2], &mut rng);

        let add = Fusion::new(FusionMode::Add, 2, 3);
        assert_eq!(fuse(&r, &Tensor::zeros(&[3, 2, 2]), None, &add).unwrap(), r);

        let cat2 = Fusion::new(FusionMode::Concat, 2, 3);
        let cat3 = Fusion::new(FusionMode::Concat, 3, 3);
        assert_eq!(fuse(&r, &cbi, None, &cat2).unwrap().channels(), 6);
        assert_eq!(fuse(&r, &cbi, Some(&cwi), &cat3).unwrap().channels(), 9);
        assert_eq!(cat3.out_channels(), 9);

        // gates forced equal through a shared bias: weighted add is a multiple of plain add
        let mut weighted = Fusion::new(FusionMode::WeightedAdd, 2, 3);
        let plain = fuse(&r, &cbi, None, &add).unwrap();
        assert!(fuse(&r, &cbi, None, &weighted).unwrap().max_abs_diff(&plain) < 1e-15);
        weighted.gate_b.as_mut().unwrap().value = Tensor::full(&[6], -0.7);
        let got = fuse(&r, &cbi, None, &weighted).unwrap();
        let factor = 2.0 / (1.0 + 0.7f64.exp());
        for (g, p) in got.data().iter().zip(plain.data()) {
            assert_abs_diff_eq!(*g, factor * p, epsilon = 1e-14);
        }
        assert!(fuse(&r, &cbi, Some(&cwi), &add).is_err());
        assert!(fuse(&r, &random(&[3, 1, 4], &mut rng), None, &add).is_err());
    }

    /// Σ sin(refine(r, coarse)) differentiated w.r.t. the projections, `r` and `coarse`.
    struct RefineObjective {
        attn: AttentionParams,
        r: Parameter,
        coarse: Parameter,
    }

    impl Differentiable for RefineObjective {
        fn loss(&self) -> Result<f64> {
            let (out, _) = self.attn.forward(&self.r.value, &self.coarse.value)?;
            Ok(out.data().iter().map(|v| v.sin()).sum())
        }

        fn loss_and_grad(&mut self) -> Result<f64> {
            self.visit_params_mut(&mut |_, p| p.zero_grad());
            let (out, cache) = self.attn.forward(&self.r.value, &self.coarse.value)?;
            let dout = Tensor::from_vec(out.shape(), out.data().iter().map(|v| v.cos()).collect())?;
            let (dr, dc) = self.attn.backward(&cache, &dout)?;
            self.r.accumulate(dr.data());
            self.coarse.accumulate(dc.data());
            Ok(out.data().iter().map(|v| v.sin()).sum())
        }

        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
            self.attn.visit("attn", f);
            f("r", &mut self.r);
            f("coarse", &mut self.coarse);
        }
    }

    #[test]
    fn attention_backward_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut obj = RefineObjective {
            attn: AttentionParams::new(4, &mut rng).unwrap(),
            r: Parameter::new(random(&[4, 2, 3], &mut rng)),
            coarse: Parameter::new(random(&[4, 6], &mut rng)),
        };
        let rep = grad_check(&mut obj, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    struct FuseObjective {
        fusion: Fusion,
        xs: Vec<Parameter>,
        head: Head,
    }

    impl Differentiable for FuseObjective {
        fn loss(&self) -> Result<f64> {
            let ins: Vec<&Tensor> = self.xs.iter().map(|p| &p.value).collect();
            let (f, _) = self.fusion.forward(&ins)?;
            let (p, _) = self.head.forward(&f)?;
            Ok(p.data().iter().enumerate().map(|(i, v)| (i as f64 * 0.37).cos() * v).sum())
        }

        fn loss_and_grad(&mut self) -> Result<f64> {
            self.visit_params_mut(&mut |_, p| p.zero_grad());
            let ins: Vec<Tensor> = self.xs.iter().map(|p| p.value.clone()).collect();
            let refs: Vec<&Tensor> = ins.iter().collect();
            let (f, fc) = self.fusion.forward(&refs)?;
            let (p, hc) = self.head.forward(&f)?;
            let dp = Tensor::from_vec(p.shape(), (0..p.len()).map(|i| (i as f64 * 0.37).cos()).collect())?;
            let df = self.head.backward(&hc, &dp);
            for (x, g) in self.xs.iter_mut().zip(self.fusion.backward(&fc, &df)?) {
                x.accumulate(g.data());
            }
            Ok(p.data().iter().enumerate().map(|(i, v)| (i as f64 * 0.37).cos() * v).sum())
        }

        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
            self.fusion.visit("fusion", f);
            self.head.visit("head", f);
            for (i, x) in self.xs.iter_mut().enumerate() {
                f(&format!("x{i}"), x);
            }
        }
    }

    #[test]
    fn fusion_and_head_backward_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [FusionMode::Add, FusionMode::WeightedAdd, FusionMode::Concat] {
            for streams in [2, 3] {
                let mut fusion = Fusion::new(mode, streams, 3);
                if let Some(w) = fusion.gate_w.as_mut() {
                    w.value = random(w.shape(), &mut rng);
                }
                let head = Head::new(fusion.out_channels(), 5, 3, &mut rng);
                let mut obj = FuseObjective {
                    fusion,
                    xs: (0..streams).map(|_| Parameter::new(random(&[3, 2, 2], &mut rng))).collect(),
                    head,
                };
                let rep = grad_check(&mut obj, 1e-5).unwrap();
                assert!(rep.max_rel_error < 1e-3, "{mode} x{streams}: {rep:?}");
            }
        }
    }

    #[test]
    fn coarse_backward_leaves_frozen_memory_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut mem = FeatureMemory::from_raw(random(&[3, 4], &mut rng));
        let w = random_weights(3, 5, &mut rng);
        let g = random(&[4, 5], &mut rng);
        let dw = coarse_channels_backward(&w, &mut mem, &g);
        assert!(mem.grad().data().iter().all(|&v| v == 0.0));
        // dW[k, p] = Σ_c M[k, c] g[c, p]
        for k in 0..3 {
            for p in 0..5 {
                let want: f64 = (0..4).map(|c| mem.values().at2(k, c) * g.at2(c, p)).sum();
                assert_abs_diff_eq!(dw.at2(k, p), want, epsilon = 1e-12);
            }
        }
        // with the memory made trainable, its gradient is W ⊗ gᵀ
        mem.parameter_mut().trainable = true;
        coarse_channels_backward(&w, &mut mem, &g);
        for k in 0..3 {
            for c in 0..4 {
                let want: f64 = (0..5).map(|p| w.at2(k, p) * g.at2(c, p)).sum();
                assert_abs_diff_eq!(mem.grad().at2(k, c), want, epsilon = 1e-12);
            }
        }
    }
}
