//! The segmentation network: backbone, dataset-level context aggregation,
//! optional within-image context, fusion and the classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    affine_params, coarse_channels, coarse_channels_backward, AttentionCache, AttentionParams, Fusion,
    FusionCache, FusionMode, Head, HeadCache, Visitor, WeightMap,
};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::memory::FeatureMemory;
use crate::numerics::ops::{
    affine_1x1, affine_1x1_backward, conv3x3, conv3x3_backward, relu, relu_backward, upsample_backward,
};
use crate::numerics::{upsample, Parameter, Tensor, UpsampleMode};
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Backbone output width `C`.
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
    /// Hidden width of both heads; `channels` when unset.
    pub head_hidden: Option<usize>,
    pub fusion: FusionMode,
    pub within_image: bool,
    /// `false` builds the baseline without memory, ℋ₁ or attention.
    pub mcibi: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 5,
            channels: 16,
            blocks: 4,
            stride: 1,
            head_hidden: None,
            fusion: FusionMode::Concat,
            within_image: false,
            mcibi: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 8].contains(&self.stride) {
            return Err(Error::Validation(format!("stride must be 1, 2 or 8, got {}", self.stride)));
        }
        let downs = self.stride.trailing_zeros() as usize;
        if self.blocks == 0 || self.blocks < downs {
            return Err(Error::Validation(format!(
                "{} blocks cannot realise stride {}",
                self.blocks, self.stride
            )));
        }
        if self.in_channels == 0 || self.channels == 0 || self.head_hidden == Some(0) {
            return Err(Error::Validation("channel widths must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Validation(format!(
                "class count must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.mcibi && !self.channels.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "attention needs an even channel count, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.channels)
    }

    /// Feature maps fused before ℋ₂.
    fn fusion_streams(&self) -> usize {
        1 + usize::from(self.mcibi) + usize::from(self.within_image)
    }
}

/// Stack of 3×3 convolution + rectifier blocks. The first `log2(stride)`
/// blocks downsample by 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<(Parameter, Parameter, usize)>,
}

pub struct BackboneCache {
    /// Input of every block followed by the final output.
    acts: Vec<Tensor>,
}

impl Backbone {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let downs = cfg.stride.trailing_zeros() as usize;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let cin = if i == 0 { cfg.in_channels } else { cfg.channels };
                let bound = (6.0 / (9 * cin) as f64).sqrt();
                (
                    Parameter::new(Tensor::uniform(&[cfg.channels, cin, 3, 3], bound, rng)),
                    Parameter::new(Tensor::zeros(&[cfg.channels])),
                    if i < downs { 2 } else { 1 },
                )
            })
            .collect();
        Backbone { blocks }
    }

    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.2).product()
    }

    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let s = self.stride();
        if image.rank() != 3 || !image.shape()[1].is_multiple_of(s) || !image.shape()[2].is_multiple_of(s) {
            return Err(Error::Validation(format!(
                "image {:?} is not a C×H×W map divisible by stride {s}",
                image.shape()
            )));
        }
        let mut acts = vec![image.clone()];
        for (w, b, stride) in &self.blocks {
            let y = relu(&conv3x3(acts.last().expect("nonempty"), w, b, *stride)?);
            acts.push(y);
        }
        Ok((acts.last().expect("nonempty").clone(), BackboneCache { acts }))
    }

    pub fn backward(&mut self, cache: &BackboneCache, dr: Tensor) {
        let mut g = dr;
        for (i, (w, b, stride)) in self.blocks.iter_mut().enumerate().rev() {
            let dpre = relu_backward(&cache.acts[i + 1], &g);
            g = conv3x3_backward(&cache.acts[i], w, b, *stride, &dpre);
        }
    }

    fn visit(&mut self, f: &mut Visitor<'_>) {
        for (i, (w, b, _)) in self.blocks.iter_mut().enumerate() {
            f(&format!("backbone.block{i}.weight"), w);
            f(&format!("backbone.block{i}.bias"), b);
        }
    }
}

/// Global average pool followed by a 1×1 affine map, broadcast back to every position.
#[derive(Clone, Debug, PartialEq)]
pub struct WithinImageContext {
    pub weight: Parameter,
    pub bias: Parameter,
}

pub struct WithinCache {
    pooled: Tensor,
    positions: usize,
}

impl WithinImageContext {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let (weight, bias) = affine_params(channels, channels, rng);
        WithinImageContext { weight, bias }
    }

    pub fn pool(r: &Tensor) -> Tensor {
        let n = r.positions();
        let means = (0..r.channels()).map(|c| r.row(c).iter().sum::<f64>() / n as f64).collect();
        Tensor::from_vec(&[r.channels(), 1], means).expect("one value per channel")
    }

    pub fn forward(&self, r: &Tensor) -> Result<(Tensor, WithinCache)> {
        let pooled = Self::pool(r);
        let v = affine_1x1(&pooled, &self.weight, &self.bias)?;
        let n = r.positions();
        let data = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
        Ok((
            Tensor::from_vec(r.shape(), data)?,
            WithinCache { pooled, positions: n },
        ))
    }

    pub fn backward(&mut self, cache: &WithinCache, dout: &Tensor) -> Result<Tensor> {
        let n = cache.positions;
        let c = dout.channels();
        let dv = Tensor::from_vec(&[c, 1], (0..c).map(|ch| dout.row(ch).iter().sum()).collect())?;
        let dpooled = affine_1x1_backward(&cache.pooled, &mut self.weight, &mut self.bias, &dv);
        let data = dpooled.data().iter().flat_map(|&g| std::iter::repeat_n(g / n as f64, n)).collect();
        Tensor::from_vec(dout.shape(), data)
    }
}

/// ℋ₁, the refinement attention and the feature memory.
#[derive(Clone, Debug, PartialEq)]
pub struct DcaPath {
    pub head1: Head,
    pub attn: AttentionParams,
    pub memory: FeatureMemory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub dca: Option<DcaPath>,
    pub within: Option<WithinImageContext>,
    pub fusion: Option<Fusion>,
    pub head2: Head,
}

/// Forward results. `w` is absent for the baseline; `o_mem` only when requested.
pub struct Outputs {
    pub w: Option<WeightMap>,
    /// `K×H×W` class probabilities at input resolution.
    pub o: Tensor,
    /// Row `k` holds ℋ₂'s class probabilities for memory row `k`.
    pub o_mem: Option<Tensor>,
}

struct DcaCache {
    head1: HeadCache,
    probs: Tensor,
    attn: AttentionCache,
}

pub struct ForwardCache {
    backbone: BackboneCache,
    pub r: Tensor,
    dca: Option<DcaCache>,
    within: Option<WithinCache>,
    fusion: Option<FusionCache>,
    head2: HeadCache,
    mem: Option<(Option<FusionCache>, HeadCache)>,
}

impl ForwardCache {
    /// The `n×n` attention matrix of the refinement step.
    pub fn attention(&self) -> Option<&Tensor> {
        self.dca.as_ref().map(|d| &d.attn.p)
    }
}

/// Loss gradients w.r.t. the forward outputs.
pub struct OutputGrads {
    /// Gradient w.r.t. the feature-resolution weight map.
    pub dw: Option<Tensor>,
    pub d_o: Tensor,
    pub d_o_mem: Option<Tensor>,
}

impl SegModel {
    /// Builds a model whose components draw from named sub-seeds of `seed`,
    /// so baseline and full models share backbone initialization.
    /// The memory starts as seeded Gaussian rows until initialized from data.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let k = config.num_classes;
        let backbone = Backbone::new(&config, &mut rng_for(seed, "backbone"));
        let dca = if config.mcibi {
            let mut mrng = rng_for(seed, "memory");
            let values = Tensor::from_vec(
                &[k, c],
                (0..k * c).map(|_| mrng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
            )?;
            Some(DcaPath {
                head1: Head::new(c, config.hidden(), k, &mut rng_for(seed, "head1")),
                attn: AttentionParams::new(c, &mut rng_for(seed, "attention"))?,
                memory: FeatureMemory::new(values)?,
            })
        } else {
            None
        };
        let within = config
            .within_image
            .then(|| WithinImageContext::new(c, &mut rng_for(seed, "within")));
        let streams = config.fusion_streams();
        let fusion = (streams > 1).then(|| Fusion::new(config.fusion, streams, c));
        let fused = fusion.as_ref().map_or(c, Fusion::out_channels);
        let head2 = Head::new(fused, config.hidden(), k, &mut rng_for(seed, "head2"));
        Ok(SegModel {
            config,
            backbone,
            dca,
            within,
            fusion,
            head2,
        })
    }

    pub fn stride(&self) -> usize {
        self.config.stride
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn memory(&self) -> Option<&FeatureMemory> {
        self.dca.as_ref().map(|d| &d.memory)
    }

    pub fn memory_mut(&mut self) -> Option<&mut FeatureMemory> {
        self.dca.as_mut().map(|d| &mut d.memory)
    }

    pub fn set_memory(&mut self, memory: FeatureMemory) -> Result<()> {
        let dca = self
            .dca
            .as_mut()
            .ok_or_else(|| Error::Contract("baseline model has no feature memory".into()))?;
        if memory.values().shape() != dca.memory.values().shape() {
            return Err(Error::dim(
                "set_memory",
                format!("{:?} vs {:?}", memory.values().shape(), dca.memory.values().shape()),
            ));
        }
        dca.memory = memory;
        Ok(())
    }

    pub fn backbone_forward(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.backbone.forward(image)?.0)
    }

    pub fn within_image_context(&self, r: &Tensor) -> Result<Tensor> {
        match &self.within {
            Some(w) => Ok(w.forward(r)?.0),
            None => Err(Error::Contract("within-image context is disabled".into())),
        }
    }

    /// Flattened `C×n` features and feature-resolution labels, as consumed
    /// by memory initialization and the memory update.
    pub fn features_with_labels(&self, image: &Tensor, gt: &LabelMap) -> Result<(Tensor, Vec<u8>)> {
        let r = self.backbone_forward(image)?;
        let n = r.positions();
        let labels = gt.downsample(self.stride())?;
        Ok((r.reshape(&[self.config.channels, n])?, labels.data))
    }

    fn fuse_streams(&self, r: &Tensor, c_bi: Option<&Tensor>, c_wi: Option<&Tensor>) -> Result<(Tensor, Option<FusionCache>)> {
        let mut inputs = vec![r];
        inputs.extend(c_bi);
        inputs.extend(c_wi);
        match &self.fusion {
            Some(f) => {
                let (t, c) = f.forward(&inputs)?;
                Ok((t, Some(c)))
            }
            None => Ok((r.clone(), None)),
        }
    }

    /// Full forward pass. `with_memory_head` also evaluates ℋ₂ on the memory rows.
    pub fn forward(&self, image: &Tensor, with_memory_head: bool) -> Result<(Outputs, ForwardCache)> {
        let (r, bcache) = self.backbone.forward(image)?;
        let (c, h, w) = (r.shape()[0], r.shape()[1], r.shape()[2]);
        let n = h * w;

        let mut dca_cache = None;
        let mut c_bi = None;
        let mut wmap = None;
        if let Some(dca) = &self.dca {
            let (probs, h1) = dca.head1.forward(&r)?;
            let coarse = coarse_channels(&probs.clone().reshape(&[self.num_classes(), n])?, &dca.memory)?;
            let (refined, acache) = dca.attn.forward(&r, &coarse)?;
            c_bi = Some(refined);
            wmap = Some(WeightMap { probs: probs.clone() });
            dca_cache = Some(DcaCache {
                head1: h1,
                probs,
                attn: acache,
            });
        }
        let (c_wi, wcache) = match &self.within {
            Some(wi) => {
                let (t, cache) = wi.forward(&r)?;
                (Some(t), Some(cache))
            }
            None => (None, None),
        };
        let (fused, fcache) = self.fuse_streams(&r, c_bi.as_ref(), c_wi.as_ref())?;
        let (probs2, h2cache) = self.head2.forward(&fused)?;
        let o = upsample(&probs2, self.stride(), UpsampleMode::Bilinear)?;

        let mut o_mem = None;
        let mut mem_cache = None;
        if let (true, Some(dca)) = (with_memory_head, &self.dca) {
            // memory rows as a C×K map; every fusion stream sees the same rows
            let m = dca.memory.values().transpose();
            let (fm, fc) = self.fuse_streams(&m, Some(&m), c_wi.as_ref().map(|_| &m))?;
            let (pm, hc) = self.head2.forward(&fm)?;
            o_mem = Some(pm.transpose());
            mem_cache = Some((fc, hc));
        }
        debug_assert_eq!(c, self.config.channels);
        Ok((
            Outputs { w: wmap, o, o_mem },
            ForwardCache {
                backbone: bcache,
                r,
                dca: dca_cache,
                within: wcache,
                fusion: fcache,
                head2: h2cache,
                mem: mem_cache,
            },
        ))
    }

    /// Forward without the memory head, as used at evaluation time.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward(image, false)?.0.o)
    }

    /// Accumulates parameter gradients. The feature memory is frozen and never receives any.
    pub fn backward(&mut self, cache: &ForwardCache, grads: &OutputGrads) -> Result<()> {
        let stride = self.stride();
        let dprobs2 = upsample_backward(&grads.d_o, stride, UpsampleMode::Bilinear);
        let dfused = self.head2.backward(&cache.head2, &dprobs2);
        let mut parts = match (&mut self.fusion, &cache.fusion) {
            (Some(f), Some(fc)) => f.backward(fc, &dfused)?.into_iter(),
            _ => vec![dfused].into_iter(),
        };
        let mut dr = parts.next().expect("r stream");
        let dcbi = if self.dca.is_some() { parts.next() } else { None };
        let dcwi = if self.within.is_some() { parts.next() } else { None };

        if let (Some(dca), Some(dc)) = (self.dca.as_mut(), cache.dca.as_ref()) {
            let k = dca.memory.num_classes();
            let n = cache.r.positions();
            let (dr_q, dcoarse) = dca.attn.backward(&dc.attn, &dcbi.expect("context gradient"))?;
            dr.add_assign(&dr_q.reshape(cache.r.shape())?);
            let flat = dc.probs.clone().reshape(&[k, n])?;
            let mut dw = coarse_channels_backward(&flat, &mut dca.memory, &dcoarse).reshape(dc.probs.shape())?;
            if let Some(extra) = &grads.dw {
                dw.add_assign(extra);
            }
            dr.add_assign(&dca.head1.backward(&dc.head1, &dw));
        }
        if let (Some(wi), Some(wc), Some(g)) = (self.within.as_mut(), cache.within.as_ref(), dcwi) {
            dr.add_assign(&wi.backward(wc, &g)?);
        }
        self.backbone.backward(&cache.backbone, dr);

        if let (Some((fc, hc)), Some(dm)) = (&cache.mem, &grads.d_o_mem) {
            let dfm = self.head2.backward(hc, &dm.transpose());
            if let (Some(f), Some(fc)) = (&mut self.fusion, fc) {
                f.backward(fc, &dfm)?;
            }
        }
        Ok(())
    }

    /// Visits every parameter, including the frozen memory, under a stable name.
    pub fn visit_params_mut(&mut self, f: &mut Visitor<'_>) {
        self.backbone.visit(f);
        if let Some(dca) = &mut self.dca {
            dca.head1.visit("head1", f);
            dca.attn.visit("attention", f);
            f("memory", dca.memory.parameter_mut());
        }
        if let Some(wi) = &mut self.within {
            f("within.weight", &mut wi.weight);
            f("within.bias", &mut wi.bias);
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit("fusion", f);
        }
        self.head2.visit("head2", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut copy = self.clone();
        let mut n = 0;
        copy.visit_params_mut(&mut |_, p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }

    /// Trainable scalars in the dataset-level context path (ℋ₁ and attention).
    pub fn dca_param_count(&self) -> usize {
        let mut n = 0;
        if let Some(dca) = &self.dca {
            let mut copy = dca.clone();
            let mut count = |_: &str, p: &mut Parameter| n += p.numel();
            copy.head1.visit("", &mut count);
            copy.attn.visit("", &mut count);
        }
        n
    }
}
