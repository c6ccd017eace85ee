//! Procedural segmentation tasks and the `MCD1` dataset format.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::numerics::io::{read_tensor, write_tensor, Cursor};
use crate::numerics::{Precision, Tensor};
use crate::seeding::{rng_for, sub_seed};

pub const DATASET_MAGIC: &[u8; 4] = b"MCD1";

/// Attempts at drawing a layout that satisfies `min_region` before giving up.
const LAYOUT_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionStyle {
    Rectangles,
    Voronoi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub class_means: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub region_style: RegionStyle,
    /// Smallest pixel count any region may have.
    pub min_region: usize,
    /// Voronoi sites, or rectangles including the background.
    pub regions: usize,
    /// Relative frequency with which regions take each class.
    pub class_weights: Vec<f64>,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        let s = 1.0;
        SynthTaskSpec {
            num_classes: 5,
            height: 32,
            width: 32,
            in_channels: 3,
            class_means: vec![
                vec![0.0, 0.0, 0.0],
                vec![s, s, s],
                vec![-s, -s, s],
                vec![-s, s, -s],
                vec![s, -s, -s],
            ],
            noise_sigma: 0.6,
            region_style: RegionStyle::Voronoi,
            min_region: 16,
            regions: 6,
            class_weights: vec![1.0; 5],
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if !(2..=255).contains(&k) {
            return Err(Error::Validation(format!("num_classes must be in 2..=255, got {k}")));
        }
        if self.height == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(Error::Validation("image extents and channels must be positive".into()));
        }
        if self.class_means.len() != k || self.class_means.iter().any(|m| m.len() != self.in_channels) {
            return Err(Error::Validation(format!(
                "class_means must hold {k} vectors of length {}",
                self.in_channels
            )));
        }
        if self.class_means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("class_means must be finite".into()));
        }
        for i in 0..k {
            for j in i + 1..k {
                if self.class_means[i] == self.class_means[j] {
                    return Err(Error::Validation(format!("class means {i} and {j} coincide")));
                }
            }
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Range {
                what: "noise_sigma",
                value: self.noise_sigma,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        if self.min_region == 0 || self.regions < 2 {
            return Err(Error::Validation("min_region must be positive and regions at least 2".into()));
        }
        if self.class_weights.len() != k
            || self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.class_weights.iter().filter(|&&w| w > 0.0).count() < 2
        {
            return Err(Error::Validation(format!(
                "class_weights must hold {k} nonnegative values with at least two positive"
            )));
        }
        Ok(())
    }

    pub fn check_stride(&self, stride: usize) -> Result<()> {
        if !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::Validation(format!(
                "image {}x{} not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Flat `key = value` rendering, readable by [`SynthTaskSpec::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let means: Vec<String> = self.class_means.iter().map(|m| join(m)).collect();
        let _ = writeln!(s, "class_means = {}", means.join("; "));
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let style = match self.region_style {
            RegionStyle::Rectangles => "rectangles",
            RegionStyle::Voronoi => "voronoi",
        };
        let _ = writeln!(s, "region_style = {style}");
        let _ = writeln!(s, "min_region = {}", self.min_region);
        let _ = writeln!(s, "regions = {}", self.regions);
        let _ = writeln!(s, "class_weights = {}", join(&self.class_weights));
        s
    }

    /// Parses a `key = value` document. Keys not given keep their defaults;
    /// unknown keys are rejected. Lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthTaskSpec::default();
        let mut means_given = false;
        let mut weights_given = false;
        for (key, value) in crate::kv::pairs(text)? {
            let v = value.as_str();
            match key.as_str() {
                "num_classes" => spec.num_classes = crate::kv::parse_num(&key, v)?,
                "height" => spec.height = crate::kv::parse_num(&key, v)?,
                "width" => spec.width = crate::kv::parse_num(&key, v)?,
                "in_channels" => spec.in_channels = crate::kv::parse_num(&key, v)?,
                "class_means" => {
                    spec.class_means = v
                        .split(';')
                        .map(|m| crate::kv::parse_list(&key, m))
                        .collect::<Result<_>>()?;
                    means_given = true;
                }
                "noise_sigma" => spec.noise_sigma = crate::kv::parse_num(&key, v)?,
                "region_style" => {
                    spec.region_style = match v {
                        "voronoi" => RegionStyle::Voronoi,
                        "rectangles" => RegionStyle::Rectangles,
                        _ => return Err(Error::Validation(format!("unknown region_style {v:?}"))),
                    }
                }
                "min_region" => spec.min_region = crate::kv::parse_num(&key, v)?,
                "regions" => spec.regions = crate::kv::parse_num(&key, v)?,
                "class_weights" => {
                    spec.class_weights = crate::kv::parse_list(&key, v)?;
                    weights_given = true;
                }
                _ => return Err(Error::Validation(format!("unknown spec key {key:?}"))),
            }
        }
        if !weights_given {
            spec.class_weights = vec![1.0; spec.num_classes];
        }
        if !means_given && spec.class_means.len() != spec.num_classes {
            return Err(Error::Validation("class_means must be given when num_classes changes".into()));
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub gt: LabelMap,
}

/// Region id per pixel, plus the region count.
fn layout(spec: &SynthTaskSpec, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let (h, w) = (spec.height, spec.width);
    match spec.region_style {
        RegionStyle::Voronoi => {
            let sites: Vec<(f64, f64)> = (0..spec.regions)
                .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
                .collect();
            let ids = (0..h * w)
                .map(|p| {
                    let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                    let d = |s: &(f64, f64)| (s.0 - y).powi(2) + (s.1 - x).powi(2);
                    (0..sites.len())
                        .min_by(|&a, &b| d(&sites[a]).total_cmp(&d(&sites[b])))
                        .expect("at least one site")
                })
                .collect();
            (ids, spec.regions)
        }
        RegionStyle::Rectangles => {
            let mut ids = vec![0; h * w];
            for r in 1..spec.regions {
                let rh = rng.gen_range(h / 4..=h / 2).max(1);
                let rw = rng.gen_range(w / 4..=w / 2).max(1);
                let y0 = rng.gen_range(0..=h - rh);
                let x0 = rng.gen_range(0..=w - rw);
                for y in y0..y0 + rh {
                    ids[y * w + x0..y * w + x0 + rw].iter_mut().for_each(|v| *v = r);
                }
            }
            (ids, spec.regions)
        }
    }
}

/// Draws one sample. Pure in `(spec, seed)`.
pub fn generate_sample(spec: &SynthTaskSpec, seed: u64) -> Result<SegSample> {
    spec.validate()?;
    let n = spec.height * spec.width;
    if spec.min_region * spec.regions > n {
        return Err(Error::Validation(format!(
            "{} regions of at least {} pixels cannot fit in {n} pixels",
            spec.regions, spec.min_region
        )));
    }
    let mut rng = rng_for(seed, "layout");
    let classes = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| Error::Validation(format!("class_weights: {e}")))?;
    for _ in 0..LAYOUT_ATTEMPTS {
        let (ids, count) = layout(spec, &mut rng);
        let mut sizes = vec![0usize; count];
        for &i in &ids {
            sizes[i] += 1;
        }
        if sizes.iter().any(|&s| s < spec.min_region) {
            continue;
        }
        let mut region_class: Vec<usize> = (0..count).map(|_| classes.sample(&mut rng)).collect();
        if region_class.iter().all(|&c| c == region_class[0]) {
            // force a second class onto the smallest region
            let smallest = (0..count).min_by_key(|&i| sizes[i]).expect("regions");
            let alternatives: Vec<usize> = (0..spec.num_classes)
                .filter(|&c| c != region_class[0] && spec.class_weights[c] > 0.0)
                .collect();
            region_class[smallest] = alternatives[rng.gen_range(0..alternatives.len())];
        }
        let labels: Vec<u8> = ids.iter().map(|&i| region_class[i] as u8).collect();
        return Ok(SegSample {
            image: render(spec, &labels, seed)?,
            gt: LabelMap::new(spec.height, spec.width, labels)?,
        });
    }
    Err(Error::Validation(format!(
        "no layout with every region >= {} pixels after {LAYOUT_ATTEMPTS} attempts",
        spec.min_region
    )))
}

fn render(spec: &SynthTaskSpec, labels: &[u8], seed: u64) -> Result<Tensor> {
    let n = labels.len();
    let mut rng = rng_for(seed, "noise");
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Validation(format!("noise: {e}")))?;
    let mut data = vec![0.0; spec.in_channels * n];
    for c in 0..spec.in_channels {
        for (p, &l) in labels.iter().enumerate() {
            let mean = if l == IGNORE_LABEL { 0.0 } else { spec.class_means[l as usize][c] };
            data[c * n + p] = if spec.noise_sigma == 0.0 {
                mean
            } else {
                mean + noise.sample(&mut rng)
            };
        }
    }
    Tensor::from_vec(&[spec.in_channels, spec.height, spec.width], data)
}

/// `count` samples whose seeds derive from `seed` by sample index.
pub fn generate_dataset(spec: &SynthTaskSpec, count: usize, seed: u64) -> Result<Vec<SegSample>> {
    (0..count)
        .map(|i| generate_sample(spec, sub_seed(seed, &format!("sample/{i}"))))
        .collect()
}

/// Pixel accuracy of assigning every pixel to its nearest class mean; an
/// estimate of the noise-determined ceiling of the task.
pub fn nearest_mean_accuracy(spec: &SynthTaskSpec, samples: &[SegSample]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let n = s.gt.len();
        for (p, &l) in s.gt.data.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let d = |m: &Vec<f64>| -> f64 {
                m.iter()
                    .enumerate()
                    .map(|(c, mv)| (s.image.data()[c * n + p] - mv).powi(2))
                    .sum()
            };
            let best = (0..spec.num_classes)
                .min_by(|&a, &b| d(&spec.class_means[a]).total_cmp(&d(&spec.class_means[b])))
                .expect("classes");
            hit += usize::from(best == l as usize);
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

pub fn dataset_to_bytes(samples: &[SegSample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        write_tensor(&mut out, &s.image, Precision::F64);
        out.extend_from_slice(&(s.gt.height as u32).to_le_bytes());
        out.extend_from_slice(&(s.gt.width as u32).to_le_bytes());
        out.extend_from_slice(&s.gt.data);
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<SegSample>> {
    let mut cur = Cursor::new(bytes, "dataset");
    cur.expect_magic(DATASET_MAGIC)?;
    let count = cur.u32()? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let mut tcur = Cursor::at(bytes, cur.position(), "dataset");
        let (image, _) = read_tensor(&mut tcur)?;
        cur = tcur;
        if image.rank() != 3 {
            return Err(cur.fail(format!("sample {i}: image must be C×H×W, got {:?}", image.shape())));
        }
        let h = cur.u32()? as usize;
        let w = cur.u32()? as usize;
        if (h, w) != (image.shape()[1], image.shape()[2]) {
            return Err(cur.fail(format!("sample {i}: label map {h}x{w} does not match image {:?}", image.shape())));
        }
        let data = cur.take(h * w)?.to_vec();
        samples.push(SegSample {
            image,
            gt: LabelMap::new(h, w, data)?,
        });
    }
    if !cur.is_at_end() {
        return Err(cur.fail("trailing bytes after last sample"));
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[SegSample], path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(samples))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SegSample>> {
    dataset_from_bytes(&std::fs::read(path)?)
}
