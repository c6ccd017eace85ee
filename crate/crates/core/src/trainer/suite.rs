//! Full-model gradient checks and the baseline-vs-MCIBI comparison harness.

use std::time::Instant;

use super::{initialize_memory, train, TotalObjective, TrainConfig};
use crate::aggregation::FusionMode;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::numerics::{grad_check, GradCheckReport, Tensor};
use crate::seeding::rng_for;
use crate::synthdata::{generate_dataset, SegSample, SynthTaskSpec};

/// Replaces every bias with a uniform draw in ±0.1 so that no rectifier
/// input sits exactly on its kink (zero-initialized biases put all-zero
/// features there, where central differences see half the slope).
pub fn jitter_biases(model: &mut SegModel, seed: u64) {
    let mut rng = rng_for(seed, "jitter");
    model.visit_params_mut(&mut |name, p| {
        if name.ends_with("bias") {
            p.value = Tensor::uniform(p.shape(), 0.1, &mut rng);
        }
    });
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks the total loss of a K=2, C=4, 4×4 model against central
/// differences for every fusion mode, with and without within-image
/// context and with RCL on and off.
pub fn gradient_suite(seed: u64, eps: f64) -> Result<Vec<GradCase>> {
    let spec = SynthTaskSpec {
        num_classes: 2,
        height: 4,
        width: 4,
        class_means: vec![vec![0.0, 0.5, 0.0], vec![1.0, -0.5, 0.5]],
        class_weights: vec![1.0; 2],
        min_region: 2,
        regions: 2,
        ..SynthTaskSpec::default()
    };
    let sample = generate_dataset(&spec, 1, seed)?.remove(0);
    let mut cases = Vec::new();
    let combos = [
        (FusionMode::Concat, false, true, true),
        (FusionMode::Add, false, true, true),
        (FusionMode::WeightedAdd, false, true, true),
        (FusionMode::Concat, true, true, true),
        (FusionMode::WeightedAdd, true, true, true),
        (FusionMode::Concat, false, false, true),
        (FusionMode::Concat, false, true, false),
    ];
    for (i, (mode, within, rcl, mcibi)) in combos.into_iter().enumerate() {
        let cfg = TrainConfig {
            num_classes: 2,
            channels: 4,
            blocks: 2,
            fusion: mode,
            use_within_image: within,
            use_rcl: rcl,
            mcibi,
            ..TrainConfig::default()
        };
        let mut model = SegModel::new(cfg.model_config(spec.in_channels), seed.wrapping_add(i as u64))?;
        initialize_memory(&mut model, &cfg, std::slice::from_ref(&sample))?;
        jitter_biases(&mut model, seed.wrapping_add(100 + i as u64));
        let mut obj = TotalObjective {
            model,
            sample: sample.clone(),
            weights: cfg.loss_weights(),
            use_rcl: rcl,
        };
        let report = grad_check(&mut obj, eps)?;
        if let Some(mem) = obj.model.memory() {
            if mem.grad().data().iter().any(|&g| g != 0.0) {
                return Err(Error::Contract("feature memory received a gradient".into()));
            }
        }
        let name = match (mcibi, within, rcl) {
            (false, _, _) => "baseline".to_string(),
            (true, w, r) => format!(
                "mcibi/{mode}{}{}",
                if w { "+within" } else { "" },
                if r { "" } else { "/no-rcl" }
            ),
        };
        cases.push(GradCase { name, report });
    }
    Ok(cases)
}

/// One arm of a comparison.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub cfg: TrainConfig,
}

impl Variant {
    pub fn baseline(cfg: &TrainConfig) -> Self {
        Variant {
            name: "baseline".into(),
            cfg: TrainConfig { mcibi: false, ..cfg.clone() },
        }
    }

    pub fn mcibi(cfg: &TrainConfig, fusion: FusionMode) -> Self {
        Variant {
            name: format!("mcibi-{fusion}"),
            cfg: TrainConfig { mcibi: true, fusion, ..cfg.clone() },
        }
    }
}

/// The baseline plus MCIBI with the configured fusion, or with every fusion
/// mode when `fusion_ablation` is set.
pub fn standard_variants(cfg: &TrainConfig, fusion_ablation: bool) -> Vec<Variant> {
    let mut v = vec![Variant::baseline(cfg)];
    if fusion_ablation {
        v.extend([FusionMode::Add, FusionMode::WeightedAdd, FusionMode::Concat].map(|m| Variant::mcibi(cfg, m)));
    } else {
        v.push(Variant::mcibi(cfg, cfg.fusion));
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub miou_per_seed: Vec<f64>,
    pub mean_miou: f64,
    pub params: usize,
    /// Mean wall time per seed, training plus evaluation.
    pub seconds: f64,
}

/// Trains and evaluates every variant once per seed (each seed overrides
/// the variant's config seed) and averages mIoU over seeds.
pub fn compare_variants(
    variants: &[Variant],
    seeds: &[u64],
    train_set: &[SegSample],
    val_set: &[SegSample],
) -> Result<Vec<CompareRow>> {
    if seeds.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("compare needs at least one seed and a nonempty validation set".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut miou = Vec::with_capacity(seeds.len());
        let mut params = 0;
        let start = Instant::now();
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..v.cfg.clone() };
            let out = train(cfg, train_set, val_set, None, None)?;
            params = out.trainer.model.param_count();
            let e = out.eval.expect("validation set is nonempty");
            log::info!("{} seed {seed}: mIoU {:.4}", v.name, e.miou);
            miou.push(e.miou);
        }
        rows.push(CompareRow {
            variant: v.name.clone(),
            seeds: seeds.to_vec(),
            mean_miou: miou.iter().sum::<f64>() / miou.len() as f64,
            miou_per_seed: miou,
            params,
            seconds: start.elapsed().as_secs_f64() / seeds.len() as f64,
        });
    }
    Ok(rows)
}

pub const COMPARE_HEADER: &str = "variant,mIoU,params,seconds";

/// The side-by-side table: mean mIoU in percent, trainable parameters and
/// mean seconds per seed.
pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.2},{},{:.2}\n", r.variant, 100.0 * r.mean_miou, r.params, r.seconds));
    }
    s
}

/// Per-seed mIoU values at full precision; free of timings, so identical
/// inputs give identical files.
pub fn compare_seeds_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("variant,seed,mIoU\n");
    for r in rows {
        for (seed, m) in r.seeds.iter().zip(&r.miou_per_seed) {
            s.push_str(&format!("{},{seed},{m}\n", r.variant));
        }
    }
    s
}
