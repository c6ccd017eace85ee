use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::IGNORE_LABEL;
use crate::model::SegModel;
use crate::numerics::Tensor;
use crate::synthdata::SegSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `confusion[gt][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    /// Per-class IoU; `None` for classes with an empty union.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-pixel argmax over the class axis of a `K×H×W` map.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let (k, n) = (probs.channels(), probs.positions());
    let d = probs.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Adds the pixels of one prediction into `confusion`, skipping ignored labels.
pub fn accumulate_confusion(confusion: &mut [Vec<u64>], pred: &[u8], gt: &[u8]) -> Result<()> {
    let k = confusion.len();
    if pred.len() != gt.len() {
        return Err(Error::dim("evaluate", format!("{} predictions, {} labels", pred.len(), gt.len())));
    }
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        if g as usize >= k || p as usize >= k {
            return Err(Error::Validation(format!("label {g} or prediction {p} out of range for {k} classes")));
        }
        confusion[g as usize][p as usize] += 1;
    }
    Ok(())
}

pub fn report_from_confusion(confusion: Vec<Vec<u64>>) -> EvalReport {
    let k = confusion.len();
    let iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|g| confusion[g][c]).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    EvalReport { confusion, iou, miou }
}

pub fn evaluate(model: &SegModel, samples: &[SegSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation needs at least one sample".into()));
    }
    let k = model.num_classes();
    let mut confusion = vec![vec![0u64; k]; k];
    for s in samples {
        let o = model.predict(&s.image)?;
        accumulate_confusion(&mut confusion, &argmax_labels(&o), &s.gt.data)?;
    }
    Ok(report_from_confusion(confusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction() {
        let gt = vec![0, 1, 2, 1, 255];
        let mut conf = vec![vec![0; 3]; 3];
        accumulate_confusion(&mut conf, &[0, 1, 2, 1, 0], &gt).unwrap();
        let r = report_from_confusion(conf);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn constant_prediction_on_balanced_grid() {
        let mut conf = vec![vec![0; 2]; 2];
        accumulate_confusion(&mut conf, &[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap();
        let r = report_from_confusion(conf);
        assert_eq!(r.iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn random_instances_match_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let k = rng.gen_range(2..=6);
            let n = rng.gen_range(1..=64);
            let gt: Vec<u8> = (0..n).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..k) as u8 }).collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            let mut conf = vec![vec![0; k]; k];
            accumulate_confusion(&mut conf, &pred, &gt).unwrap();
            let total: u64 = conf.iter().flatten().sum();
            assert_eq!(total as usize, gt.iter().filter(|&&g| g != 255).count());
            let r = report_from_confusion(conf);
            let mut ious = Vec::new();
            for c in 0..k as u8 {
                let (mut i, mut u) = (0, 0);
                for (&p, &g) in pred.iter().zip(&gt) {
                    if g == 255 {
                        continue;
                    }
                    i += usize::from(p == c && g == c);
                    u += usize::from(p == c || g == c);
                }
                if u > 0 {
                    ious.push(i as f64 / u as f64);
                }
            }
            let want = ious.iter().sum::<f64>() / ious.len() as f64;
            assert!((r.miou - want).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::from_vec(&[3, 1, 2], vec![0.2, 0.5, 0.5, 0.25, 0.3, 0.25]).unwrap();
        assert_eq!(argmax_labels(&t), vec![1, 0]);
    }
}
