//! Saliency-map metrics: mean absolute error and maximum F-measure.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Precision weight of the F-measure.
pub const BETA_SQ: f64 = 0.3;
/// Number of binarization thresholds swept by [`max_f_measure`].
pub const THRESHOLDS: usize = 255;

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    gt.require_shape("mae", pred.shape())?;
    let total: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// One point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// F-measure from confusion counts; `0/0` terms count as 0.
pub fn f_measure(tp: f64, fp: f64, fneg: f64) -> (f64, f64, f64) {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let den = BETA_SQ * precision + recall;
    let f = if den > 0.0 {
        (1.0 + BETA_SQ) * precision * recall / den
    } else {
        0.0
    };
    (precision, recall, f)
}

/// Precision, recall and F at thresholds `i / 255`, `i = 0..255`; a pixel is
/// predicted salient when it exceeds the threshold.
pub fn f_measure_sweep(pred: &Tensor, gt: &Tensor) -> Result<Vec<SweepPoint>> {
    gt.require_shape("max_f_measure", pred.shape())?;
    let positives = gt.data().iter().filter(|&&g| g > 0.5).count();
    if positives == 0 {
        return Err(Error::invalid("F-measure needs at least one positive ground-truth pixel"));
    }
    // Histogram of predictions by the number of thresholds they exceed.
    let mut pos_hist = vec![0usize; THRESHOLDS + 1];
    let mut neg_hist = vec![0usize; THRESHOLDS + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let exceeded = (0..THRESHOLDS)
            .take_while(|&i| p > i as f64 / THRESHOLDS as f64)
            .count();
        if g > 0.5 {
            pos_hist[exceeded] += 1;
        } else {
            neg_hist[exceeded] += 1;
        }
    }
    // tp(i) = positives exceeding threshold i = those with exceeded > i.
    let mut points = Vec::with_capacity(THRESHOLDS);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut rev = Vec::with_capacity(THRESHOLDS);
    for i in (0..THRESHOLDS).rev() {
        tp += pos_hist[i + 1];
        fp += neg_hist[i + 1];
        rev.push((i, tp, fp));
    }
    for (i, tp, fp) in rev.into_iter().rev() {
        let (precision, recall, f) = f_measure(tp as f64, fp as f64, (positives - tp) as f64);
        points.push(SweepPoint {
            threshold: i as f64 / THRESHOLDS as f64,
            precision,
            recall,
            f,
        });
    }
    Ok(points)
}

/// Maximum F-measure (beta^2 = 0.3) over the 255-threshold sweep.
pub fn max_f_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(f_measure_sweep(pred, gt)?
        .iter()
        .map(|p| p.f)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(vals: &[f64], w: usize) -> Tensor {
        Tensor::new(vec![vals.len() / w, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn mae_examples() {
        let gt = grid(&[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        let inv = gt.map(|g| 1.0 - g).unwrap();
        assert_eq!(mae(&inv, &gt).unwrap(), 1.0);
        assert_eq!(mae(&Tensor::full(&[2, 2], 0.5), &gt).unwrap(), 0.5);
        assert!(mae(&Tensor::zeros(&[1, 4]), &gt).is_err());
    }

    #[test]
    fn max_f_examples() {
        let gt = grid(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 3);
        assert!((max_f_measure(&gt, &gt).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(max_f_measure(&Tensor::zeros(&[2, 3]), &gt).unwrap(), 0.0);
        assert!(max_f_measure(&gt, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn sweep_has_255_thresholds() {
        let gt = grid(&[1.0, 0.0], 2);
        let sweep = f_measure_sweep(&grid(&[0.7, 0.2], 2), &gt).unwrap();
        assert_eq!(sweep.len(), THRESHOLDS);
        assert_eq!(sweep[0].threshold, 0.0);
        assert!(sweep.windows(2).all(|w| w[0].threshold < w[1].threshold));
        // Above 0.7 nothing is predicted salient.
        assert_eq!(sweep.last().unwrap().f, 0.0);
    }
}
