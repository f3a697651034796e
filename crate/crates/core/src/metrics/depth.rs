//! Depth metrics under scale or scale-and-shift alignment.

use serde::{Deserialize, Serialize};

use super::{mean, MetricError};
use crate::tracks::median;

pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthAlignment {
    #[default]
    Scale,
    ScaleAndShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFit {
    /// `median(gt / pred)`.
    #[default]
    Median,
    /// Least squares `sum(pred * gt) / sum(pred^2)`.
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentScope {
    /// One fit per image; metrics averaged over images.
    Image,
    /// One fit for the whole sequence; metrics pooled over all pixels.
    #[default]
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthOptions {
    pub alignment: DepthAlignment,
    pub scale_fit: ScaleFit,
    pub scope: AlignmentScope,
}

/// One depth image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    pub abs_rel: f64,
    /// Fraction in `[0, 1]`.
    pub delta1: f64,
    pub valid_pixels: usize,
}

/// Fitted `(scale, shift)` mapping `pred` onto `gt`.
pub fn fit_alignment(pred: &[f64], gt: &[f64], opts: &DepthOptions) -> (f64, f64) {
    match opts.alignment {
        DepthAlignment::Scale => {
            let s = match opts.scale_fit {
                ScaleFit::Median => {
                    let mut r: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| g / p).collect();
                    median(&mut r)
                }
                ScaleFit::LeastSquares => {
                    let num: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
                    let den: f64 = pred.iter().map(|p| p * p).sum();
                    num / den
                }
            };
            (s, 0.0)
        }
        DepthAlignment::ScaleAndShift => {
            let n = pred.len() as f64;
            let mp = pred.iter().sum::<f64>() / n;
            let mg = gt.iter().sum::<f64>() / n;
            let cov: f64 = pred.iter().zip(gt).map(|(p, g)| (p - mp) * (g - mg)).sum();
            let var: f64 = pred.iter().map(|p| (p - mp) * (p - mp)).sum();
            // A constant prediction only determines the shift.
            let s = if var > 0.0 { cov / var } else { 0.0 };
            (s, mg - s * mp)
        }
    }
}

/// Per-pixel `(abs_rel, within_delta)`. A non-positive aligned prediction
/// never counts as within the threshold.
fn pixel_errors(pred: &[f64], gt: &[f64], s: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let a = s * p + b;
            let ok = a > 0.0 && (a / g).max(g / a) < DELTA_THRESHOLD;
            ((a - g).abs() / g, if ok { 1.0 } else { 0.0 })
        })
        .unzip()
}

fn valid_pairs(pred: &DepthImage, gt: &DepthImage, mask: Option<&[bool]>) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for k in 0..gt.data.len() {
        let (pv, gv) = (pred.data[k], gt.data[k]);
        let keep = gv > 0.0 && gv.is_finite() && pv.is_finite() && mask.is_none_or(|m| m[k]);
        if keep {
            p.push(pv);
            g.push(gv);
        }
    }
    (p, g)
}

/// AbsRel and delta < 1.25 over valid pixels (gt > 0 and finite, pred
/// finite, and `masks` when given).
pub fn depth_metrics(
    pred: &[DepthImage],
    gt: &[DepthImage],
    masks: Option<&[Vec<bool>]>,
    opts: &DepthOptions,
) -> Result<DepthScores, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            what: "depth frames",
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut per_image = Vec::with_capacity(gt.len());
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.data.len() != g.data.len() {
            return Err(MetricError::LengthMismatch {
                what: "depth pixels",
                left: p.data.len(),
                right: g.data.len(),
            });
        }
        per_image.push(valid_pairs(p, g, masks.map(|m| m[k].as_slice())));
    }
    let total: usize = per_image.iter().map(|(p, _)| p.len()).sum();
    if total == 0 {
        return Err(MetricError::EmptyValidMask);
    }
    match opts.scope {
        AlignmentScope::Sequence => {
            let p: Vec<f64> = per_image.iter().flat_map(|(p, _)| p.iter().copied()).collect();
            let g: Vec<f64> = per_image.iter().flat_map(|(_, g)| g.iter().copied()).collect();
            let (s, b) = fit_alignment(&p, &g, opts);
            let (rel, hit) = pixel_errors(&p, &g, s, b);
            Ok(DepthScores {
                abs_rel: mean(&rel),
                delta1: mean(&hit),
                valid_pixels: total,
            })
        }
        AlignmentScope::Image => {
            let mut rels = Vec::new();
            let mut hits = Vec::new();
            for (p, g) in per_image.iter().filter(|(p, _)| !p.is_empty()) {
                let (s, b) = fit_alignment(p, g, opts);
                let (rel, hit) = pixel_errors(p, g, s, b);
                rels.push(mean(&rel));
                hits.push(mean(&hit));
            }
            Ok(DepthScores {
                abs_rel: mean(&rels),
                delta1: mean(&hits),
                valid_pixels: total,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(f: impl Fn(usize) -> f64) -> DepthImage {
        DepthImage {
            width: 4,
            height: 3,
            data: (0..12).map(f).collect(),
        }
    }

    #[test]
    fn exact_and_scaled() {
        let g = vec![img(|k| 1.0 + 0.1 * k as f64)];
        let s = depth_metrics(&g, &g, None, &DepthOptions::default()).unwrap();
        assert_eq!((s.abs_rel, s.delta1), (0.0, 1.0));
        let p = vec![img(|k| 0.5 * (1.0 + 0.1 * k as f64))];
        let s = depth_metrics(&p, &g, None, &DepthOptions::default()).unwrap();
        assert!(s.abs_rel < 1e-15 && s.delta1 == 1.0);
    }

    #[test]
    fn shift_needs_shift_mode() {
        let g = vec![img(|k| 1.0 + 0.1 * k as f64)];
        let p = vec![img(|k| 1.3 + 0.1 * k as f64)];
        let ss = DepthOptions {
            alignment: DepthAlignment::ScaleAndShift,
            ..Default::default()
        };
        let s = depth_metrics(&p, &g, None, &ss).unwrap();
        assert!(s.abs_rel < 1e-12 && s.delta1 == 1.0);
        let s = depth_metrics(&p, &g, None, &DepthOptions::default()).unwrap();
        assert!(s.abs_rel > 0.0);
    }

    #[test]
    fn empty_mask_errors() {
        let g = vec![img(|_| 0.0)];
        assert_eq!(depth_metrics(&g, &g, None, &DepthOptions::default()), Err(MetricError::EmptyValidMask));
    }
}
