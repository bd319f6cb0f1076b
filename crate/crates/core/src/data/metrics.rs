//! Image-quality and segmentation metrics on the 8-bit scale.
//!
//! Tensors in `[-1, 1]` are first quantized with [`quantize`], so metric
//! values are exact functions of the 8-bit images.

use serde::{Deserialize, Serialize};

use super::quantize;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn levels<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|&v| quantize(v) as f64).collect()
}

fn paired_levels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    a.expect_same_shape(b)?;
    Ok((levels(a), levels(b)))
}

/// Mean absolute 8-bit difference.
pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (a, b) = paired_levels(a, b)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(255^2 / mse)`; `+inf` for identical images.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (a, b) = paired_levels(a, b)?;
    let m = mse(&a, &b);
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / m).log10()
    })
}

/// Root mean squared 8-bit difference, optionally restricted to `mask`.
///
/// `mask` holds one flag per spatial position of every batch item
/// (`N * H * W` entries) and applies to all channels.
pub fn rmse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: Option<&[bool]>) -> Result<f64> {
    let (n, c, h, w) = a.dims4()?;
    let (a, b) = paired_levels(a, b)?;
    let Some(mask) = mask else {
        return Ok(mse(&a, &b).sqrt());
    };
    if mask.len() != n * h * w {
        return Err(Error::invalid(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            n * h * w
        )));
    }
    let hw = h * w;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n * c * hw {
        let (item, p) = (i / (c * hw), i % hw);
        if mask[item * hw + p] {
            sum += (a[i] - b[i]) * (a[i] - b[i]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("rmse mask selects no pixels"));
    }
    Ok((sum / count as f64).sqrt())
}

/// Luma planes `[N][H*W]` on the 8-bit scale.
fn luma<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = t.dims4()?;
    let v = levels(t);
    let hw = h * w;
    (0..n)
        .map(|i| {
            let base = i * c * hw;
            match c {
                1 => Ok(v[base..base + hw].to_vec()),
                3 => Ok((0..hw)
                    .map(|p| 0.299 * v[base + p] + 0.587 * v[base + hw + p] + 0.114 * v[base + 2 * hw + p])
                    .collect()),
                _ => Err(Error::invalid(format!("ssim needs 1 or 3 channels, got {c}"))),
            }
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    g.iter().flat_map(|&a| g.iter().map(move |&b| a * b)).collect()
}

/// Mean structural similarity over valid 11x11 windows, averaged over the batch.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (n, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (la, lb) = (luma(a)?, luma(b)?);
    let win = gaussian_window();
    let mut total = 0.0;
    for (pa, pb) in la.iter().zip(&lb) {
        let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
        let mut acc = 0.0;
        for i in 0..oh {
            for j in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let k = win[di * SSIM_WINDOW + dj];
                        let p = (i + di) * w + j + dj;
                        let (x, y) = (pa[p], pb[p]);
                        ma += k * x;
                        mb += k * y;
                        saa += k * x * x;
                        sbb += k * y * y;
                        sab += k * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub per_pixel_acc: f64,
    pub per_class_acc: f64,
    pub class_iou: f64,
}

/// Pixel accuracy, mean recall over classes present in `truth`, and mean IoU
/// over classes present in `truth` or `pred`.
pub fn segmentation_scores(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<SegmentationScores> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "label grids differ in size ({} vs {}) or are empty",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c as usize >= num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let k = num_classes;
    let mut confusion = vec![0usize; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t as usize * k + p as usize] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c * k + c]).sum();
    let (mut recall_sum, mut recall_n, mut iou_sum, mut iou_n) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..k {
        let tp = confusion[c * k + c];
        let in_truth: usize = confusion[c * k..(c + 1) * k].iter().sum();
        let in_pred: usize = (0..k).map(|t| confusion[t * k + c]).sum();
        if in_truth > 0 {
            recall_sum += tp as f64 / in_truth as f64;
            recall_n += 1;
        }
        let union = in_truth + in_pred - tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            iou_n += 1;
        }
    }
    Ok(SegmentationScores {
        per_pixel_acc: correct as f64 / pred.len() as f64,
        per_class_acc: recall_sum / recall_n as f64,
        class_iou: iou_sum / iou_n as f64,
    })
}

/// Label of the nearest palette color (squared RGB distance, first wins
/// ties) for every pixel of every batch item.
pub fn nearest_palette<T: Scalar>(image: &Tensor<T>, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!(
            "palette projection needs RGB, got {c} channels"
        )));
    }
    let v = levels(image);
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            let px = [v[i * 3 * hw + p], v[i * 3 * hw + hw + p], v[i * 3 * hw + 2 * hw + p]];
            let best = palette
                .iter()
                .enumerate()
                .map(|(k, col)| {
                    let d: f64 = px.iter().zip(col).map(|(&a, &b)| (a - b as f64).powi(2)).sum();
                    (k, d)
                })
                .fold((0, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc });
            out.push(best.0 as u8);
        }
    }
    Ok(out)
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}

/// Metrics of one image pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    #[serde(with = "float_repr")]
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub segmentation: Option<SegmentationScores>,
}

impl MetricReport {
    /// Image metrics of `pred` against `truth`, plus segmentation scores when
    /// `labels` (ground-truth classes) and `palette` are given.
    pub fn compute<T: Scalar>(
        pred: &Tensor<T>,
        truth: &Tensor<T>,
        labels: Option<(&[u8], &[[u8; 3]])>,
    ) -> Result<Self> {
        let segmentation = match labels {
            Some((l, pal)) => Some(segmentation_scores(&nearest_palette(pred, pal)?, l, pal.len())?),
            None => None,
        };
        Ok(Self {
            mae: mae(pred, truth)?,
            psnr: psnr(pred, truth)?,
            ssim: ssim(pred, truth)?,
            rmse: rmse(pred, truth, None)?,
            segmentation,
        })
    }
}

/// Mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "float_repr")]
    pub mean: f64,
    #[serde(with = "float_repr")]
    pub std: f64,
}

impl Summary {
    /// Infinite entries make the mean infinite; the spread is then 0 if all
    /// entries are equal and infinite otherwise.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.iter().any(|v| v.is_infinite()) {
            let all_same = values.windows(2).all(|w| w[0] == w[1]);
            let mean = if all_same { values[0] } else { f64::INFINITY };
            return Self {
                mean,
                std: if all_same { 0.0 } else { f64::INFINITY },
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mae: Summary,
    pub psnr: Summary,
    pub ssim: Summary,
    pub rmse: Summary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_pixel_acc: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_acc: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_iou: Option<Summary>,
}

/// Mean and standard deviation of every metric over `reports`.
pub fn aggregate(reports: &[MetricReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::invalid("cannot aggregate zero reports"));
    }
    let pick = |f: &dyn Fn(&MetricReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
    let seg: Option<Vec<SegmentationScores>> = reports.iter().map(|r| r.segmentation).collect();
    let seg_pick = |f: &dyn Fn(&SegmentationScores) -> f64| {
        seg.as_ref().map(|s| Summary::of(&s.iter().map(f).collect::<Vec<_>>()))
    };
    Ok(Aggregate {
        count: reports.len(),
        mae: pick(&|r| r.mae),
        psnr: pick(&|r| r.psnr),
        ssim: pick(&|r| r.ssim),
        rmse: pick(&|r| r.rmse),
        per_pixel_acc: seg_pick(&|s| s.per_pixel_acc),
        per_class_acc: seg_pick(&|s| s.per_class_acc),
        class_iou: seg_pick(&|s| s.class_iou),
    })
}
