//! Image-quality and lesion-overlap metrics with mean ± std aggregation.
//!
//! All image metrics operate on [0,1]-rescaled slices (use [`to_unit_range`]
//! on model-space [-1,1] images first). NRMSE normalizes by the Euclidean
//! norm of the reference. Dice/Recall take strictly binary masks.

use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Sentinel ceiling for PSNR when the error vanishes.
pub const PSNR_CAP: f64 = 100.0;

/// SSIM window size (square Gaussian).
pub const SSIM_WINDOW: usize = 11;

/// SSIM Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Map a [-1,1] model-space image to the [0,1] evaluation range.
pub fn to_unit_range(img: &Array2<f64>) -> Array2<f64> {
    img.mapv(|v| (v + 1.0) / 2.0)
}

/// Peak signal-to-noise ratio in dB over the given data range, capped at
/// [`PSNR_CAP`] (which is also the zero-error sentinel).
pub fn psnr(x_hat: &Array2<f64>, x_ref: &Array2<f64>, data_range: f64) -> Result<f64> {
    if x_hat.dim() != x_ref.dim() {
        return Err(Error::dim("psnr shapes", format!("{:?}", x_ref.dim()), format!("{:?}", x_hat.dim())));
    }
    if data_range <= 0.0 {
        return Err(Error::Config(format!("data_range must be positive, got {data_range}")));
    }
    let n = x_hat.len() as f64;
    let mse: f64 = x_hat
        .iter()
        .zip(x_ref.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k = Vec::with_capacity(SSIM_WINDOW);
    for i in -half..=half {
        k.push((-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    }
    let sum: f64 = k.iter().sum();
    k.iter().map(|v| v / sum).collect()
}

/// Mean structural similarity: Gaussian window 11, sigma 1.5, K1=0.01,
/// K2=0.03, over valid window positions only.
pub fn ssim(x_hat: &Array2<f64>, x_ref: &Array2<f64>, data_range: f64) -> Result<f64> {
    if x_hat.dim() != x_ref.dim() {
        return Err(Error::dim("ssim shapes", format!("{:?}", x_ref.dim()), format!("{:?}", x_hat.dim())));
    }
    let (h, w) = x_hat.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let kernel = gaussian_kernel();

    // Separable Gaussian filtering, valid region only.
    let filter = |img: &Array2<f64>| -> Array2<f64> {
        let mut rows = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
        for y in 0..h {
            for x in 0..w - SSIM_WINDOW + 1 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * img[[y, x + k]];
                }
                rows[[y, x]] = acc;
            }
        }
        let mut out = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
        for y in 0..h - SSIM_WINDOW + 1 {
            for x in 0..w - SSIM_WINDOW + 1 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * rows[[y + k, x]];
                }
                out[[y, x]] = acc;
            }
        }
        out
    };

    let mu_x = filter(x_hat);
    let mu_y = filter(x_ref);
    let xx = filter(&(x_hat * x_hat));
    let yy = filter(&(x_ref * x_ref));
    let xy = filter(&(x_hat * x_ref));

    let mut total = 0.0;
    let mut count = 0usize;
    for ((&mx, &my), ((&sxx, &syy), &sxy)) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Normalized root-mean-square error: ||x_hat − x_ref||₂ / ||x_ref||₂.
pub fn nrmse(x_hat: &Array2<f64>, x_ref: &Array2<f64>) -> Result<f64> {
    if x_hat.dim() != x_ref.dim() {
        return Err(Error::dim("nrmse shapes", format!("{:?}", x_ref.dim()), format!("{:?}", x_hat.dim())));
    }
    let ref_norm = x_ref.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 {
        return Err(Error::Config("nrmse undefined for a zero-norm reference".into()));
    }
    let diff_norm = x_hat
        .iter()
        .zip(x_ref.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff_norm / ref_norm)
}

/// Overlap metrics between binary masks: dice = 2|A∩B|/(|A|+|B|),
/// recall = |A∩B|/|B| with A = prediction, B = truth. Two empty masks agree
/// perfectly → (1, 1); an empty truth with a nonempty prediction → (0, 0).
pub fn dice_recall(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<(f64, f64)> {
    if pred.dim() != truth.dim() {
        return Err(Error::dim("mask shapes", format!("{:?}", truth.dim()), format!("{:?}", pred.dim())));
    }
    if pred.iter().chain(truth.iter()).any(|&v| v > 1) {
        return Err(Error::Data("overlap metrics need strictly binary masks".into()));
    }
    let a: usize = pred.iter().map(|&v| v as usize).sum();
    let b: usize = truth.iter().map(|&v| v as usize).sum();
    let inter: usize = pred
        .iter()
        .zip(truth.iter())
        .map(|(&p, &t)| (p & t) as usize)
        .sum();
    if a == 0 && b == 0 {
        return Ok((1.0, 1.0));
    }
    if b == 0 {
        return Ok((0.0, 0.0));
    }
    let dice = 2.0 * inter as f64 / (a + b) as f64;
    let recall = inter as f64 / b as f64;
    Ok((dice, recall))
}

// ── Aggregation ────────────────────────────────────────────────────────────

/// Per-slice metric row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub subject_id: u32,
    pub slice_index: u32,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricStat { mean, std }
}

/// Aggregate over slices; overlap stats appear only when every row has them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub n: usize,
    pub psnr: MetricStat,
    pub ssim: MetricStat,
    pub nrmse: MetricStat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<MetricStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<MetricStat>,
}

pub fn aggregate(rows: &[SliceMetrics]) -> Result<MetricAggregate> {
    if rows.is_empty() {
        return Err(Error::Data("cannot aggregate zero metric rows".into()));
    }
    let collect = |f: fn(&SliceMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let dices: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
    let recalls: Vec<f64> = rows.iter().filter_map(|r| r.recall).collect();
    Ok(MetricAggregate {
        n: rows.len(),
        psnr: stat(&collect(|r| r.psnr)),
        ssim: stat(&collect(|r| r.ssim)),
        nrmse: stat(&collect(|r| r.nrmse)),
        dice: (dices.len() == rows.len()).then(|| stat(&dices)),
        recall: (recalls.len() == rows.len()).then(|| stat(&recalls)),
    })
}
