//! Self-supervised per-video training.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exposure::{build_training_set, SdrFrame, TrainingPair};
use crate::optim::{adam_step, AdamConfig};
use crate::tensor::Tensor;
use crate::unet::{init_model, ModelConfig, ModelWeights, SIZE_MULTIPLE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub lambda_cos: f64,
    pub seed: u64,
    /// Epochs without a 1% improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 128,
            adam: AdamConfig::default(),
            lambda_cos: 5.0,
            seed: 0,
            early_stop_patience: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max epochs must be >= 1".into()));
        }
        if !(self.lambda_cos >= 0.0 && self.lambda_cos.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cosine weight must be >= 0, got {}",
                self.lambda_cos
            )));
        }
        self.adam.validate()?;
        self.model.validate()
    }
}

/// Loss components of one step or epoch mean.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub residual: f64,
    pub image: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    /// Tab-separated log line: epoch, total, residual, image, seconds.
    pub fn format_line(stats: &EpochStats) -> String {
        format!(
            "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.3}",
            stats.epoch, stats.loss.total, stats.loss.residual, stats.loss.image, stats.seconds
        )
    }
}

/// Mean squared error.
pub fn residual_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(residual_loss_with_grad(pred, target)?.0)
}

pub fn residual_loss_with_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.expect_same_shape(target)?;
    let n = pred.len() as f64;
    let diff = pred.zip_map(target, |p, t| p - t)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Mean absolute error plus `lambda_cos * (1 - mean per-pixel RGB cosine)`.
pub fn image_loss(pred: &Tensor, target: &Tensor, lambda_cos: f64) -> Result<f64> {
    Ok(image_loss_with_grad(pred, target, lambda_cos)?.0)
}

/// Pixels where either RGB vector has zero norm count as cosine 1.
pub fn image_loss_with_grad(
    pred: &Tensor,
    target: &Tensor,
    lambda_cos: f64,
) -> Result<(f64, Tensor)> {
    pred.expect_same_shape(target)?;
    let [n, c, h, w] = pred.shape();
    if c != 3 {
        return Err(Error::Shape(format!(
            "image loss needs RGB tensors, got {c} channels"
        )));
    }
    let count = pred.len() as f64;
    let pixels = (n * h * w) as f64;
    let mut grad = Tensor::zeros_like(pred);
    let mut l1 = 0.0;
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let d = p - t;
        l1 += d.abs();
        *g = if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        };
    }
    l1 /= count;

    let plane = h * w;
    let mut cos_sum = 0.0;
    let pd = pred.data();
    let td = target.data();
    let gd = grad.data_mut();
    for b in 0..n {
        let base = b * 3 * plane;
        for i in 0..plane {
            let idx = [base + i, base + plane + i, base + 2 * plane + i];
            let a = idx.map(|k| pd[k]);
            let t = idx.map(|k| td[k]);
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nt = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            if na == 0.0 || nt == 0.0 {
                cos_sum += 1.0;
                continue;
            }
            let dot = a[0] * t[0] + a[1] * t[1] + a[2] * t[2];
            let cos = dot / (na * nt);
            cos_sum += cos;
            // d(-lambda/N * cos)/da
            let k = -lambda_cos / pixels;
            for ch in 0..3 {
                let dcos = t[ch] / (na * nt) - cos * a[ch] / (na * na);
                gd[idx[ch]] += k * dcos;
            }
        }
    }
    let loss = l1 + lambda_cos * (1.0 - cos_sum / pixels);
    Ok((loss, grad))
}

/// Converts a training pair to padded network tensors `(input, target_residual, target_base)`.
fn pair_tensors(pair: &TrainingPair) -> Result<[Tensor; 3]> {
    let (w, h) = (pair.input.width(), pair.input.height());
    if w % SIZE_MULTIPLE != 0 || h % SIZE_MULTIPLE != 0 {
        let pad = |img: &crate::image::Image| img.pad_to_multiple(SIZE_MULTIPLE).to_tensor();
        return Ok([
            pad(&pair.input.image),
            pad(&pair.target_residual.0),
            pad(&pair.target_base.image),
        ]);
    }
    Ok([
        pair.input.image.to_tensor(),
        pair.target_residual.0.to_tensor(),
        pair.target_base.image.to_tensor(),
    ])
}

/// Forward and backward for one pair; gradients are accumulated into `weights`.
///
/// The reconstructed base is the predicted residual applied to the network
/// input.
pub fn total_loss(
    pair: &TrainingPair,
    weights: &mut ModelWeights,
    lambda_cos: f64,
) -> Result<LossBreakdown> {
    let [input, target_delta, target_base] = pair_tensors(pair)?;
    let cache = weights.forward_train(&input)?;
    let delta = &cache.output;
    let (residual, g_res) = residual_loss_with_grad(delta, &target_delta)?;
    let recon = delta.zip_map(&input, |d, x| d * x)?;
    let (image, g_img) = image_loss_with_grad(&recon, &target_base, lambda_cos)?;
    let mut g_delta = g_img.zip_map(&input, |g, x| g * x)?;
    g_delta.add_assign(&g_res)?;
    weights.backward(&cache, &g_delta)?;
    Ok(LossBreakdown {
        total: residual + image,
        residual,
        image,
    })
}

/// Loss of one pair without touching gradients.
pub fn evaluate_loss(
    pair: &TrainingPair,
    weights: &ModelWeights,
    lambda_cos: f64,
) -> Result<LossBreakdown> {
    let [input, target_delta, target_base] = pair_tensors(pair)?;
    let delta = weights.forward(&input)?;
    let residual = residual_loss(&delta, &target_delta)?;
    let recon = delta.zip_map(&input, |d, x| d * x)?;
    let image = image_loss(&recon, &target_base, lambda_cos)?;
    Ok(LossBreakdown {
        total: residual + image,
        residual,
        image,
    })
}

fn epoch_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((epoch as u64) << 8)
        .wrapping_add(stream)
}

/// Trains a fresh network on one video.
pub fn train_video(
    video: &[SdrFrame],
    fps: f64,
    config: &TrainConfig,
) -> Result<(ModelWeights, TrainReport)> {
    train_video_with(video, fps, config, |_, _| Ok(()))
}

/// [`train_video`] with a hook called after every epoch.
pub fn train_video_with<F>(
    video: &[SdrFrame],
    fps: f64,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelWeights, TrainReport)>
where
    F: FnMut(&EpochStats, &ModelWeights) -> Result<()>,
{
    config.validate()?;
    if video.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty video".into()));
    }
    let mut weights = init_model(config.model, config.seed)?;
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut pairs = build_training_set(video, fps, epoch_seed(config.seed, epoch, 1))?;
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(
            config.seed,
            epoch,
            2,
        )));

        let mut sum = LossBreakdown::default();
        for pair in &pairs {
            weights.zero_grad();
            let loss = total_loss(pair, &mut weights, config.lambda_cos)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {} in epoch {epoch}",
                    loss.total
                )));
            }
            for p in &mut weights.params {
                adam_step(p, &config.adam);
            }
            sum.total += loss.total;
            sum.residual += loss.residual;
            sum.image += loss.image;
        }
        let n = pairs.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: LossBreakdown {
                total: sum.total / n,
                residual: sum.residual / n,
                image: sum.image / n,
            },
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", TrainReport::format_line(&stats));
        on_epoch(&stats, &weights)?;
        let mean = stats.loss.total;
        report.epochs.push(stats);

        if config.early_stop_patience > 0 {
            if mean < best * 0.99 {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.early_stop_patience {
                    break;
                }
            }
        }
    }
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn t(vals: &[f64]) -> Tensor {
        Tensor::new([1, 3, 1, vals.len() / 3], vals.to_vec()).unwrap()
    }

    #[test]
    fn residual_loss_examples() {
        let a = Tensor::full([1, 3, 2, 2], 0.4);
        assert_eq!(residual_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((residual_loss(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        let p = Tensor::full([1, 1, 1, 1], 0.3);
        let q = Tensor::full([1, 1, 1, 1], 0.7);
        assert!((residual_loss(&p, &q).unwrap() - 0.16).abs() < 1e-15);
        assert!(residual_loss(&p, &a).is_err());
    }

    #[test]
    fn image_loss_examples() {
        let x = t(&[0.2, 0.5, 0.9]);
        assert!(image_loss(&x, &x, 5.0).unwrap().abs() < 1e-15);

        let p = t(&[1.0, 0.0, 0.0]);
        let q = t(&[0.0, 1.0, 0.0]);
        let l = image_loss(&p, &q, 5.0).unwrap();
        assert!((l - (2.0 / 3.0 + 5.0)).abs() < 1e-12);
        assert!((l - 5.6667).abs() < 1e-4);

        let target = t(&[0.1, 0.3, 0.2, 0.4, 0.05, 0.6]);
        let double = target.scale(2.0);
        let l = image_loss(&double, &target, 5.0).unwrap();
        assert!((l - target.mean()).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_pixels_count_as_aligned() {
        let zero = t(&[0.0, 0.0, 0.0]);
        let q = t(&[0.1, 0.2, 0.3]);
        let (l, g) = image_loss_with_grad(&zero, &q, 5.0).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn image_loss_gradient_matches_differences() {
        let p = t(&[0.3, 0.1, 0.7, 0.25, 0.6, 0.2]);
        let q = t(&[0.2, 0.4, 0.5, 0.3, 0.3, 0.1]);
        let (_, g) = image_loss_with_grad(&p, &q, 5.0).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut up = p.clone();
            up.data_mut()[i] += h;
            let mut dn = p.clone();
            dn.data_mut()[i] -= h;
            let fd =
                (image_loss(&up, &q, 5.0).unwrap() - image_loss(&dn, &q, 5.0).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() < 1e-7,
                "{i}: {fd} vs {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda_cos: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejects_empty_video() {
        assert!(train_video(&[], 30.0, &TrainConfig::default()).is_err());
    }

    #[test]
    fn one_epoch_one_frame_is_one_step() {
        let frame = SdrFrame::quantized(
            &Image::from_fn(8, 8, |c, y, x| 0.1 * c as f64 + 0.05 * ((x + y) % 4) as f64),
            0.0,
        );
        let config = TrainConfig {
            max_epochs: 1,
            model: ModelConfig { base_channels: 2 },
            ..Default::default()
        };
        let (w, report) = train_video(&[frame], 30.0, &config).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.final_epoch(), 1);
        assert!(w.params.iter().all(|p| p.step_count == 1));
    }
}
