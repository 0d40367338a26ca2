//! Desk-scale training loop: patch sampling, mean-absolute-error loss,
//! Adam, and full-frame evaluation.
//!
//! Determinism: the batch order comes from the config seed, batch elements
//! run forward/backward on independent tapes (possibly in parallel), and
//! the gradient reduction always folds in batch index order, so runs are
//! bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Parameter, Tape, Tensor};
use crate::data::{psnr, ssim, DatasetPair};
use crate::error::{MagicError, Result};
use crate::topology::MagicModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Square patch edge; must be a multiple of 16.
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 64,
            batch_size: 4,
            epochs: 8,
            steps_per_epoch: 50,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(MagicError::Config(format!(
                "patch size must be a positive multiple of 16, got {}",
                self.patch_size
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(MagicError::Config(
                "batch size, epochs, and steps per epoch must be positive".into(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(MagicError::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with per-parameter first/second moment state.
struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Parameter<f32>]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Parameter<f32>], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.learning_rate as f32;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let eps = cfg.epsilon as f32;
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for (idx, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f32]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            // stability projection (|w1| <= 0.99 on IIR feedback weights)
            p.apply_constraint();
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Held-out (mean PSNR, mean SSIM) per epoch, when a test set is given.
    pub eval_curve: Vec<(f64, f64)>,
    pub final_eval: Option<EvalReport>,
}

impl TrainReport {
    /// `epoch,loss[,psnr,ssim]` rows.
    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from(if self.eval_curve.is_empty() {
            "epoch,loss\n"
        } else {
            "epoch,loss,psnr,ssim\n"
        });
        for (i, loss) in self.loss_curve.iter().enumerate() {
            match self.eval_curve.get(i) {
                Some((p, m)) => s.push_str(&format!("{i},{loss},{p},{m}\n")),
                None => s.push_str(&format!("{i},{loss}\n")),
            }
        }
        s
    }
}

fn crop_patch(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let [_, c, _, _] = t.shape();
    let mut out = Tensor::zeros([1, c, size, size]);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                let v = t.at(0, ch, y0 + y, x0 + x);
                out.set(0, ch, y, x, v);
            }
        }
    }
    out
}

/// MAE over the active output channels of one (input, target) pair,
/// recorded on a fresh tape. Returns the loss value and per-parameter
/// gradients.
fn loss_and_grads(
    model: &MagicModel<f32>,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
) -> Result<(f64, Vec<(usize, Vec<f32>)>)> {
    let prepared = model.prepare_input(input)?;
    let mut tape = Tape::new();
    let x = tape.input(prepared);
    let out = model.forward_on_tape(&mut tape, x)?;
    let active = tape.slice_channels(out, 0, model.active_out)?;
    let t = tape.input(target.clone());
    let diff = tape.sub(active, t)?;
    let absdiff = tape.abs(diff);
    let loss = tape.mean_all(absdiff);
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward_grads(loss)?;
    Ok((value, grads))
}

/// Train in place. Picks `active_in`/`active_out` from the dataset's
/// channel counts, samples random patches, and applies the IIR stability
/// projection after every optimizer step.
pub fn train(
    model: &mut MagicModel<f32>,
    train_set: &[DatasetPair],
    test_set: &[DatasetPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(MagicError::Input("training dataset is empty".into()));
    }
    for (i, p) in train_set.iter().enumerate() {
        let [_, _, h, w] = p.input.shape();
        if h < cfg.patch_size || w < cfg.patch_size {
            return Err(MagicError::Config(format!(
                "image {i} ({h}x{w}) is smaller than the {}-pixel patch",
                cfg.patch_size
            )));
        }
    }
    model.active_in = train_set[0].input.channels();
    model.active_out = train_set[0].target.channels();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut eval_curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        for step in 0..cfg.steps_per_epoch {
            let batch: Vec<(Tensor<f32>, Tensor<f32>)> = (0..cfg.batch_size)
                .map(|_| {
                    let pair = &train_set[rng.gen_range(0..train_set.len())];
                    let [_, _, h, w] = pair.input.shape();
                    let y0 = rng.gen_range(0..=h - cfg.patch_size);
                    let x0 = rng.gen_range(0..=w - cfg.patch_size);
                    (
                        crop_patch(&pair.input, y0, x0, cfg.patch_size),
                        crop_patch(&pair.target, y0, x0, cfg.patch_size),
                    )
                })
                .collect();

            let results: Vec<Result<(f64, Vec<(usize, Vec<f32>)>)>> = batch
                .par_iter()
                .map(|(input, target)| loss_and_grads(model, input, target))
                .collect();

            model.zero_grads();
            let mut batch_loss = 0.0f64;
            let inv = 1.0 / cfg.batch_size as f32;
            for r in results {
                let (value, grads) = r?;
                batch_loss += value;
                for (pidx, g) in grads {
                    let dst = model.params[pidx].tensor.grad_mut();
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += *s * inv;
                    }
                }
            }
            batch_loss /= cfg.batch_size as f64;
            if !batch_loss.is_finite() {
                return Err(MagicError::Numeric(format!(
                    "loss became non-finite at epoch {epoch} step {step} \
                     (lr {}, batch {})",
                    cfg.learning_rate, cfg.batch_size
                )));
            }
            epoch_loss += batch_loss;
            adam.step(&mut model.params, cfg);
            // The output clamp keeps the loss bounded even when weights
            // diverge, so divergence shows up in the parameters first.
            for p in &model.params {
                if !p.tensor.data().iter().all(|v| v.is_finite()) {
                    return Err(MagicError::Numeric(format!(
                        "parameter '{}' became non-finite at epoch {epoch} step {step} \
                         (lr {}, batch {})",
                        p.name, cfg.learning_rate, cfg.batch_size
                    )));
                }
            }
        }
        loss_curve.push(epoch_loss / cfg.steps_per_epoch as f64);
        if !test_set.is_empty() {
            let e = evaluate(model, test_set)?;
            eval_curve.push((e.mean_psnr_out, e.mean_ssim_out));
        }
    }
    model.zero_grads();
    let final_eval =
        if test_set.is_empty() { None } else { Some(evaluate(model, test_set)?) };
    Ok(TrainReport { loss_curve, eval_curve, final_eval })
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub index: usize,
    pub psnr_in: f64,
    pub ssim_in: f64,
    pub psnr_out: f64,
    pub ssim_out: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_in: f64,
    pub mean_ssim_in: f64,
    pub mean_psnr_out: f64,
    pub mean_ssim_out: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,psnr_in,ssim_in,psnr_out,ssim_out\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.6},{:.4},{:.6}\n",
                r.index, r.psnr_in, r.ssim_in, r.psnr_out, r.ssim_out
            ));
        }
        s.push_str(&format!(
            "mean,{:.4},{:.6},{:.4},{:.6}\n",
            self.mean_psnr_in, self.mean_ssim_in, self.mean_psnr_out, self.mean_ssim_out
        ));
        s
    }
}

fn take_channels(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let [n, _, h, w] = t.shape();
    let mut out = Tensor::zeros([n, k, h, w]);
    for nb in 0..n {
        for y in 0..h {
            let src = t.row(nb, y);
            out.row_mut(nb, y).copy_from_slice(&src[..k * w]);
        }
    }
    out
}

/// Full-frame evaluation: model output vs target, and distorted input vs
/// target as the improvement baseline.
pub fn evaluate(model: &MagicModel<f32>, pairs: &[DatasetPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(MagicError::Input("evaluation dataset is empty".into()));
    }
    let rows: Vec<Result<EvalRow>> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let out = model.forward(&pair.input)?;
            let out = take_channels(&out, pair.target.channels());
            Ok(EvalRow {
                index,
                psnr_in: psnr(&pair.input, &pair.target)?,
                ssim_in: ssim(&pair.input, &pair.target)?,
                psnr_out: psnr(&out, &pair.target)?,
                ssim_out: ssim(&out, &pair.target)?,
            })
        })
        .collect();
    let rows: Vec<EvalRow> = rows.into_iter().collect::<Result<_>>()?;
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr_in: rows.iter().map(|r| r.psnr_in).sum::<f64>() / n,
        mean_ssim_in: rows.iter().map(|r| r.ssim_in).sum::<f64>() / n,
        mean_psnr_out: rows.iter().map(|r| r.psnr_out).sum::<f64>() / n,
        mean_ssim_out: rows.iter().map(|r| r.ssim_out).sum::<f64>() / n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, DistortionConfig};
    use crate::topology::{build_model, reference_config, BlockKind, NetworkConfig, ScaleConfig};

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            in_channels: 3,
            out_channels: 3,
            scales: vec![
                ScaleConfig {
                    factor: 1,
                    width: 8,
                    residual: true,
                    blocks: vec![BlockKind::GroupConv { groups: 1, k: 3 }],
                },
                ScaleConfig {
                    factor: 4,
                    width: 12,
                    residual: true,
                    blocks: vec![BlockKind::HybridFirIir],
                },
            ],
            skips: vec![crate::topology::SkipConfig {
                from_scale: 0,
                to_scale: 0,
                compressed_channels: 2,
                dpcm_enabled: false,
                dpcm_bits: 8,
            }],
        }
    }

    fn tiny_dataset(n: usize) -> Vec<DatasetPair> {
        make_synthetic_dataset(n, 64, 64, &DistortionConfig::default(), 77).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            patch_size: 64,
            batch_size: 2,
            epochs: 1,
            steps_per_epoch: 2,
            learning_rate: 1e-3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut model = build_model::<f32>(&tiny_config(), 1).unwrap();
        let before: Vec<Vec<u32>> = model
            .params
            .iter()
            .map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let data = tiny_dataset(2);
        let cfg = TrainConfig { learning_rate: 0.0, ..quick_cfg() };
        train(&mut model, &data, &[], &cfg).unwrap();
        let after: Vec<Vec<u32>> = model
            .params
            .iter()
            .map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let data = tiny_dataset(3);
        let run = || {
            let mut model = build_model::<f32>(&tiny_config(), 2).unwrap();
            train(&mut model, &data, &[], &quick_cfg()).unwrap().loss_curve
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_parameter_moves_after_training_steps() {
        let mut model = build_model::<f32>(&tiny_config(), 3).unwrap();
        let before: Vec<Vec<f32>> =
            model.params.iter().map(|p| p.tensor.data().to_vec()).collect();
        let data = tiny_dataset(2);
        train(&mut model, &data, &[], &quick_cfg()).unwrap();
        for (p, old) in model.params.iter().zip(&before) {
            assert!(
                p.tensor.data().iter().zip(old).any(|(a, b)| a != b),
                "parameter {} never changed (dead branch?)",
                p.name
            );
        }
    }

    #[test]
    fn w1_projection_respected_every_step() {
        let mut model = build_model::<f32>(&tiny_config(), 4).unwrap();
        // push w1 to the boundary; steps must keep it inside
        for p in &mut model.params {
            if p.name.ends_with("iir.w1") {
                for v in p.tensor.data_mut() {
                    *v = 0.98;
                }
            }
        }
        let data = tiny_dataset(2);
        let cfg = TrainConfig { learning_rate: 0.5, ..quick_cfg() };
        train(&mut model, &data, &[], &cfg).unwrap();
        for p in &model.params {
            if p.name.ends_with("iir.w1") {
                assert!(p.tensor.data().iter().all(|v| v.abs() <= 0.99));
            }
        }
    }

    #[test]
    fn nan_parameter_aborts_with_diagnostic() {
        let mut model = build_model::<f32>(&tiny_config(), 5).unwrap();
        model.params[0].tensor.data_mut()[0] = f32::NAN;
        let data = tiny_dataset(1);
        let err = train(&mut model, &data, &[], &quick_cfg()).unwrap_err();
        assert!(matches!(err, MagicError::Numeric(_)));
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model = build_model::<f32>(&tiny_config(), 6).unwrap();
        assert!(matches!(
            train(&mut model, &[], &[], &quick_cfg()),
            Err(MagicError::Input(_))
        ));
    }

    #[test]
    fn evaluate_is_pure() {
        let model = build_model::<f32>(&tiny_config(), 7).unwrap();
        let data = tiny_dataset(2);
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        assert_eq!(a.mean_psnr_out, b.mean_psnr_out);
        assert_eq!(a.mean_ssim_out, b.mean_ssim_out);
    }

    #[test]
    fn zeroed_head_evaluates_like_a_constant_image() {
        let mut model = build_model::<f32>(&reference_config(), 8).unwrap();
        for v in model.param_named_mut("head.weight").unwrap().tensor.data_mut() {
            *v = 0.0;
        }
        for v in model.param_named_mut("head.bias").unwrap().tensor.data_mut() {
            *v = 0.5;
        }
        let data = tiny_dataset(2);
        let report = evaluate(&model, &data).unwrap();
        for (row, pair) in report.rows.iter().zip(&data) {
            let constant = Tensor::<f32>::filled(pair.target.shape(), 0.5);
            let want = psnr(&constant, &pair.target).unwrap();
            assert!((row.psnr_out - want).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_reproducible_for_fixed_batch() {
        let model = build_model::<f32>(&tiny_config(), 9).unwrap();
        let data = tiny_dataset(1);
        let (l1, _) = loss_and_grads(&model, &data[0].input, &data[0].target).unwrap();
        let (l2, _) = loss_and_grads(&model, &data[0].input, &data[0].target).unwrap();
        assert_eq!(l1, l2);
    }
}
