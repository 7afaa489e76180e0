//! The optimization loop.
//!
//! Per-image gradients of a batch are computed in parallel and summed in
//! batch order, so results do not depend on the thread count.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::datamodel::{load_patch_pair, DatasetManifest, ImagePatch, MaskPatch, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{confusion, ImageResult, MetricReport};
use crate::model::Model;
use crate::nn::Bound;
use crate::tensor::Tensor;

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::components::{connected_components, GroundTruthSegments};
use super::loss::{set_loss, LossTerms};
use super::optim::AdamW;
use super::TrainConfig;

/// One training or evaluation image with its precomputed targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: ImagePatch,
    /// Planar `[3, H, W]` copy of `image`.
    pub planar: Tensor,
    pub mask: MaskPatch,
    pub segments: GroundTruthSegments,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: ImagePatch, mask: MaskPatch) -> Result<Self> {
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::PairShape {
                image_width: image.width,
                image_height: image.height,
                mask_width: mask.width,
                mask_height: mask.height,
            });
        }
        let planar = Tensor::new([3, image.height, image.width], image.to_planar());
        let segments = connected_components(&mask);
        Ok(Sample {
            name: name.into(),
            image,
            planar,
            mask,
            segments,
        })
    }
}

pub fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<Sample>> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let (img, mask) = load_patch_pair(&root.join(&e.image), &root.join(&e.mask))?;
            Sample::new(e.image.clone(), img, mask)
        })
        .collect()
}

/// Predicts every sample and tallies pixel confusion per image.
pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<MetricReport> {
    let images = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.image)?;
            Ok(ImageResult {
                image: s.name.clone(),
                counts: confusion(&pred.mask, &s.mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_results(images))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub steps: u64,
    pub loss: f64,
    pub terms: LossTerms,
    pub val_iou: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,steps,loss,class_loss,bce_loss,dice_loss,val_iou,val_f1,val_accuracy\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.steps,
            r.loss,
            r.terms.class,
            r.terms.bce,
            r.terms.dice,
            opt(r.val_iou),
            opt(r.val_f1),
            opt(r.val_accuracy)
        )
        .unwrap();
    }
    s
}

/// Loss and gradients of one batch, averaged over its images.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub terms: LossTerms,
    pub grads: Vec<Vec<f64>>,
    /// Per-image losses in batch order.
    pub per_image: Vec<f64>,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val_iou: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params, config.lr, config.weight_decay);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            best_val_iou: None,
        })
    }

    /// Loss graph of one image; returns the loss, its terms and the
    /// gradient of every parameter.
    pub fn image_gradients(&self, sample: &Sample) -> Result<(f64, LossTerms, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.model.params);
        let out = self.model.forward(&mut g, &p, &sample.planar)?;
        let finite = out
            .decoder
            .steps
            .iter()
            .all(|s| g.value(s.masks).data().iter().chain(g.value(s.classes).data()).all(|v| v.is_finite()));
        if !finite {
            let nan = f64::NAN;
            let terms = LossTerms {
                class: nan,
                bce: nan,
                dice: nan,
            };
            return Ok((nan, terms, self.model.params.params().iter().map(|p| vec![0.0; p.value.len()]).collect()));
        }
        let w = self.config.loss_weights();
        let (loss, terms) = set_loss(&mut g, &out.decoder, &sample.segments, &w, self.config.auxiliary_loss)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss);
        let per_param = p
            .vars()
            .iter()
            .zip(self.model.params.params())
            .map(|(&v, param)| grads.take(v).unwrap_or_else(|| vec![0.0; param.value.len()]))
            .collect();
        Ok((value, terms, per_param))
    }

    pub fn batch_gradients(&self, batch: &[&Sample]) -> Result<BatchGradients> {
        let results = batch
            .par_iter()
            .map(|s| self.image_gradients(s))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.model.params.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut loss = 0.0;
        let mut terms = LossTerms::default();
        let mut per_image = Vec::with_capacity(batch.len());
        for (l, t, g) in results {
            loss += l;
            terms += t;
            per_image.push(l);
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, &b) in acc.iter_mut().zip(gi) {
                    *a += b;
                }
            }
        }
        for acc in &mut grads {
            for a in acc.iter_mut() {
                *a *= scale;
            }
        }
        Ok(BatchGradients {
            loss: loss * scale,
            terms: LossTerms {
                class: terms.class * scale,
                bce: terms.bce * scale,
                dice: terms.dice * scale,
            },
            grads,
            per_image,
        })
    }

    fn check_finite(&self, b: &BatchGradients, batch: &[&Sample], out_dir: Option<&Path>) -> Result<()> {
        let grads_ok = b.grads.iter().flatten().all(|g| g.is_finite());
        if b.loss.is_finite() && b.terms.is_finite() && grads_ok {
            return Ok(());
        }
        let detail = if b.loss.is_finite() {
            "non-finite gradient".to_string()
        } else {
            format!("loss {}", b.loss)
        };
        if let Some(dir) = out_dir {
            let dump = json!({
                "epoch": self.epoch + 1,
                "step": self.step,
                "detail": detail,
                "images": batch.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
                "per_image_loss": b.per_image.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
                "class_loss": b.terms.class.to_string(),
                "bce_loss": b.terms.bce.to_string(),
                "dice_loss": b.terms.dice.to_string(),
            });
            let text = serde_json::to_string_pretty(&dump)?;
            crate::write_atomic(&dir.join("divergence.json"), text.as_bytes())?;
        }
        Err(Error::Divergence {
            epoch: self.epoch + 1,
            step: self.step as usize,
            detail,
        })
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&Sample], out_dir: Option<&Path>) -> Result<BatchGradients> {
        let b = self.batch_gradients(batch)?;
        self.check_finite(&b, batch, out_dir)?;
        self.optimizer.update(&mut self.model.params, &b.grads);
        self.step += 1;
        Ok(b)
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config().clone(),
            train: Some(self.config.clone()),
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.optimizer), &self.meta())
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.step < m)
    }

    /// Trains until `epochs` are done or `max_steps` is reached. With an
    /// output directory, writes `history.csv` after every epoch, `last.ckpt`
    /// every `checkpoint_every` epochs and at the end, and `best.ckpt`
    /// whenever validation IoU improves.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out_dir: Option<&Path>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Manifest("training split is empty".into()));
        }
        while self.epoch < self.config.epochs && self.budget_left() {
            let order = self.epoch_order(train.len(), self.epoch);
            let (mut loss, mut terms, mut steps) = (0.0, LossTerms::default(), 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                if !self.budget_left() {
                    break;
                }
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let b = self.train_step(&batch, out_dir)?;
                loss += b.loss;
                terms += b.terms;
                steps += 1;
            }
            self.epoch += 1;
            let inv = 1.0 / steps.max(1) as f64;
            let mut record = EpochRecord {
                epoch: self.epoch,
                steps: self.step,
                loss: loss * inv,
                terms: LossTerms {
                    class: terms.class * inv,
                    bce: terms.bce * inv,
                    dice: terms.dice * inv,
                },
                val_iou: None,
                val_f1: None,
                val_accuracy: None,
            };
            let mut improved = false;
            if !val.is_empty() {
                let m = evaluate_samples(&self.model, val)?.micro()?;
                record.val_iou = Some(m.iou);
                record.val_f1 = Some(m.f1);
                record.val_accuracy = Some(m.accuracy);
                improved = self.best_val_iou.is_none_or(|b| m.iou > b);
                if improved {
                    self.best_val_iou = Some(m.iou);
                }
            }
            info!(
                "epoch {} step {} loss {:.4} val_iou {}",
                record.epoch,
                record.steps,
                record.loss,
                record.val_iou.map_or("-".to_string(), |v| format!("{v:.4}"))
            );
            self.history.push(record);
            if let Some(dir) = out_dir {
                let finished = self.epoch >= self.config.epochs || !self.budget_left();
                if finished || self.epoch.is_multiple_of(self.config.checkpoint_every) {
                    self.save(&dir.join("last.ckpt"))?;
                }
                if improved {
                    self.save(&dir.join("best.ckpt"))?;
                }
                crate::write_atomic(&dir.join("history.csv"), history_csv(&self.history).as_bytes())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthgen::{generate, SceneSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            backbone_channels: [8, 8, 8, 8],
            encoder_layers: 1,
            encoder_heads: 2,
            encoder_ffn_dim: 8,
            num_queries: 4,
            decoder_heads: 2,
            decoder_ffn_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        let spec = SceneSpec {
            image_size: 32,
            panel_count: [0, 2],
            panel_length: [6.0, 12.0],
            panel_width: [4.0, 6.0],
            seed: 1,
            ..SceneSpec::default()
        };
        generate(&spec, n)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| Sample::new(format!("{i}"), s.image, s.mask).unwrap())
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let model = Model::new(&tiny_model(), 0).unwrap();
        let before = model.params.flatten();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        t.fit(&samples(4), &[], None).unwrap();
        assert_eq!(t.step, 2);
        assert_eq!(t.model.params.flatten(), before);
    }

    #[test]
    fn same_seed_same_history() {
        let data = samples(3);
        let run = || {
            let cfg = TrainConfig {
                lr: 1e-3,
                epochs: 2,
                batch_size: 2,
                seed: 7,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(Model::new(&tiny_model(), 7).unwrap(), cfg).unwrap();
            t.fit(&data, &data[..1], None).unwrap();
            (t.history, t.model.params.flatten())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1.len(), 2);
        assert!(h1[0].val_iou.is_some());
    }

    #[test]
    fn max_steps_stops_mid_epoch() {
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 5,
            batch_size: 1,
            max_steps: Some(3),
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(Model::new(&tiny_model(), 0).unwrap(), cfg).unwrap();
        t.fit(&samples(2), &[], None).unwrap();
        assert_eq!(t.step, 3);
        assert_eq!(t.history.len(), 2);
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let data = samples(2);
        let batch: Vec<&Sample> = data.iter().collect();
        let cfg = TrainConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(Model::new(&tiny_model(), 3).unwrap(), cfg).unwrap();
        let before = t.batch_gradients(&batch).unwrap();
        // plain gradient step, small enough for the linear regime
        let flat: Vec<f64> = t.model.params.flatten();
        let g: Vec<f64> = before.grads.iter().flatten().copied().collect();
        let norm2: f64 = g.iter().map(|x| x * x).sum();
        let eta = 1e-3 / norm2.sqrt();
        let moved: Vec<f64> = flat.iter().zip(&g).map(|(p, d)| p - eta * d).collect();
        t.model.params.load_flat(&moved);
        let after = t.batch_gradients(&batch).unwrap();
        assert!(after.loss < before.loss, "{} !< {}", after.loss, before.loss);
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples(2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(Model::new(&tiny_model(), 0).unwrap(), cfg).unwrap();
        t.fit(&data, &data, Some(dir.path())).unwrap();
        for f in ["last.ckpt", "best.ckpt", "history.csv"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn divergence_is_reported_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples(1);
        let mut model = Model::new(&tiny_model(), 0).unwrap();
        let n = model.params.num_scalars();
        model.params.load_flat(&vec![f64::NAN; n]);
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        let err = t.fit(&data, &[], Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        let dump = std::fs::read_to_string(dir.path().join("divergence.json")).unwrap();
        assert!(dump.contains("\"images\""));
    }
}
