//! Mini-batch training loop with plateau scheduling and best-validation
//! checkpointing.
//!
//! One graph is built per pair; batch members run in parallel but their
//! gradients are reduced in pair order, so the result is bit-identical
//! regardless of thread count.

use super::network::{attach_losses, init_params, loss_breakdown, network_forward};
use super::{ArpsConfig, LossBreakdown};
use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use arpsreg_nn::{Adam, AdamConfig, ParamStore, PlateauScheduler};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arps: ArpsConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub step_penalty_eps: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for validation when the caller
    /// does not split explicitly.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arps: ArpsConfig::default(),
            epochs: 20,
            batch_size: 16,
            learning_rate: 1.0e-4,
            beta1: 0.9,
            beta2: 0.999,
            plateau_patience: 5,
            plateau_factor: 0.5,
            step_penalty_eps: 1.0e-8,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arps.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1.0e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_aff: f64,
    pub l_reg: f64,
    pub l_ctr: f64,
    pub l_stp: f64,
    pub total: f64,
    pub val_total: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub best: ParamStore<f32>,
    /// Parameters after the final epoch.
    pub final_params: ParamStore<f32>,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut acc = LossBreakdown {
        l_aff: 0.0,
        l_reg: 0.0,
        l_ctr: 0.0,
        l_stp: 0.0,
        total: 0.0,
    };
    for p in parts {
        acc.l_aff += p.l_aff;
        acc.l_reg += p.l_reg;
        acc.l_ctr += p.l_ctr;
        acc.l_stp += p.l_stp;
        acc.total += p.total;
    }
    acc.l_aff /= n;
    acc.l_reg /= n;
    acc.l_ctr /= n;
    acc.l_stp /= n;
    acc.total /= n;
    acc
}

/// Forward + backward on one pair; returns per-parameter gradients and the
/// loss values.
fn pair_gradients(
    pair: &RegistrationPair,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
    let mut out = network_forward(&pair.source, &pair.target, store, &cfg.arps, true)?;
    let nodes = attach_losses(&mut out, pair, cfg.step_penalty_eps);
    out.graph.backward(nodes.total);
    let grads = out.bound.grads(&out.graph);
    Ok((grads, loss_breakdown(&out.graph, &nodes)))
}

fn validation_loss(
    pairs: &[RegistrationPair],
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let totals: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|pair| {
            let mut out = network_forward(&pair.source, &pair.target, store, &cfg.arps, false)?;
            let nodes = attach_losses(&mut out, pair, cfg.step_penalty_eps);
            Ok(loss_breakdown(&out.graph, &nodes).total)
        })
        .collect();
    let mut sum = 0.0;
    for t in totals {
        sum += t?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Trains from scratch on `train_pairs`, tracking `val_pairs` for the
/// plateau schedule and best-checkpoint selection.
pub fn train(
    train_pairs: &[RegistrationPair],
    val_pairs: &[RegistrationPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    let mut store: ParamStore<f32> = init_params(&cfg.arps, derive_seed(cfg.seed, "init"))?;
    let mut adam = Adam::new(cfg.adam(), &store);
    let mut plateau = PlateauScheduler::new(cfg.plateau_patience, cfg.plateau_factor);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let lr_used = adam.learning_rate();
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_parts = Vec::with_capacity(train_pairs.len());
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(Vec<Vec<f32>>, LossBreakdown)>> = batch
                .par_iter()
                .map(|&pi| pair_gradients(&train_pairs[pi], &store, cfg))
                .collect();

            let mut acc: Option<Vec<Vec<f32>>> = None;
            for (slot, result) in results.into_iter().enumerate() {
                let (grads, breakdown) = result?;
                if !breakdown.total.is_finite() {
                    return Err(Error::NanLoss {
                        epoch,
                        batch: batch_idx,
                        pair_ids: batch.to_vec(),
                        detail: format!(
                            "pair {} produced {:?}",
                            batch[slot], breakdown
                        ),
                    });
                }
                epoch_parts.push(breakdown);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(&grads) {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            adam.step(&mut store, &grads);
        }

        let train_mean = mean_breakdown(&epoch_parts);
        let val_total = if val_pairs.is_empty() {
            train_mean.total
        } else {
            validation_loss(val_pairs, &store, cfg)?
        };

        curve.push(EpochRecord {
            epoch,
            l_aff: train_mean.l_aff,
            l_reg: train_mean.l_reg,
            l_ctr: train_mean.l_ctr,
            l_stp: train_mean.l_stp,
            total: train_mean.total,
            val_total,
            lr: lr_used,
        });

        let is_better = match &best {
            None => true,
            Some((b, _, _)) => val_total < *b,
        };
        if is_better {
            best = Some((val_total, epoch, store.clone()));
        }

        let factor = plateau.observe(val_total);
        if factor != 1.0 {
            adam.set_learning_rate(adam.learning_rate() * factor);
        }
    }

    let (best_val, best_epoch, best_store) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_store,
        final_params: store,
        curve,
        best_epoch,
        best_val,
    })
}

/// CSV with one row per epoch:
/// `epoch,l_aff,l_reg,l_ctr,l_stp,total,val_total,lr`.
pub fn write_loss_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,l_aff,l_reg,l_ctr,l_stp,total,val_total,lr")?;
    for r in curve {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.l_aff, r.l_reg, r.l_ctr, r.l_stp, r.total, r.val_total, r.lr
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shape, make_pair, PairConfig, PairMode, ShapeKind};

    fn toy_dataset(n_pairs: usize, n_points: usize, seed: u64) -> Vec<RegistrationPair> {
        let mut out = Vec::with_capacity(n_pairs);
        for i in 0..n_pairs {
            let kind = ShapeKind::all()[i % 4];
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
            let shape = gen_shape(kind, 4 * n_points, &mut rng).unwrap();
            let cfg = PairConfig {
                mode: PairMode::Duplicated,
                n_points,
                noise_sigma: 0.0,
                ..PairConfig::default()
            };
            out.push(make_pair(&shape, &cfg, &mut rng).unwrap());
        }
        out
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            arps: ArpsConfig {
                layers: 2,
                feature_dim: 4,
                heads: 2,
                components: 4,
                top_h: Some(8),
                ..ArpsConfig::default()
            },
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn short_run_produces_curve_and_checkpoint() {
        let pairs = toy_dataset(8, 32, 400);
        let (train_split, val_split) = pairs.split_at(6);
        let outcome = train(train_split, val_split, &tiny_train_cfg()).unwrap();
        assert_eq!(outcome.curve.len(), 2);
        assert!(outcome.best_val.is_finite());
        assert!(outcome.best_epoch >= 1);
        assert_eq!(outcome.best.len(), outcome.final_params.len());
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = toy_dataset(6, 24, 500);
        let (tr, va) = pairs.split_at(4);
        let cfg = tiny_train_cfg();
        let a = train(tr, va, &cfg).unwrap();
        let b = train(tr, va, &cfg).unwrap();
        for (ra, rb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            assert_eq!(ra.val_total.to_bits(), rb.val_total.to_bits());
        }
        for (ea, eb) in a.final_params.entries().iter().zip(b.final_params.entries()) {
            let bits_a: Vec<u32> = ea.data.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = eb.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn csv_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let rec = EpochRecord {
            epoch: 1,
            l_aff: 0.5,
            l_reg: 0.25,
            l_ctr: 0.125,
            l_stp: 0.0,
            total: 0.875,
            val_total: 0.9,
            lr: 1e-3,
        };
        write_loss_csv(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,l_aff,l_reg,l_ctr,l_stp,total,val_total,lr\n1,0.5,0.25,0.125,0,0.875,0.9,0.001\n"
        );
    }
}
