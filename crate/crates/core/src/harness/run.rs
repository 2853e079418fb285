//! End-to-end training runs: dataset, model and trainer wired together from
//! one config, with per-epoch metrics written to CSV and the final weights
//! to a checkpoint.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::generate_synthetic_dataset;
use crate::harness::metrics::{emit_metrics_csv, MetricsRow, Split};
use crate::numerics::{write_checkpoint, Sgd};
use crate::rng::{stream_rng, Stream};
use crate::train::Trainer;
use crate::transformer::Model;

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub mix_invocations: usize,
    pub final_val_accuracy: f64,
}

/// Trains a model per the config and writes `metrics.csv` and `model.tkmx`
/// into the output directory. With `timings` off the outputs are a pure
/// function of the config.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, val) = generate_synthetic_dataset::<f32>(&cfg.dataset, cfg.seed)?;
    let mix_mode = cfg.mix_mode();
    let model = Model::<f32>::new(&cfg.model, mix_mode.uses_scorenet(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    if cfg.clip_norm > 0.0 {
        opt = opt.with_clip_norm(cfg.clip_norm as f32);
    }
    let mut trainer = Trainer::new(model, opt, mix_mode, cfg.seed)?;
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);

    let val_indices: Vec<usize> = (0..val.len()).collect();
    let (val_images, val_labels) = val.batch(&val_indices)?;

    let mut rows = Vec::with_capacity(cfg.epochs * 2);
    let mut final_val_accuracy = 0.0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let train_start = Instant::now();
        let mut seen = 0usize;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut score_sum = 0.0;
        let mut num_mixed = 0usize;
        let mut tokens_total = 0.0;
        let mut realized_gain = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch(chunk)?;
            let m = trainer.train_step(&images, &labels)?;
            let w = chunk.len() as f64;
            seen += chunk.len();
            loss_sum += m.loss * w;
            acc_sum += m.accuracy * w;
            score_sum += m.scorenet_loss * w;
            num_mixed += m.num_mixed;
            tokens_total += m.mean_tokens_replaced * m.num_mixed as f64;
            realized_gain += m.realized_gain;
        }
        let train_ms = train_start.elapsed().as_secs_f64() * 1e3;
        let n = seen as f64;
        rows.push(MetricsRow {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: acc_sum / n,
            scorenet_loss: score_sum / n,
            num_mixed,
            mean_tokens_replaced: if num_mixed > 0 {
                tokens_total / num_mixed as f64
            } else {
                0.0
            },
            realized_gain,
            wall_ms: if cfg.timings { train_ms } else { 0.0 },
        });

        let val_start = Instant::now();
        let (val_loss, val_acc) = trainer.evaluate(&val_images, &val_labels)?;
        let val_ms = val_start.elapsed().as_secs_f64() * 1e3;
        final_val_accuracy = val_acc;
        rows.push(MetricsRow {
            epoch,
            split: Split::Val,
            loss: val_loss,
            accuracy: val_acc,
            scorenet_loss: 0.0,
            num_mixed: 0,
            mean_tokens_replaced: 0.0,
            realized_gain: 0.0,
            wall_ms: if cfg.timings { val_ms } else { 0.0 },
        });
    }

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let checkpoint_path = cfg.out_dir.join("model.tkmx");
    emit_metrics_csv(&rows, &metrics_path)?;
    write_checkpoint(&checkpoint_path, trainer.model().params())?;

    Ok(RunOutput {
        rows,
        metrics_path,
        checkpoint_path,
        mix_invocations: trainer.mix_invocations(),
        final_val_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{Mode, RunConfig};
    use crate::harness::metrics::parse_metrics_csv;
    use crate::numerics::read_checkpoint;
    use crate::transformer::ModelConfig;

    fn tiny(mode: Mode, out: &std::path::Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 1,
            depth: 2,
            heads: 2,
            dim: 8,
            num_classes: 3,
            htm_layer: Some(1),
            vtm_layer: Some(2),
            kappa: 2,
            rho: 0.0,
            ..ModelConfig::default()
        };
        cfg.dataset.classes = 3;
        cfg.dataset.image_size = 8;
        cfg.dataset.samples_per_class = 10;
        cfg.batch_size = 8;
        cfg.epochs = 2;
        cfg.mode = mode;
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn run_writes_parseable_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Mode::Baseline, dir.path());
        let out = run_training(&cfg).unwrap();
        assert_eq!(out.rows.len(), cfg.epochs * 2);
        assert!(out.metrics_path.exists());
        assert!(out.checkpoint_path.exists());

        let text = std::fs::read_to_string(&out.metrics_path).unwrap();
        let parsed = parse_metrics_csv(&text).unwrap();
        assert_eq!(parsed.len(), out.rows.len());
        for (a, b) in parsed.iter().zip(&out.rows) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.split, b.split);
            assert!((a.loss - b.loss).abs() < 1e-6);
            assert_eq!(a.num_mixed, b.num_mixed);
        }

        let params = read_checkpoint::<f32>(&out.checkpoint_path).unwrap();
        assert!(!params.is_empty());
    }

    #[test]
    fn same_seed_reproduces_outputs_byte_for_byte() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let out1 = run_training(&tiny(Mode::Htm, d1.path())).unwrap();
        let out2 = run_training(&tiny(Mode::Htm, d2.path())).unwrap();
        let csv1 = std::fs::read(&out1.metrics_path).unwrap();
        let csv2 = std::fs::read(&out2.metrics_path).unwrap();
        assert_eq!(csv1, csv2);
        let ckpt1 = std::fs::read(&out1.checkpoint_path).unwrap();
        let ckpt2 = std::fs::read(&out2.checkpoint_path).unwrap();
        assert_eq!(ckpt1, ckpt2);
    }

    #[test]
    fn baseline_never_invokes_mixing() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&tiny(Mode::Baseline, dir.path())).unwrap();
        assert_eq!(out.mix_invocations, 0);
        for row in &out.rows {
            assert_eq!(row.num_mixed, 0);
            assert_eq!(row.scorenet_loss, 0.0);
        }
    }

    #[test]
    fn zero_threshold_gates_every_instance_out() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Mode::Htm, dir.path());
        cfg.model.tau = 0.0;
        let out = run_training(&cfg).unwrap();
        assert!(out.mix_invocations > 0);
        for row in out.rows.iter().filter(|r| r.split == Split::Train) {
            assert_eq!(row.num_mixed, 0);
            assert_eq!(row.realized_gain, 0.0);
        }
    }

    #[test]
    fn timings_flag_fills_wall_ms() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Mode::Baseline, dir.path());
        cfg.timings = true;
        cfg.epochs = 1;
        let out = run_training(&cfg).unwrap();
        assert!(out.rows.iter().all(|r| r.wall_ms > 0.0));
    }
}
