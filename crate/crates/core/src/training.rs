//! The combined objective and the training loop: seeded shuffling,
//! whole-window batches, gradient clipping, Adam with per-epoch
//! exponential learning-rate decay, and a structured epoch log.

use std::fmt;
use std::time::Instant;

use rand::Rng;

use crate::autodiff::optim::{adam_step, clip_grad_norm, AdamState};
use crate::autodiff::tape::{GradError, Tape};
use crate::data::NormalizedWindow;
use crate::decoder::huber_reconstruction_loss;
use crate::destination::{destination_nll, mode_collapse_loss, RegularizerConfig};
use crate::model::{BatchFeatures, GeneratorModel};
use crate::rng::{rng_for, STREAM_TRAIN};

#[derive(Debug)]
pub enum TrainError {
    Grad(GradError),
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },
    EmptyDataset,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Grad(e) => write!(f, "training: {e}"),
            TrainError::NonFiniteLoss { epoch, batch, term } => {
                write!(f, "non-finite {term} loss at epoch {epoch}, batch {batch}")
            }
            TrainError::EmptyDataset => write!(f, "no training windows"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<GradError> for TrainError {
    fn from(e: GradError) -> Self {
        TrainError::Grad(e)
    }
}

/// Unweighted loss terms plus the lambda-weighted total.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub destination: f64,
    pub mode_collapse: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Learning rate at an epoch: lr0 * decay^epoch.
pub fn lr_at(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Build the combined loss for one batch on the given tape. Returns the
/// scalar loss var and the term breakdown.
pub fn combined_loss(
    tape: &mut Tape,
    model: &GeneratorModel,
    bound: &crate::model::Bound,
    feats: &BatchFeatures,
) -> Result<(crate::autodiff::tape::Var, LossBreakdown), GradError> {
    let cfg = &model.config;
    let e = model.encode(tape, bound, feats)?;
    let mixture = model.mixture(tape, bound, e)?;
    let dest = tape.constant_from_f32(&feats.dest, feats.n, 2)?;
    let nll = destination_nll(tape, &mixture, dest)?;
    let reg_cfg = RegularizerConfig {
        alpha1: cfg.reg_alpha1,
        alpha2: cfg.reg_alpha2,
        alpha3: cfg.reg_alpha3,
        beta1: cfg.reg_beta1,
        beta2: cfg.reg_beta2,
        beta3: cfg.reg_beta3,
    };
    let reg = mode_collapse_loss(tape, &mixture, &reg_cfg)?;
    let roll = model.rollout(tape, bound, e, dest)?;
    let recon = huber_reconstruction_loss(
        tape,
        &roll,
        &feats.future_steps,
        feats.n,
        cfg.decoder_huber_delta,
    )?;

    let w_nll = tape.affine(nll, cfg.train_lambda1, 0.0)?;
    let w_reg = tape.affine(reg, cfg.train_lambda2, 0.0)?;
    let w_recon = tape.affine(recon, cfg.train_lambda3, 0.0)?;
    let partial = tape.add(w_nll, w_reg)?;
    let total = tape.add(partial, w_recon)?;

    let breakdown = LossBreakdown {
        destination: tape.scalar_value(nll),
        mode_collapse: tape.scalar_value(reg),
        reconstruction: tape.scalar_value(recon),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub destination: f64,
    pub mode_collapse: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One record per line, stable field order, ready for plotting.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "epoch={} destination={:.6} mode_collapse={:.6} reconstruction={:.6} total={:.6} lr={:.8} grad_norm={:.6} wall_ms={}\n",
                r.epoch, r.destination, r.mode_collapse, r.reconstruction, r.total, r.lr,
                r.grad_norm, r.wall_ms
            ));
        }
        out
    }
}

/// Train in place. Windows are shuffled each epoch with the seeded
/// stream; batches group whole windows. The epoch hook runs after each
/// epoch (for periodic checkpoints).
pub fn train(
    model: &mut GeneratorModel,
    windows: &[NormalizedWindow],
    seed: u64,
    mut epoch_hook: impl FnMut(usize, &GeneratorModel),
) -> Result<TrainLog, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let epochs = model.config.train_epochs;
    let batch_size = model.config.train_batch_size.max(1);
    let mut rng = rng_for(seed, STREAM_TRAIN);
    let mut adam = AdamState::new(&model.params);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..epochs {
        let started = Instant::now();
        // Fisher-Yates with the seeded stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let lr = lr_at(epoch, model.config.train_lr0, model.config.train_decay);
        let mut sums = LossBreakdown::default();
        let mut norm_sum = 0.0f64;
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&NormalizedWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let feats = BatchFeatures::from_windows(&batch);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let (loss, breakdown) = combined_loss(&mut tape, model, &bound, &feats)?;
            for (value, term) in [
                (breakdown.destination, "destination"),
                (breakdown.mode_collapse, "mode_collapse"),
                (breakdown.reconstruction, "reconstruction"),
                (breakdown.total, "total"),
            ] {
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        term,
                    });
                }
            }
            tape.backward(loss)?;
            model.params.zero_grads();
            model.params.absorb_grads(&tape, &bound.vars);
            let pre_clip = model.params.grad_norm();
            clip_grad_norm(&mut model.params, model.config.train_clip_norm)?;
            adam_step(&mut model.params, &mut adam, lr)?;

            sums.destination += breakdown.destination;
            sums.mode_collapse += breakdown.mode_collapse;
            sums.reconstruction += breakdown.reconstruction;
            sums.total += breakdown.total;
            norm_sum += pre_clip;
            batches += 1;
        }

        let inv = 1.0 / batches as f64;
        log.records.push(EpochRecord {
            epoch,
            destination: sums.destination * inv,
            mode_collapse: sums.mode_collapse * inv,
            reconstruction: sums.reconstruction * inv,
            total: sums.total * inv,
            lr,
            grad_norm: norm_sum * inv,
            wall_ms: started.elapsed().as_millis(),
        });
        epoch_hook(epoch, model);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{build_windows, normalize_window, preset, synth_scene};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.encoder_node_hidden = 8;
        cfg.encoder_edge_hidden = 8;
        cfg.decoder_hidden = 8;
        cfg.gmm_k = 2;
        cfg.train_epochs = 3;
        cfg
    }

    fn crossing_windows(cfg: &Config) -> Vec<NormalizedWindow> {
        let scene = synth_scene(&preset("crossing").unwrap(), 1).unwrap();
        build_windows(&scene, cfg.data_h, cfg.data_f)
            .iter()
            .map(|w| normalize_window(w, cfg.encoder_radius))
            .collect()
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_at(0, 0.001, 0.9999), 0.001);
        assert!((lr_at(1, 0.001, 0.9999) - 0.0009999).abs() < 1e-12);
        let expected = 0.001 * 0.9999f64.powi(100);
        assert!((lr_at(100, 0.001, 0.9999) - expected).abs() < 1e-15);
        assert!((expected - 0.00099).abs() < 1e-5);
    }

    #[test]
    fn lambda_masking_reduces_to_single_term() {
        let mut cfg = tiny_config();
        cfg.train_lambda2 = 0.0;
        cfg.train_lambda3 = 0.0;
        cfg.train_lambda1 = 2.5;
        let model = GeneratorModel::new(&cfg, 1);
        let windows = crossing_windows(&cfg);
        let batch: Vec<&NormalizedWindow> = windows.iter().collect();
        let feats = BatchFeatures::from_windows(&batch);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let (_, b) = combined_loss(&mut tape, &model, &bound, &feats).unwrap();
        assert!((b.total - 2.5 * b.destination).abs() < 1e-5, "{b:?}");
    }

    #[test]
    fn all_zero_lambdas_give_zero_loss_and_gradients() {
        let mut cfg = tiny_config();
        cfg.train_lambda1 = 0.0;
        cfg.train_lambda2 = 0.0;
        cfg.train_lambda3 = 0.0;
        let mut model = GeneratorModel::new(&cfg, 1);
        let windows = crossing_windows(&cfg);
        let batch: Vec<&NormalizedWindow> = windows.iter().collect();
        let feats = BatchFeatures::from_windows(&batch);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let (loss, b) = combined_loss(&mut tape, &model, &bound, &feats).unwrap();
        assert_eq!(b.total, 0.0);
        tape.backward(loss).unwrap();
        model.params.zero_grads();
        model.params.absorb_grads(&tape, &bound.vars);
        assert_eq!(model.params.grad_norm(), 0.0);
    }

    #[test]
    fn total_is_dot_product_of_lambdas_and_terms() {
        let mut cfg = tiny_config();
        cfg.train_lambda1 = 0.7;
        cfg.train_lambda2 = 1.3;
        cfg.train_lambda3 = 0.2;
        let model = GeneratorModel::new(&cfg, 2);
        let windows = crossing_windows(&cfg);
        let batch: Vec<&NormalizedWindow> = windows.iter().collect();
        let feats = BatchFeatures::from_windows(&batch);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let (_, b) = combined_loss(&mut tape, &model, &bound, &feats).unwrap();
        let dot = 0.7 * b.destination + 1.3 * b.mode_collapse + 0.2 * b.reconstruction;
        assert!((b.total - dot).abs() < 1e-6, "{b:?}");
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let cfg = tiny_config();
        let windows = crossing_windows(&cfg);
        let run = || {
            let mut model = GeneratorModel::new(&cfg, 7);
            train(&mut model, &windows, 7, |_, _| {}).unwrap();
            model
        };
        let a = run();
        let b = run();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.values, y.values, "{}", x.name);
        }
    }

    #[test]
    fn batch_larger_than_dataset_is_one_batch() {
        let mut cfg = tiny_config();
        cfg.train_batch_size = 10_000;
        cfg.train_epochs = 1;
        let windows = crossing_windows(&cfg);
        let mut model = GeneratorModel::new(&cfg, 3);
        let log = train(&mut model, &windows, 3, |_, _| {}).unwrap();
        assert_eq!(log.records.len(), 1);
        assert!(log.records[0].total.is_finite());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = tiny_config();
        let mut model = GeneratorModel::new(&cfg, 3);
        assert!(matches!(
            train(&mut model, &[], 3, |_, _| {}),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn grad_norm_times_scale_respects_clip() {
        // After clipping, the surviving norm never exceeds the max.
        let cfg = {
            let mut c = tiny_config();
            c.train_clip_norm = 0.05; // force clipping
            c
        };
        let windows = crossing_windows(&cfg);
        let mut model = GeneratorModel::new(&cfg, 5);
        let batch: Vec<&NormalizedWindow> = windows.iter().collect();
        let feats = BatchFeatures::from_windows(&batch);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let (loss, _) = combined_loss(&mut tape, &model, &bound, &feats).unwrap();
        tape.backward(loss).unwrap();
        model.params.zero_grads();
        model.params.absorb_grads(&tape, &bound.vars);
        let pre = model.params.grad_norm();
        let scale = clip_grad_norm(&mut model.params, cfg.train_clip_norm).unwrap();
        assert!(pre * scale <= cfg.train_clip_norm + 1e-6);
        assert!(model.params.grad_norm() <= cfg.train_clip_norm + 1e-6);
    }

    #[test]
    fn epoch_log_has_stable_field_order() {
        let cfg = tiny_config();
        let windows = crossing_windows(&cfg);
        let mut model = GeneratorModel::new(&cfg, 9);
        let log = train(&mut model, &windows, 9, |_, _| {}).unwrap();
        let text = log.render();
        for line in text.lines() {
            assert!(line.starts_with("epoch="), "{line}");
            let fields: Vec<&str> = line.split(' ').map(|f| f.split('=').next().unwrap()).collect();
            assert_eq!(
                fields,
                vec![
                    "epoch",
                    "destination",
                    "mode_collapse",
                    "reconstruction",
                    "total",
                    "lr",
                    "grad_norm",
                    "wall_ms"
                ]
            );
        }
    }

    #[test]
    fn combined_loss_gradients_pass_fd_check_on_tiny_model() {
        use crate::autodiff::gradcheck::finite_difference_check;
        let mut cfg = tiny_config();
        cfg.encoder_node_hidden = 4;
        cfg.encoder_edge_hidden = 4;
        cfg.decoder_hidden = 4;
        // K=2 with beta2=2 would initialize the weight hinge exactly at
        // its kink, where central differences are ill-posed.
        cfg.gmm_k = 3;
        let mut model = GeneratorModel::new(&cfg, 6);
        let windows = crossing_windows(&cfg);
        let batch: Vec<&NormalizedWindow> = windows.iter().take(1).collect();
        let feats = BatchFeatures::from_windows(&batch);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let (loss, _) = combined_loss(&mut tape, &model, &bound, &feats).unwrap();
        tape.backward(loss).unwrap();
        model.params.zero_grads();
        model.params.absorb_grads(&tape, &bound.vars);
        let analytic: Vec<Vec<f32>> = model.params.iter().map(|p| p.grad.clone()).collect();

        let config = model.config.clone();
        let ids = model.ids;
        let report = finite_difference_check(&mut model.params, 1e-3, &analytic, |ps| {
            let probe = GeneratorModel {
                config: config.clone(),
                params: ps.clone(),
                ids,
            };
            let mut t = Tape::new();
            let bound = probe.bind(&mut t)?;
            let (l, _) = combined_loss(&mut t, &probe, &bound, &feats)?;
            Ok(t.scalar_value(l))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
