//! Stage-wise SGD training.
//!
//! Each stage computes gradients for exactly one parameter group and applies
//! plain SGD, one sample at a time. Gradients for the other groups are never
//! formed, and a byte-level snapshot check after every epoch guarantees the
//! frozen groups did not drift.
//!
//! Stage-1 gradient path (modulation MLP): with `G = dL/dlogits`,
//! `du = G * W_eff` distributes the head gradient to the per-position
//! inputs; the pooled-conditioning columns of `du` sum over positions to
//! `dc`, and because pooling is a mean over tokens, every modulated token
//! receives the upstream gradient `dc / T`, which
//! [`crate::tlm::tlm_backward`] turns into MLP parameter gradients.
//!
//! Stage-2 gradient path (head adapter): `dW_eff = G^T * u`, and with the
//! adapter `W_eff = head_w + (alpha/r) * B * A` the factors get
//! `dB = (alpha/r) * dW_eff * A^T` and `dA = (alpha/r) * B^T * dW_eff`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::model::masked_ce_and_dlogits;
use super::{ForwardCache, ParamGroup, SftError, ToyVlm, TrainConfig, TripletSample};
use crate::tensor::Matrix;
use crate::tlm::tlm_backward;

/// Per-epoch mean training loss, plus the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: u8,
    pub seed: u64,
    pub learning_rate: f64,
    /// Mean loss of epoch `i + 1` (losses are evaluated before each
    /// sample's update, in visit order).
    pub epoch_mean_loss: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        *self.epoch_mean_loss.first().expect("at least one epoch")
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_mean_loss.last().expect("at least one epoch")
    }

    /// Loss curve as comma-separated text: header `epoch,mean_loss`, one
    /// 1-based row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (i, loss) in self.epoch_mean_loss.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, loss));
        }
        s
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_csv())
    }
}

fn snapshot_groups(model: &ToyVlm, groups: &[ParamGroup]) -> Vec<(ParamGroup, Vec<u8>)> {
    groups.iter().map(|&g| (g, model.group_bytes(g))).collect()
}

fn verify_frozen(
    model: &ToyVlm,
    snapshots: &[(ParamGroup, Vec<u8>)],
) -> Result<(), SftError> {
    for (group, bytes) in snapshots {
        if &model.group_bytes(*group) != bytes {
            return Err(SftError::FrozenGroupMutated { group: group.name() });
        }
    }
    Ok(())
}

/// Adapter-factor gradients from the logit gradient of one sample.
fn adapter_grads(
    model: &ToyVlm,
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Result<(Matrix, Matrix), SftError> {
    // dW_eff = dlogits^T * u : V x (E + C).
    let dw_eff = dlogits.matmul_tn(&cache.u)?;
    let scale = model.config.lora_alpha / model.config.lora_rank as f64;
    // dB = scale * dW_eff * A^T : V x r.
    let db = dw_eff.matmul_nt(&model.lora_a)?.map(|v| v * scale);
    // dA = scale * B^T * dW_eff : r x (E + C).
    let da = model.lora_b.matmul_tn(&dw_eff)?.map(|v| v * scale);
    Ok((da, db))
}

fn apply_adapter_update(
    model: &mut ToyVlm,
    cache: &ForwardCache,
    dlogits: &Matrix,
    lr: f64,
) -> Result<(), SftError> {
    let (da, db) = adapter_grads(model, cache, dlogits)?;
    model.lora_a.axpy(-lr, &da)?;
    model.lora_b.axpy(-lr, &db)?;
    Ok(())
}

/// One SGD step on the modulation MLP (and optionally the adapter).
fn stage1_step(
    model: &mut ToyVlm,
    sample: &TripletSample,
    lr: f64,
    joint_lora: bool,
) -> Result<f64, SftError> {
    let cache = model.forward_cached(sample)?;
    let (loss, dlogits) =
        masked_ce_and_dlogits(cache.logits(), sample.text(), sample.loss_mask())?;

    // With the modulation stage clamped there is no path from the loss to
    // the MLP, so there is nothing to update.
    if let Some(tape) = &cache.tape {
        let e = model.config.embed_dim;
        let n_ch = model.config.channels;
        let t_count = model.config.n_tokens() as f64;

        // du = dlogits * W_eff, then fold its pooled columns over positions.
        let du = dlogits.matmul(&cache.w_eff)?;
        let mut dc = vec![0.0; n_ch];
        for t in 0..du.rows() {
            let row = du.row(t);
            for (k, d) in dc.iter_mut().enumerate() {
                *d += row[e + k];
            }
        }
        // Mean pooling spreads dc evenly over the T modulated tokens.
        let upstream = Matrix::from_fn(model.config.n_tokens(), n_ch, |_, k| dc[k] / t_count);

        let grads = tlm_backward(&model.tlm, tape, &upstream)?;
        model.tlm.w1.axpy(-lr, &grads.w1)?;
        for (b, g) in model.tlm.b1.iter_mut().zip(&grads.b1) {
            *b -= lr * g;
        }
        model.tlm.w2.axpy(-lr, &grads.w2)?;
        for (b, g) in model.tlm.b2.iter_mut().zip(&grads.b2) {
            *b -= lr * g;
        }
    }

    if joint_lora {
        apply_adapter_update(model, &cache, &dlogits, lr)?;
    }
    Ok(loss)
}

/// One SGD step on the adapter factors.
fn stage2_step(model: &mut ToyVlm, sample: &TripletSample, lr: f64) -> Result<f64, SftError> {
    let cache = model.forward_cached(sample)?;
    let (loss, dlogits) =
        masked_ce_and_dlogits(cache.logits(), sample.text(), sample.loss_mask())?;
    apply_adapter_update(model, &cache, &dlogits, lr)?;
    Ok(loss)
}

fn run_epochs(
    model: &mut ToyVlm,
    samples: &[TripletSample],
    config: &TrainConfig,
    frozen: &[ParamGroup],
    mut step: impl FnMut(&mut ToyVlm, &TripletSample) -> Result<f64, SftError>,
) -> Result<TrainReport, SftError> {
    if samples.is_empty() {
        return Err(SftError::EmptyDataset);
    }
    let snapshots = snapshot_groups(model, frozen);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_mean_loss = Vec::with_capacity(config.effective_epochs());
    for _ in 0..config.effective_epochs() {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            total += step(model, &samples[i])?;
        }
        epoch_mean_loss.push(total / samples.len() as f64);
        verify_frozen(model, &snapshots)?;
    }
    Ok(TrainReport {
        stage: config.stage,
        seed: config.seed,
        learning_rate: config.effective_learning_rate(),
        epoch_mean_loss,
    })
}

/// Stage 1: fit the modulation MLP (`theta_ae`) on caption samples.
///
/// Every other group is byte-frozen; with `stage1_joint_lora` the adapter
/// (`theta_lora`) trains alongside. Sample order is reshuffled each epoch
/// from `config.seed`, so a run is fully determined by
/// `(model, samples, config)`.
pub fn stage1_train(
    model: &mut ToyVlm,
    samples: &[TripletSample],
    config: &TrainConfig,
) -> Result<TrainReport, SftError> {
    if config.stage != 1 {
        return Err(SftError::WrongStage { expected: 1, found: config.stage });
    }
    let lr = config.effective_learning_rate();
    let joint = config.stage1_joint_lora;
    let frozen: Vec<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|&g| {
            g != ParamGroup::PriorMlp && !(joint && g == ParamGroup::Adapter)
        })
        .collect();
    run_epochs(model, samples, config, &frozen, |m, s| stage1_step(m, s, lr, joint))
}

/// Stage 2: fit the head adapter (`theta_lora`) on instruction samples.
///
/// The modulation MLP, patch encoder, and language tensors are byte-frozen.
pub fn stage2_train(
    model: &mut ToyVlm,
    samples: &[TripletSample],
    config: &TrainConfig,
) -> Result<TrainReport, SftError> {
    if config.stage != 2 {
        return Err(SftError::WrongStage { expected: 2, found: config.stage });
    }
    let lr = config.effective_learning_rate();
    let frozen = [ParamGroup::Visual, ParamGroup::PriorMlp, ParamGroup::Language];
    run_epochs(model, samples, config, &frozen, |m, s| stage2_step(m, s, lr))
}

/// Per-token modulation energy: the L2 distance each visual token was moved
/// by the prior-conditioned modulation, in row-major grid order.
///
/// Tokens whose neighborhood priors carry strong signal move furthest, so
/// the energies act as a coarse saliency map over the token grid. A clamped
/// model (or one whose modulation MLP is still zero) reports all zeros.
pub fn token_saliency(model: &ToyVlm, sample: &TripletSample) -> Result<Vec<f64>, SftError> {
    let cache = model.forward_cached(sample)?;
    let n = cache.modulated.rows();
    match &cache.tape {
        None => Ok(vec![0.0; n]),
        Some(tape) => {
            let pre = tape.tokens();
            Ok((0..n)
                .map(|t| {
                    cache
                        .modulated
                        .row(t)
                        .iter()
                        .zip(pre.row(t))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect())
        }
    }
}

/// Greedy (argmax) predictions at the masked positions, in order.
pub fn predict_answers(model: &ToyVlm, sample: &TripletSample) -> Result<Vec<u32>, SftError> {
    let logits = model.forward(sample)?;
    let mut out = Vec::new();
    for (t, &masked) in sample.loss_mask().iter().enumerate() {
        if !masked {
            continue;
        }
        let row = logits.row(t);
        let mut best = 0usize;
        for (v, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = v;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

/// Fraction of samples whose masked positions are all predicted exactly.
pub fn answer_accuracy(model: &ToyVlm, samples: &[TripletSample]) -> Result<f64, SftError> {
    if samples.is_empty() {
        return Err(SftError::EmptyDataset);
    }
    let mut hits = 0usize;
    for s in samples {
        let predicted = predict_answers(model, s)?;
        let expected: Vec<u32> = s
            .text()
            .iter()
            .zip(s.loss_mask())
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        if predicted == expected {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
