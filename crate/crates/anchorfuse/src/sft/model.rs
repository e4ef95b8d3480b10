//! A small vision-language model with prior-conditioned token modulation.
//!
//! The forward path is deliberately simple so that every gradient used in
//! training has a closed form:
//!
//! 1. the image is cut into non-overlapping patches and each patch is
//!    linearly encoded into a visual token (`theta_v`);
//! 2. the token grid is modulated by the anchored prior vectors through
//!    [`crate::tlm::tlm_forward`] (`theta_ae`);
//! 3. modulated tokens are mean-pooled into one conditioning vector, which
//!    is concatenated to the previous token's embedding at every text
//!    position (teacher forcing);
//! 4. a linear head with a low-rank additive adapter maps each position to
//!    vocabulary logits (`theta_llm` + `theta_lora`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{ParamGroup, SftError, TripletSample};
use crate::tensor::Matrix;
use crate::tlm::{tlm_forward, ForwardTape, PriorBatch, TlmParams, TokenGrid};

/// Architecture of [`ToyVlm`]. All fields have defaults, so sparse JSON
/// configs work; the full struct is persisted inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Visual token channels (`C`).
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Patch side length in pixels; images are `grid_h*patch` x
    /// `grid_w*patch`.
    pub patch: usize,
    /// Token embedding width (`E`).
    pub embed_dim: usize,
    /// Expected prior vector dimensionality (`D`).
    pub prior_dim: usize,
    /// Hidden width of the modulation MLP.
    pub tlm_hidden: usize,
    /// Gaussian kernel width of the prior-to-token weighting, in grid cells.
    pub sigma: f64,
    /// Weight-normalization guard.
    pub epsilon: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub bos_token: u32,
    /// When false the modulation stage is clamped to the identity: tokens
    /// pass through unchanged and the prior vectors never influence the
    /// output. Used for ablations.
    pub tlm_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            channels: 32,
            grid_h: 4,
            grid_w: 4,
            patch: 4,
            embed_dim: 16,
            prior_dim: 64,
            tlm_hidden: 128,
            sigma: 1.0,
            epsilon: 1e-6,
            lora_rank: 4,
            lora_alpha: 8.0,
            bos_token: 0,
            tlm_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn image_h(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn image_w(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Width of the per-position head input: previous-token embedding plus
    /// the pooled conditioning vector.
    pub fn head_in(&self) -> usize {
        self.embed_dim + self.channels
    }

    fn validate(&self) -> Result<(), SftError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("channels", self.channels),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("prior_dim", self.prior_dim),
            ("tlm_hidden", self.tlm_hidden),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SftError::ConfigMismatch {
                    reason: format!("{name} must be positive"),
                });
            }
        }
        if (self.bos_token as usize) >= self.vocab_size {
            return Err(SftError::ConfigMismatch {
                reason: format!(
                    "bos_token {} is outside the vocabulary (size {})",
                    self.bos_token, self.vocab_size
                ),
            });
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(SftError::ConfigMismatch {
                reason: format!("lora_alpha must be finite and positive, got {}", self.lora_alpha),
            });
        }
        Ok(())
    }
}

/// One parameter tensor with its group, stable name, and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub group: ParamGroup,
    /// Stable wire name, e.g. `theta_ae/tlm_w1`.
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Snapshot of every parameter tensor plus, per group, whether a given
/// training stage updates it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPartition {
    pub tensors: Vec<NamedTensor>,
    pub trainable: BTreeMap<&'static str, bool>,
}

impl ParamPartition {
    /// Total scalar parameter count across all groups.
    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Intermediates kept from one forward pass for the backward passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    logits: Matrix,
    /// `L x (E + C)` per-position head inputs.
    pub(crate) u: Matrix,
    /// Modulation tape; `None` when the modulation stage is clamped.
    pub(crate) tape: Option<ForwardTape>,
    /// `T x C` tokens after modulation (equal to the raw tokens when the
    /// modulation stage is clamped).
    pub(crate) modulated: Matrix,
    /// Effective head (`head_w` plus the scaled adapter product).
    pub(crate) w_eff: Matrix,
}

impl ForwardCache {
    /// `L x vocab` per-position logits.
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }
}

/// The model. Construct with [`ToyVlm::new`]; parameters are grouped as
/// described in [`ParamGroup`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm {
    pub(crate) config: ModelConfig,
    /// `C x patch^2` patch encoder weights (`theta_v`).
    pub(crate) patch_w: Matrix,
    /// `C` patch encoder bias (`theta_v`).
    pub(crate) patch_b: Vec<f64>,
    /// Modulation MLP (`theta_ae`).
    pub(crate) tlm: TlmParams,
    /// `V x E` token embeddings (`theta_llm`).
    pub(crate) tok_embed: Matrix,
    /// `V x (E + C)` head weights (`theta_llm`).
    pub(crate) head_w: Matrix,
    /// `V` head bias (`theta_llm`).
    pub(crate) head_b: Vec<f64>,
    /// `r x (E + C)` adapter input map (`theta_lora`).
    pub(crate) lora_a: Matrix,
    /// `V x r` adapter output map (`theta_lora`), zero at initialization.
    pub(crate) lora_b: Matrix,
}

impl ToyVlm {
    /// Build a freshly initialized model.
    ///
    /// The random draw order (patch encoder, modulation MLP, embeddings,
    /// head, adapter) is fixed: the same `(config, seed)` always produces a
    /// bit-identical model. The modulation MLP's output layer and the
    /// adapter's output map start at zero, so a fresh model's logits are
    /// exactly those of a prior-blind base model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, SftError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p2 = config.patch * config.patch;

        let a = (6.0 / (p2 + config.channels) as f64).sqrt();
        let patch_w = Matrix::from_fn(config.channels, p2, |_, _| rng.gen_range(-a..a));
        let patch_b = vec![0.0; config.channels];

        let tlm = TlmParams::zero_init(
            config.prior_dim,
            config.tlm_hidden,
            config.channels,
            config.sigma,
            config.epsilon,
            &mut rng,
        )?;

        let a = (6.0 / (config.vocab_size + config.embed_dim) as f64).sqrt();
        let tok_embed =
            Matrix::from_fn(config.vocab_size, config.embed_dim, |_, _| rng.gen_range(-a..a));

        let a = (6.0 / (config.vocab_size + config.head_in()) as f64).sqrt();
        let head_w =
            Matrix::from_fn(config.vocab_size, config.head_in(), |_, _| rng.gen_range(-a..a));
        let head_b = vec![0.0; config.vocab_size];

        let a = 1.0 / (config.head_in() as f64).sqrt();
        let lora_a = Matrix::from_fn(config.lora_rank, config.head_in(), |_, _| rng.gen_range(-a..a));
        let lora_b = Matrix::zeros(config.vocab_size, config.lora_rank);

        Ok(ToyVlm {
            config,
            patch_w,
            patch_b,
            tlm,
            tok_embed,
            head_w,
            head_b,
            lora_a,
            lora_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Head weights with the adapter folded in:
    /// `head_w + (alpha / r) * lora_b * lora_a`.
    ///
    /// With `lora_b` (or `lora_a`) all zero the result is bit-identical to
    /// `head_w`, so an untrained adapter cannot move the logits.
    pub fn effective_head(&self) -> Matrix {
        let delta = self
            .lora_b
            .matmul(&self.lora_a)
            .expect("adapter factors have compatible shapes");
        let scale = self.config.lora_alpha / self.config.lora_rank as f64;
        self.head_w
            .zip_map(&delta, |w, d| w + scale * d)
            .expect("adapter delta matches head shape")
    }

    /// Cut the image into patches and encode each into a `C`-channel token;
    /// tokens are ordered row-major (`t = gh * grid_w + gw`).
    fn encode_patches(&self, image: &Matrix) -> Result<Matrix, SftError> {
        let c = &self.config;
        if image.rows() != c.image_h() || image.cols() != c.image_w() {
            return Err(SftError::ShapeMismatch {
                context: "image",
                expected: format!("{}x{}", c.image_h(), c.image_w()),
                found: format!("{}x{}", image.rows(), image.cols()),
            });
        }
        let p = c.patch;
        let mut patches = Matrix::zeros(c.n_tokens(), p * p);
        for gh in 0..c.grid_h {
            for gw in 0..c.grid_w {
                let t = gh * c.grid_w + gw;
                for i in 0..p {
                    for j in 0..p {
                        patches.set(t, i * p + j, image.get(gh * p + i, gw * p + j));
                    }
                }
            }
        }
        let mut x = patches.matmul_nt(&self.patch_w)?;
        for t in 0..x.rows() {
            let row = x.row_mut(t);
            for (v, b) in row.iter_mut().zip(&self.patch_b) {
                *v += b;
            }
        }
        Ok(x)
    }

    /// Full forward pass, keeping the intermediates needed for training.
    pub fn forward_cached(&self, sample: &TripletSample) -> Result<ForwardCache, SftError> {
        let c = &self.config;
        let x = self.encode_patches(sample.image())?;

        let priors = PriorBatch::from_feature_set(sample.features())?;
        if priors.vectors().cols() != c.prior_dim {
            return Err(SftError::ShapeMismatch {
                context: "prior vectors",
                expected: format!("dim {}", c.prior_dim),
                found: format!("dim {}", priors.vectors().cols()),
            });
        }

        let (x_mod, tape) = if c.tlm_enabled {
            let grid = TokenGrid::new(x, c.grid_h, c.grid_w)?;
            let (x_mod, tape) = tlm_forward(&grid, &priors, &self.tlm)?;
            (x_mod, Some(tape))
        } else {
            (x, None)
        };

        // Pooled conditioning vector: the mean token.
        let t_count = x_mod.rows() as f64;
        let mut pooled = x_mod.column_sums();
        for v in &mut pooled {
            *v /= t_count;
        }

        // Per-position head input: previous token's embedding, then pooled.
        let text = sample.text();
        let mut u = Matrix::zeros(text.len(), c.head_in());
        for (t, &tok) in text.iter().enumerate() {
            if (tok as usize) >= c.vocab_size {
                return Err(SftError::BadToken {
                    index: t,
                    token: tok,
                    vocab: c.vocab_size,
                });
            }
            let prev = if t == 0 { self.config.bos_token } else { text[t - 1] };
            let row = u.row_mut(t);
            row[..c.embed_dim].copy_from_slice(self.tok_embed.row(prev as usize));
            row[c.embed_dim..].copy_from_slice(&pooled);
        }

        let w_eff = self.effective_head();
        let mut logits = u.matmul_nt(&w_eff)?;
        for t in 0..logits.rows() {
            let row = logits.row_mut(t);
            for (v, b) in row.iter_mut().zip(&self.head_b) {
                *v += b;
            }
        }

        Ok(ForwardCache { logits, u, tape, modulated: x_mod, w_eff })
    }

    /// Per-position vocabulary logits (`text-length x vocab`).
    pub fn forward(&self, sample: &TripletSample) -> Result<Matrix, SftError> {
        Ok(self.forward_cached(sample)?.logits)
    }

    /// Every parameter tensor with its group, name, shape, and a copy of its
    /// data, in the fixed serialization order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let nt = |group, name: &str, dims: Vec<usize>, data: Vec<f64>| NamedTensor {
            group,
            name: format!("{}/{}", ParamGroup::name(group), name),
            dims,
            data,
        };
        let mat = |m: &Matrix| (vec![m.rows(), m.cols()], m.data().to_vec());
        let (pw_d, pw) = mat(&self.patch_w);
        let (w1_d, w1) = mat(&self.tlm.w1);
        let (w2_d, w2) = mat(&self.tlm.w2);
        let (te_d, te) = mat(&self.tok_embed);
        let (hw_d, hw) = mat(&self.head_w);
        let (la_d, la) = mat(&self.lora_a);
        let (lb_d, lb) = mat(&self.lora_b);
        vec![
            nt(ParamGroup::Visual, "patch_w", pw_d, pw),
            nt(ParamGroup::Visual, "patch_b", vec![self.patch_b.len()], self.patch_b.clone()),
            nt(ParamGroup::PriorMlp, "tlm_w1", w1_d, w1),
            nt(ParamGroup::PriorMlp, "tlm_b1", vec![self.tlm.b1.len()], self.tlm.b1.clone()),
            nt(ParamGroup::PriorMlp, "tlm_w2", w2_d, w2),
            nt(ParamGroup::PriorMlp, "tlm_b2", vec![self.tlm.b2.len()], self.tlm.b2.clone()),
            nt(ParamGroup::Language, "tok_embed", te_d, te),
            nt(ParamGroup::Language, "head_w", hw_d, hw),
            nt(ParamGroup::Language, "head_b", vec![self.head_b.len()], self.head_b.clone()),
            nt(ParamGroup::Adapter, "lora_a", la_d, la),
            nt(ParamGroup::Adapter, "lora_b", lb_d, lb),
        ]
    }

    /// Raw little-endian bytes of one group's tensors, in serialization
    /// order. Used to verify that frozen groups stay byte-identical.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.named_tensors() {
            if t.group == group {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Group-labeled snapshot of all parameters with per-group trainability
    /// for the given stage (`stage1_joint_lora` adds the adapter to stage 1).
    pub fn partition(&self, stage: u8, stage1_joint_lora: bool) -> ParamPartition {
        let mut trainable = BTreeMap::new();
        for g in ParamGroup::ALL {
            let on = match stage {
                1 => g == ParamGroup::PriorMlp || (stage1_joint_lora && g == ParamGroup::Adapter),
                2 => g == ParamGroup::Adapter,
                _ => false,
            };
            trainable.insert(g.name(), on);
        }
        ParamPartition { tensors: self.named_tensors(), trainable }
    }

    /// Overwrite the named tensor with `data`; shape must match exactly.
    pub(crate) fn apply_named_data(
        &mut self,
        name: &str,
        dims: &[usize],
        data: Vec<f64>,
    ) -> Result<(), SftError> {
        let expect = |want: &[usize]| -> Result<(), SftError> {
            if dims != want {
                return Err(SftError::CorruptCheckpoint {
                    reason: format!("tensor {name} has dims {dims:?}, expected {want:?}"),
                });
            }
            if data.len() != want.iter().product::<usize>() {
                return Err(SftError::CorruptCheckpoint {
                    reason: format!("tensor {name} payload length mismatch"),
                });
            }
            Ok(())
        };
        let c = self.config.clone();
        let p2 = c.patch * c.patch;
        match name {
            "theta_v/patch_w" => {
                expect(&[c.channels, p2])?;
                self.patch_w = Matrix::from_vec(c.channels, p2, data)?;
            }
            "theta_v/patch_b" => {
                expect(&[c.channels])?;
                self.patch_b = data;
            }
            "theta_ae/tlm_w1" => {
                expect(&[c.tlm_hidden, c.prior_dim])?;
                self.tlm.w1 = Matrix::from_vec(c.tlm_hidden, c.prior_dim, data)?;
            }
            "theta_ae/tlm_b1" => {
                expect(&[c.tlm_hidden])?;
                self.tlm.b1 = data;
            }
            "theta_ae/tlm_w2" => {
                expect(&[2 * c.channels, c.tlm_hidden])?;
                self.tlm.w2 = Matrix::from_vec(2 * c.channels, c.tlm_hidden, data)?;
            }
            "theta_ae/tlm_b2" => {
                expect(&[2 * c.channels])?;
                self.tlm.b2 = data;
            }
            "theta_llm/tok_embed" => {
                expect(&[c.vocab_size, c.embed_dim])?;
                self.tok_embed = Matrix::from_vec(c.vocab_size, c.embed_dim, data)?;
            }
            "theta_llm/head_w" => {
                expect(&[c.vocab_size, c.head_in()])?;
                self.head_w = Matrix::from_vec(c.vocab_size, c.head_in(), data)?;
            }
            "theta_llm/head_b" => {
                expect(&[c.vocab_size])?;
                self.head_b = data;
            }
            "theta_lora/lora_a" => {
                expect(&[c.lora_rank, c.head_in()])?;
                self.lora_a = Matrix::from_vec(c.lora_rank, c.head_in(), data)?;
            }
            "theta_lora/lora_b" => {
                expect(&[c.vocab_size, c.lora_rank])?;
                self.lora_b = Matrix::from_vec(c.vocab_size, c.lora_rank, data)?;
            }
            other => {
                return Err(SftError::CorruptCheckpoint {
                    reason: format!("unknown tensor name {other}"),
                });
            }
        }
        Ok(())
    }
}

/// Mean masked cross-entropy and its gradient w.r.t. the logits.
///
/// Unmasked rows contribute neither loss nor gradient; masked rows use a
/// max-shifted softmax and the mean is over masked positions.
pub(crate) fn masked_ce_and_dlogits(
    logits: &Matrix,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Matrix), SftError> {
    if targets.len() != logits.rows() {
        return Err(SftError::ShapeMismatch {
            context: "loss targets",
            expected: format!("{} rows", logits.rows()),
            found: format!("{} targets", targets.len()),
        });
    }
    if mask.len() != targets.len() {
        return Err(SftError::MaskLengthMismatch {
            mask_len: mask.len(),
            text_len: targets.len(),
        });
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(SftError::EmptyMask);
    }
    let vocab = logits.cols();
    let inv_n = 1.0 / n_masked as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), vocab);
    for t in 0..logits.rows() {
        if !mask[t] {
            continue;
        }
        let target = targets[t] as usize;
        if target >= vocab {
            return Err(SftError::BadToken {
                index: t,
                token: targets[t],
                vocab,
            });
        }
        let row = logits.row(t);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let sum_exp: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        loss += m + sum_exp.ln() - row[target];
        let drow = dlogits.row_mut(t);
        for (v, (&l, d)) in row.iter().zip(drow.iter_mut()).enumerate() {
            let p = (l - m).exp() / sum_exp;
            *d = (p - if v == target { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, dlogits))
}

/// Mean cross-entropy of `targets` under `logits` at the masked positions.
pub fn nll_loss(logits: &Matrix, targets: &[u32], mask: &[bool]) -> Result<f64, SftError> {
    masked_ce_and_dlogits(logits, targets, mask).map(|(loss, _)| loss)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{tiny_config, tiny_sample};
    use super::*;

    #[test]
    fn construction_is_deterministic_and_shaped() {
        let m1 = ToyVlm::new(tiny_config(), 11).unwrap();
        let m2 = ToyVlm::new(tiny_config(), 11).unwrap();
        assert_eq!(m1, m2);
        let m3 = ToyVlm::new(tiny_config(), 12).unwrap();
        assert_ne!(m1, m3);

        let c = tiny_config();
        assert_eq!(m1.patch_w.rows(), c.channels);
        assert_eq!(m1.patch_w.cols(), c.patch * c.patch);
        assert_eq!(m1.head_w.cols(), c.head_in());
        assert_eq!(m1.lora_b.max_abs(), 0.0);
        assert_eq!(m1.tlm.w2.max_abs(), 0.0);
    }

    #[test]
    fn zero_adapter_head_is_bitwise_base() {
        let m = ToyVlm::new(tiny_config(), 5).unwrap();
        let eff = m.effective_head();
        assert_eq!(eff, m.head_w);
        // And the data agree bit for bit, not just numerically.
        for (a, b) in eff.data().iter().zip(m.head_w.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn clamped_modulation_matches_fresh_model() {
        // A fresh model's modulation is the identity, so disabling the
        // modulation stage entirely must not change any logit.
        let config = tiny_config();
        let sample = tiny_sample(&config, 3);
        let on = ToyVlm::new(config.clone(), 9).unwrap();
        let off = ToyVlm::new(ModelConfig { tlm_enabled: false, ..config }, 9).unwrap();
        let l_on = on.forward(&sample).unwrap();
        let l_off = off.forward(&sample).unwrap();
        assert_eq!(l_on, l_off);
    }

    #[test]
    fn forward_rejects_bad_shapes_and_tokens() {
        let config = tiny_config();
        let m = ToyVlm::new(config.clone(), 1).unwrap();
        let good = tiny_sample(&config, 2);

        let bad_img = TripletSample::caption(
            Matrix::zeros(3, 3),
            good.features().clone(),
            vec![1],
        )
        .unwrap();
        assert!(matches!(m.forward(&bad_img), Err(SftError::ShapeMismatch { .. })));

        let bad_tok = TripletSample::caption(
            good.image().clone(),
            good.features().clone(),
            vec![99],
        )
        .unwrap();
        assert!(matches!(
            m.forward(&bad_tok),
            Err(SftError::BadToken { index: 0, token: 99, .. })
        ));
    }

    #[test]
    fn nll_matches_hand_computed_three_token_case() {
        // Two positions, three-word vocabulary, second position masked out.
        let logits = Matrix::from_vec(2, 3, vec![1.0, 2.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let targets = [1u32, 0u32];
        // Hand value: softmax(1.0, 2.0, 0.5), loss = ln(sum(exp)) - 2.0.
        let sum: f64 = (1.0f64).exp() + (2.0f64).exp() + (0.5f64).exp();
        let expected = sum.ln() - 2.0;
        let got = nll_loss(&logits, &targets, &[true, false]).unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");

        // Both positions masked in: mean of the two per-position losses.
        let expected2 = (expected + (3.0f64).ln()) / 2.0;
        let got2 = nll_loss(&logits, &targets, &[true, true]).unwrap();
        assert!((got2 - expected2).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = Matrix::from_vec(2, 4, vec![0.3, -1.2, 0.8, 0.1, 2.0, 0.0, -0.5, 1.1]).unwrap();
        let targets = [2u32, 0u32];
        let mask = [true, true];
        let (_, grad) = masked_ce_and_dlogits(&logits, &targets, &mask).unwrap();
        let h = 1e-6;
        for t in 0..2 {
            for v in 0..4 {
                let mut plus = logits.clone();
                plus.set(t, v, plus.get(t, v) + h);
                let mut minus = logits.clone();
                minus.set(t, v, minus.get(t, v) - h);
                let fd = (nll_loss(&plus, &targets, &mask).unwrap()
                    - nll_loss(&minus, &targets, &mask).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grad.get(t, v)).abs() < 1e-8,
                    "position ({t},{v}): fd {fd} vs analytic {}",
                    grad.get(t, v)
                );
            }
        }
    }

    #[test]
    fn partition_covers_every_parameter_exactly_once() {
        let m = ToyVlm::new(tiny_config(), 4).unwrap();
        let p = m.partition(1, false);
        let names: std::collections::BTreeSet<&str> =
            p.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names.len(), p.tensors.len(), "tensor names must be unique");
        for t in &p.tensors {
            assert_eq!(t.data.len(), t.dims.iter().product::<usize>());
            assert!(t.name.starts_with(t.group.name()));
        }
        // Stage 1 trains exactly the modulation MLP; stage 2 exactly the
        // adapter; the joint flag adds the adapter to stage 1.
        assert!(p.trainable[&"theta_ae"]);
        assert!(!p.trainable[&"theta_lora"]);
        assert!(!p.trainable[&"theta_v"]);
        assert!(!p.trainable[&"theta_llm"]);
        let p2 = m.partition(2, false);
        assert!(!p2.trainable[&"theta_ae"]);
        assert!(p2.trainable[&"theta_lora"]);
        let pj = m.partition(1, true);
        assert!(pj.trainable[&"theta_ae"]);
        assert!(pj.trainable[&"theta_lora"]);

        // Group byte blobs are non-overlapping and cover all parameters.
        let total: usize = ParamGroup::ALL
            .iter()
            .map(|&g| m.group_bytes(g).len())
            .sum();
        assert_eq!(total, p.n_params() * 8);
    }

    #[test]
    fn apply_named_data_round_trips_and_rejects_bad_shapes() {
        let config = tiny_config();
        let src = ToyVlm::new(config.clone(), 21).unwrap();
        let mut dst = ToyVlm::new(config, 22).unwrap();
        assert_ne!(src, dst);
        for t in src.named_tensors() {
            dst.apply_named_data(&t.name, &t.dims, t.data).unwrap();
        }
        assert_eq!(src, dst);

        let err = dst.apply_named_data("theta_v/patch_w", &[1, 1], vec![0.0]);
        assert!(matches!(err, Err(SftError::CorruptCheckpoint { .. })));
        let err = dst.apply_named_data("nonsense", &[1], vec![0.0]);
        assert!(matches!(err, Err(SftError::CorruptCheckpoint { .. })));
    }
}
