//! Transformer classifiers over tokenized CAN frames.
//!
//! Two fixed architectures share one type:
//!
//! * encoder: learned position embeddings, post-norm blocks (residual then
//!   LayerNorm), biased projections, GELU feed-forward, unmasked attention,
//!   `[CLS]` pooling, tanh head activation;
//! * decoder: rotary position embeddings, pre-norm blocks (RMSNorm before
//!   each sublayer), bias-free projections, SwiGLU feed-forward with
//!   grouped-query support, causal masking, last-token (`[EOS]`) pooling,
//!   silu head activation.
//!
//! Checkpoints are versioned containers: a JSON config, the vocabulary
//! version tag, and raw little-endian f64 arrays per named tensor.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can::{AttackClass, CanFrame};
use crate::nn::{
    dropout_mask, softmax, Affine, AffineCache, Attention, AttentionCache, Ffn, FfnCache, FfnKind,
    Norm, NormCache, NormKind, Param, Rope, Tensor,
};
use crate::textify::{self, Arch, TextifyError, TokenSequence, Vocab};

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture and size parameters. Defaults are desk-scale stand-ins for
/// the full-size models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    /// Feed-forward hidden width as a multiple of d_model.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn encoder_default(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch: Arch::Encoder,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 4,
            ffn_mult: 4,
            vocab_size,
            max_len: textify::MAX_LEN_DEFAULT,
            n_classes: AttackClass::COUNT,
            head_hidden: 64,
            dropout: 0.0,
        }
    }

    pub fn decoder_default(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch: Arch::Decoder,
            ..ModelConfig::encoder_default(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    fn has_bias(&self) -> bool {
        matches!(self.arch, Arch::Encoder)
    }

    fn norm_kind(&self) -> NormKind {
        match self.arch {
            Arch::Encoder => NormKind::Layer,
            Arch::Decoder => NormKind::Rms,
        }
    }

    fn ffn_kind(&self) -> FfnKind {
        match self.arch {
            Arch::Encoder => FfnKind::GeluMlp,
            Arch::Decoder => FfnKind::SwiGlu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return fail("layers, d_model, vocab_size and max_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_kv_heads == 0
            || self.n_kv_heads > self.n_heads
            || !self.n_heads.is_multiple_of(self.n_kv_heads)
        {
            return fail(format!(
                "n_kv_heads {} must divide n_heads {}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if matches!(self.arch, Arch::Decoder) && !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "rotary embeddings need an even head dim, got {}",
                self.head_dim()
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.ffn_mult == 0 || self.head_hidden == 0 {
            return fail("ffn_mult and head_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form parameter count; checked against enumeration in tests.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let kv = self.kv_dim();
        let f = self.ffn_mult * d;
        let bias = self.has_bias();
        let affine = |out: usize, inp: usize| out * inp + if bias { out } else { 0 };
        let norm = match self.norm_kind() {
            NormKind::Layer => 2 * d,
            NormKind::Rms => d,
        };
        let attn = affine(d, d) + affine(kv, d) + affine(kv, d) + affine(d, d);
        let ffn = match self.ffn_kind() {
            FfnKind::GeluMlp => affine(f, d) + affine(d, f),
            FfnKind::SwiGlu => f * d + d * f + f * d,
        };
        let block = attn + ffn + 2 * norm;
        let embeddings = self.vocab_size * d
            + match self.arch {
                Arch::Encoder => self.max_len * d,
                Arch::Decoder => 0,
            };
        // The classifier head always carries biases.
        let head = (self.head_hidden * d + self.head_hidden)
            + (self.n_classes * self.head_hidden + self.n_classes);
        embeddings + self.n_layers * block + norm + head
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence tokenized for the wrong architecture (model is {expected:?})")]
    ArchMismatch { expected: Arch },
    #[error("token id {id} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds the model max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("model vocab size {model} does not match vocabulary of {vocab}")]
    VocabSizeMismatch { model: usize, vocab: usize },
    #[error(transparent)]
    Textify(#[from] TextifyError),
}

/// Class probabilities P; entries in [0, 1], summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<ProbVector, ModelError> {
        let sum: f64 = values.iter().sum();
        if !(sum - 1.0).abs().is_finite() || (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidConfig(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        if values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(ModelError::InvalidConfig("probability outside [0, 1]".into()));
        }
        Ok(ProbVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest probability; exact ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: Ffn,
    pre_norm: bool,
    dropout: f64,
}

struct BlockCache {
    attn: AttentionCache,
    n1: NormCache,
    ffn: FfnCache,
    n2: NormCache,
    attn_mask: Option<Tensor>,
    ffn_mask: Option<Tensor>,
}

fn sample_mask(shape: &[usize], lens: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut mask = Tensor::filled(shape, 1.0);
    let seq = shape[1];
    let width = shape[2];
    for (b, &len) in lens.iter().enumerate() {
        for s in 0..len.min(seq) {
            let scales = dropout_mask(width, rate, rng);
            mask.at_mut(b, s).copy_from_slice(&scales);
        }
    }
    mask
}

fn apply_mask(t: &mut Tensor, mask: &Tensor, lens: &[usize]) {
    let seq = t.shape()[1];
    for (b, &len) in lens.iter().enumerate() {
        for s in 0..len.min(seq) {
            for (v, &m) in t.at_mut(b, s).iter_mut().zip(mask.at(b, s)) {
                *v *= m;
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor, lens: &[usize]) {
    let seq = dst.shape()[1];
    for (b, &len) in lens.iter().enumerate() {
        for s in 0..len.min(seq) {
            for (d, &v) in dst.at_mut(b, s).iter_mut().zip(src.at(b, s)) {
                *d += v;
            }
        }
    }
}

impl Block {
    fn new(name: &str, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Block {
        let d = config.d_model;
        let kv = config.kv_dim();
        let bias = config.has_bias();
        let attn = Attention {
            q: Affine::new(&format!("{name}.attn.q"), d, d, bias, INIT_STD, rng),
            k: Affine::new(&format!("{name}.attn.k"), kv, d, bias, INIT_STD, rng),
            v: Affine::new(&format!("{name}.attn.v"), kv, d, bias, INIT_STD, rng),
            o: Affine::new(&format!("{name}.attn.o"), d, d, bias, INIT_STD, rng),
            n_heads: config.n_heads,
            n_kv_heads: config.n_kv_heads,
            causal: matches!(config.arch, Arch::Decoder),
            rope: matches!(config.arch, Arch::Decoder).then(Rope::default),
        };
        Block {
            norm1: Norm::new(&format!("{name}.norm1"), config.norm_kind(), d, NORM_EPS),
            attn,
            norm2: Norm::new(&format!("{name}.norm2"), config.norm_kind(), d, NORM_EPS),
            ffn: Ffn::new(
                &format!("{name}.ffn"),
                config.ffn_kind(),
                d,
                config.ffn_mult * d,
                INIT_STD,
                rng,
            ),
            pre_norm: matches!(config.arch, Arch::Decoder),
            dropout: config.dropout,
        }
    }

    fn forward(&self, x: &Tensor, lens: &[usize]) -> Tensor {
        if self.pre_norm {
            let mut h = x.clone();
            add_into(&mut h, &self.attn.forward(&self.norm1.forward(x, Some(lens)), Some(lens)), lens);
            let mut y = h.clone();
            add_into(&mut y, &self.ffn.forward(&self.norm2.forward(&h, Some(lens)), Some(lens)), lens);
            y
        } else {
            let mut h = x.clone();
            add_into(&mut h, &self.attn.forward(x, Some(lens)), lens);
            let h = self.norm1.forward(&h, Some(lens));
            let mut y = h.clone();
            add_into(&mut y, &self.ffn.forward(&h, Some(lens)), lens);
            self.norm2.forward(&y, Some(lens))
        }
    }

    fn forward_train(
        &self,
        x: &Tensor,
        lens: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, BlockCache) {
        let dropout = self.dropout > 0.0;
        if self.pre_norm {
            let (n1, n1_cache) = self.norm1.forward_train(x, Some(lens));
            let (mut a, attn_cache) = self.attn.forward_train(&n1, Some(lens), Some(rng));
            let attn_mask = dropout.then(|| sample_mask(a.shape(), lens, self.dropout, rng));
            if let Some(m) = &attn_mask {
                apply_mask(&mut a, m, lens);
            }
            let mut h = x.clone();
            add_into(&mut h, &a, lens);
            let (n2, n2_cache) = self.norm2.forward_train(&h, Some(lens));
            let (mut f, ffn_cache) = self.ffn.forward_train(&n2, Some(lens), Some(rng));
            let ffn_mask = dropout.then(|| sample_mask(f.shape(), lens, self.dropout, rng));
            if let Some(m) = &ffn_mask {
                apply_mask(&mut f, m, lens);
            }
            let mut y = h;
            add_into(&mut y, &f, lens);
            (
                y,
                BlockCache {
                    attn: attn_cache,
                    n1: n1_cache,
                    ffn: ffn_cache,
                    n2: n2_cache,
                    attn_mask,
                    ffn_mask,
                },
            )
        } else {
            let (mut a, attn_cache) = self.attn.forward_train(x, Some(lens), Some(rng));
            let attn_mask = dropout.then(|| sample_mask(a.shape(), lens, self.dropout, rng));
            if let Some(m) = &attn_mask {
                apply_mask(&mut a, m, lens);
            }
            let mut h_pre = x.clone();
            add_into(&mut h_pre, &a, lens);
            let (h, n1_cache) = self.norm1.forward_train(&h_pre, Some(lens));
            let (mut f, ffn_cache) = self.ffn.forward_train(&h, Some(lens), Some(rng));
            let ffn_mask = dropout.then(|| sample_mask(f.shape(), lens, self.dropout, rng));
            if let Some(m) = &ffn_mask {
                apply_mask(&mut f, m, lens);
            }
            let mut y_pre = h;
            add_into(&mut y_pre, &f, lens);
            let (y, n2_cache) = self.norm2.forward_train(&y_pre, Some(lens));
            (
                y,
                BlockCache {
                    attn: attn_cache,
                    n1: n1_cache,
                    ffn: ffn_cache,
                    n2: n2_cache,
                    attn_mask,
                    ffn_mask,
                },
            )
        }
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor, lens: &[usize]) -> Tensor {
        if self.pre_norm {
            let mut df = dy.clone();
            if let Some(m) = &cache.ffn_mask {
                apply_mask(&mut df, m, lens);
            }
            let dn2 = self.ffn.backward(&cache.ffn, &df, Some(lens));
            let mut dh = dy.clone();
            add_into(&mut dh, &self.norm2.backward(&cache.n2, &dn2, Some(lens)), lens);
            let mut da = dh.clone();
            if let Some(m) = &cache.attn_mask {
                apply_mask(&mut da, m, lens);
            }
            let dn1 = self.attn.backward(&cache.attn, &da, Some(lens));
            let mut dx = dh;
            add_into(&mut dx, &self.norm1.backward(&cache.n1, &dn1, Some(lens)), lens);
            dx
        } else {
            let dy_pre = self.norm2.backward(&cache.n2, dy, Some(lens));
            let mut df = dy_pre.clone();
            if let Some(m) = &cache.ffn_mask {
                apply_mask(&mut df, m, lens);
            }
            let mut dh = self.ffn.backward(&cache.ffn, &df, Some(lens));
            add_into(&mut dh, &dy_pre, lens);
            let dh_pre = self.norm1.backward(&cache.n1, &dh, Some(lens));
            let mut da = dh_pre.clone();
            if let Some(m) = &cache.attn_mask {
                apply_mask(&mut da, m, lens);
            }
            let mut dx = self.attn.backward(&cache.attn, &da, Some(lens));
            add_into(&mut dx, &dh_pre, lens);
            dx
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Full classifier: embeddings, transformer stack, final normalization and
/// the two-affine classification head.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    tok_emb: Param,
    pos_emb: Option<Param>,
    blocks: Vec<Block>,
    final_norm: Norm,
    head_hidden: Affine,
    head_out: Affine,
}

/// Intermediates of one training forward pass.
pub struct ModelCache {
    ids: Vec<Vec<u32>>,
    lens: Vec<usize>,
    pooling: Vec<usize>,
    emb_mask: Option<Tensor>,
    blocks: Vec<BlockCache>,
    final_cache: NormCache,
}

/// Intermediates of one head forward pass.
pub struct HeadCache {
    hidden_cache: AffineCache,
    out_cache: AffineCache,
    pre_act: Tensor,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<TransformerModel, ModelError> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(ModelError::VocabSizeMismatch {
                model: config.vocab_size,
                vocab: vocab.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = Param::new(
            "embed.tok",
            Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng),
            true,
        );
        let pos_emb = matches!(config.arch, Arch::Encoder).then(|| {
            Param::new(
                "embed.pos",
                Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng),
                true,
            )
        });
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(&format!("block{i}"), &config, &mut rng))
            .collect();
        let final_norm = Norm::new("final_norm", config.norm_kind(), d, NORM_EPS);
        let head_hidden = Affine::new("head.hidden", config.head_hidden, d, true, INIT_STD, &mut rng);
        let head_out = Affine::new(
            "head.out",
            config.n_classes,
            config.head_hidden,
            true,
            INIT_STD,
            &mut rng,
        );
        Ok(TransformerModel {
            config,
            vocab,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head_hidden,
            head_out,
        })
    }

    /// Re-randomizes the classification head (both affines), leaving the
    /// rest of the model untouched. Used when fine-tuning a base checkpoint
    /// on a fresh task.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head_hidden.w.value =
            Tensor::randn(&[self.config.head_hidden, self.config.d_model], INIT_STD, &mut rng);
        self.head_hidden.b.as_mut().unwrap().value.fill(0.0);
        self.head_out.w.value =
            Tensor::randn(&[self.config.n_classes, self.config.head_hidden], INIT_STD, &mut rng);
        self.head_out.b.as_mut().unwrap().value.fill(0.0);
        for p in [
            &mut self.head_hidden.w,
            &mut self.head_out.w,
        ] {
            p.frozen = false;
            p.zero_grad();
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.tok_emb);
        if let Some(p) = &self.pos_emb {
            f(p);
        }
        for block in &self.blocks {
            block.visit(f);
        }
        self.final_norm.visit(f);
        self.head_hidden.visit(f);
        self.head_out.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.tok_emb);
        if let Some(p) = &mut self.pos_emb {
            f(p);
        }
        for block in &mut self.blocks {
            block.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.head_hidden.visit_mut(f);
        self.head_out.visit_mut(f);
    }

    /// Visits the block-level affine layers (attention projections and
    /// feed-forward matrices) with their names; the adaptation surface.
    pub fn visit_block_affines(&self, f: &mut dyn FnMut(&str, &Affine)) {
        for (i, block) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.attn.q"), &block.attn.q);
            f(&format!("block{i}.attn.k"), &block.attn.k);
            f(&format!("block{i}.attn.v"), &block.attn.v);
            f(&format!("block{i}.attn.o"), &block.attn.o);
            f(&format!("block{i}.ffn.w1"), &block.ffn.w1);
            f(&format!("block{i}.ffn.w2"), &block.ffn.w2);
            if let Some(w3) = &block.ffn.w3 {
                f(&format!("block{i}.ffn.w3"), w3);
            }
        }
    }

    pub fn visit_block_affines_mut(&mut self, f: &mut dyn FnMut(&str, &mut Affine)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.attn.q"), &mut block.attn.q);
            f(&format!("block{i}.attn.k"), &mut block.attn.k);
            f(&format!("block{i}.attn.v"), &mut block.attn.v);
            f(&format!("block{i}.attn.o"), &mut block.attn.o);
            f(&format!("block{i}.ffn.w1"), &mut block.ffn.w1);
            f(&format!("block{i}.ffn.w2"), &mut block.ffn.w2);
            if let Some(w3) = &mut block.ffn.w3 {
                f(&format!("block{i}.ffn.w3"), w3);
            }
        }
    }

    pub fn has_adapters(&self) -> bool {
        let mut any = false;
        self.visit_block_affines(&mut |_, a| any |= a.adapter.is_some());
        any
    }

    /// Parameter count by enumeration (the closed form lives on the config).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.elem_count());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn check_batch(&self, batch: &[TokenSequence]) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let expected_open = match self.config.arch {
            Arch::Encoder => self.vocab.cls(),
            Arch::Decoder => self.vocab.bos(),
        };
        let mut lens = Vec::with_capacity(batch.len());
        let mut pooling = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.real_len > self.config.max_len {
                return Err(ModelError::SequenceTooLong {
                    len: seq.real_len,
                    max_len: self.config.max_len,
                });
            }
            if seq.ids.first() != Some(&expected_open) {
                return Err(ModelError::ArchMismatch {
                    expected: self.config.arch,
                });
            }
            for &id in &seq.ids[..seq.real_len] {
                if id as usize >= self.config.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        vocab_size: self.config.vocab_size,
                    });
                }
            }
            lens.push(seq.real_len);
            pooling.push(seq.pooling_index);
        }
        Ok((lens, pooling))
    }

    /// Embeds a batch into [B, S_eff, D], where S_eff is the longest real
    /// prefix in the batch. Padding beyond that never enters the compute.
    fn embed(&self, batch: &[TokenSequence], lens: &[usize]) -> Tensor {
        let seq = lens.iter().copied().max().unwrap_or(0);
        let d = self.config.d_model;
        let mut x = Tensor::zeros(&[batch.len(), seq, d]);
        for (b, item) in batch.iter().enumerate() {
            for s in 0..lens[b] {
                let row = self.tok_emb.value.row(item.ids[s] as usize);
                let dst = x.at_mut(b, s);
                dst.copy_from_slice(row);
                if let Some(pos) = &self.pos_emb {
                    for (v, &p) in dst.iter_mut().zip(pos.value.row(s)) {
                        *v += p;
                    }
                }
            }
        }
        x
    }

    fn pool(&self, y: &Tensor, pooling: &[usize]) -> Tensor {
        let d = self.config.d_model;
        let mut pooled = Tensor::zeros(&[pooling.len(), d]);
        for (n, &idx) in pooling.iter().enumerate() {
            pooled.row_mut(n).copy_from_slice(y.at(n, idx));
        }
        pooled
    }

    /// Eval-mode forward pass: pooled d_model embeddings, one row per
    /// sequence.
    pub fn forward_eval(&self, batch: &[TokenSequence]) -> Result<Tensor, ModelError> {
        let (lens, pooling) = self.check_batch(batch)?;
        let mut x = self.embed(batch, &lens);
        for block in &self.blocks {
            x = block.forward(&x, &lens);
        }
        let y = self.final_norm.forward(&x, Some(&lens));
        Ok(self.pool(&y, &pooling))
    }

    /// Train-mode forward pass; dropout (when configured) draws from `rng`.
    pub fn forward_train(
        &self,
        batch: &[TokenSequence],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ModelCache), ModelError> {
        let (lens, pooling) = self.check_batch(batch)?;
        let mut x = self.embed(batch, &lens);
        let emb_mask = (self.config.dropout > 0.0)
            .then(|| sample_mask(x.shape(), &lens, self.config.dropout, rng));
        if let Some(m) = &emb_mask {
            apply_mask(&mut x, m, &lens);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_train(&x, &lens, rng);
            caches.push(cache);
            x = y;
        }
        let (y, final_cache) = self.final_norm.forward_train(&x, Some(&lens));
        let pooled = self.pool(&y, &pooling);
        Ok((
            pooled,
            ModelCache {
                ids: batch.iter().map(|s| s.ids.clone()).collect(),
                lens,
                pooling,
                emb_mask,
                blocks: caches,
                final_cache,
            },
        ))
    }

    /// Backpropagates from the pooled embeddings into every unfrozen
    /// parameter.
    pub fn backward(&mut self, cache: &ModelCache, dpooled: &Tensor) {
        let lens = &cache.lens;
        let seq = lens.iter().copied().max().unwrap_or(0);
        let d = self.config.d_model;
        let mut dy = Tensor::zeros(&[lens.len(), seq, d]);
        for (n, &idx) in cache.pooling.iter().enumerate() {
            dy.at_mut(n, idx).copy_from_slice(dpooled.row(n));
        }
        let mut dx = self.final_norm.backward(&cache.final_cache, &dy, Some(lens));
        for (block, bcache) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(bcache, &dx, lens);
        }
        if let Some(m) = &cache.emb_mask {
            apply_mask(&mut dx, m, lens);
        }
        for (b, ids) in cache.ids.iter().enumerate() {
            for (s, &id) in ids.iter().enumerate().take(lens[b]) {
                let src = dx.at(b, s);
                if !self.tok_emb.frozen {
                    let row = self.tok_emb.grad.row_mut(id as usize);
                    for (g, &v) in row.iter_mut().zip(src) {
                        *g += v;
                    }
                }
                if let Some(pos) = &mut self.pos_emb {
                    if !pos.frozen {
                        let row = pos.grad.row_mut(s);
                        for (g, &v) in row.iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }

    fn head_activation(&self, x: f64) -> f64 {
        match self.config.arch {
            Arch::Encoder => x.tanh(),
            Arch::Decoder => crate::nn::silu(x),
        }
    }

    fn head_activation_prime(&self, x: f64) -> f64 {
        match self.config.arch {
            Arch::Encoder => {
                let t = x.tanh();
                1.0 - t * t
            }
            Arch::Decoder => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    /// Class logits for pooled embeddings (eval path).
    pub fn head_logits(&self, pooled: &Tensor) -> Tensor {
        let mut hidden = self.head_hidden.forward(pooled, None);
        for v in hidden.data_mut() {
            *v = self.head_activation(*v);
        }
        self.head_out.forward(&hidden, None)
    }

    pub fn head_forward_train(&self, pooled: &Tensor) -> (Tensor, HeadCache) {
        let (pre_act, hidden_cache) = self.head_hidden.forward_train(pooled, None, None);
        let mut hidden = pre_act.clone();
        for v in hidden.data_mut() {
            *v = self.head_activation(*v);
        }
        let (logits, out_cache) = self.head_out.forward_train(&hidden, None, None);
        (
            logits,
            HeadCache {
                hidden_cache,
                out_cache,
                pre_act,
            },
        )
    }

    pub fn head_backward(&mut self, cache: &HeadCache, dlogits: &Tensor) -> Tensor {
        let mut dhidden = self.head_out.backward(&cache.out_cache, dlogits, None);
        for (dv, &a) in dhidden.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *dv *= self.head_activation_prime(a);
        }
        self.head_hidden.backward(&cache.hidden_cache, &dhidden, None)
    }

    /// Softmax class probabilities for pooled embeddings.
    pub fn classify(&self, pooled: &Tensor) -> Vec<ProbVector> {
        let logits = self.head_logits(pooled);
        (0..logits.n_rows())
            .map(|r| ProbVector(softmax(logits.row(r))))
            .collect()
    }

    /// Full pipeline on one frame: serialize, tokenize, forward, classify,
    /// argmax (ties to the lowest class index).
    pub fn predict_label(&self, frame: &CanFrame) -> Result<(AttackClass, ProbVector), ModelError> {
        let text = textify::serialize_frame(frame);
        let seq = textify::tokenize(&text, self.config.arch, self.config.max_len, &self.vocab)?;
        let pooled = self.forward_eval(&[seq])?;
        let probs = self.classify(&pooled).pop().expect("one row per sequence");
        let label = AttackClass::from_index(probs.argmax().min(AttackClass::COUNT - 1))
            .expect("argmax within class count");
        Ok((label, probs))
    }

    /// Predicted class indices for a pre-tokenized batch.
    pub fn predict_batch(&self, batch: &[TokenSequence]) -> Result<Vec<usize>, ModelError> {
        let pooled = self.forward_eval(batch)?;
        Ok(self.classify(&pooled).iter().map(|p| p.argmax()).collect())
    }
}

// --- checkpoint container ---------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"CANIDSCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure: {0}")]
    Io(io::Error),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed config block: {0}")]
    Config(#[from] serde_json::Error),
    #[error("checkpoint vocabulary {found} does not match this build ({expected})")]
    VocabMismatch { expected: String, found: String },
    #[error("model has attached adapters; merge them or save an adapter checkpoint")]
    AdaptedModel,
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint holds unknown tensor {0}")]
    UnknownTensor(String),
    #[error("tensor {0} has the wrong shape")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> CheckpointError {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl TransformerModel {
    /// Serializes the model into the versioned checkpoint container.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        if self.has_adapters() {
            return Err(CheckpointError::AdaptedModel);
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let vocab_version = self.vocab.version();
        out.extend_from_slice(&(vocab_version.len() as u32).to_le_bytes());
        out.extend_from_slice(vocab_version.as_bytes());
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        self.visit_params(&mut |p| tensors.push((p.name.clone(), p.value.clone())));
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TransformerModel, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_len = read_u32(&mut r)? as usize;
        let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r, config_len)?)?;
        let vocab_len = read_u32(&mut r)? as usize;
        let found_vocab = String::from_utf8(read_bytes(&mut r, vocab_len)?)
            .map_err(|_| CheckpointError::BadMagic)?;
        let vocab = Vocab::built_in();
        if found_vocab != vocab.version() {
            return Err(CheckpointError::VocabMismatch {
                expected: vocab.version(),
                found: found_vocab,
            });
        }
        let tensor_count = read_u32(&mut r)? as usize;
        let mut stored: Vec<(String, Tensor)> = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| CheckpointError::BadMagic)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            stored.push((name, Tensor::from_vec(&shape, data)));
        }
        let mut model = TransformerModel::new(config, vocab, 0)?;
        let mut lookup: std::collections::HashMap<String, Tensor> = stored.into_iter().collect();
        let mut failure: Option<CheckpointError> = None;
        model.visit_params_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match lookup.remove(&p.name) {
                Some(tensor) if tensor.shape() == p.value.shape() => p.value = tensor,
                Some(_) => failure = Some(CheckpointError::ShapeMismatch(p.name.clone())),
                None => failure = Some(CheckpointError::MissingTensor(p.name.clone())),
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if let Some(name) = lookup.into_keys().next() {
            return Err(CheckpointError::UnknownTensor(name));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let mut file = File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerModel, CheckpointError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        TransformerModel::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::textify::{serialize_frame, tokenize};

    fn toy_config(arch: Arch) -> ModelConfig {
        let vocab = Vocab::built_in();
        let mut config = match arch {
            Arch::Encoder => ModelConfig::encoder_default(vocab.len()),
            Arch::Decoder => ModelConfig::decoder_default(vocab.len()),
        };
        config.n_layers = 2;
        config.d_model = 16;
        config.n_heads = 2;
        config.n_kv_heads = if matches!(arch, Arch::Decoder) { 1 } else { 2 };
        config.head_hidden = 16;
        config.ffn_mult = 2;
        config
    }

    fn toy_model(arch: Arch) -> TransformerModel {
        TransformerModel::new(toy_config(arch), Vocab::built_in(), 11).unwrap()
    }

    fn frame(i: u64) -> CanFrame {
        CanFrame::new(i, (0x100 + 7 * i as u16) & 0x7FF, vec![(i % 256) as u8; (i % 9) as usize])
            .unwrap()
    }

    fn seq_for(model: &TransformerModel, f: &CanFrame) -> TokenSequence {
        tokenize(
            &serialize_frame(f),
            model.config.arch,
            model.config.max_len,
            &model.vocab,
        )
        .unwrap()
    }

    #[test]
    fn forward_shape_is_batch_by_d_model() {
        for arch in [Arch::Encoder, Arch::Decoder] {
            let model = toy_model(arch);
            let batch: Vec<TokenSequence> = (0..3).map(|i| seq_for(&model, &frame(i))).collect();
            let pooled = model.forward_eval(&batch).unwrap();
            assert_eq!(pooled.shape(), &[3, 16]);
        }
    }

    #[test]
    fn padding_does_not_change_pooled_outputs() {
        for arch in [Arch::Encoder, Arch::Decoder] {
            let model = toy_model(arch);
            let f = frame(5);
            let short = seq_for(&model, &f);
            // Same tokens at a larger max_len: more [PAD] positions.
            let long = tokenize(&serialize_frame(&f), arch, model.config.max_len, &model.vocab)
                .map(|mut s| {
                    s.ids.resize(model.config.max_len, model.vocab.pad());
                    s
                })
                .unwrap();
            let a = model.forward_eval(&[short]).unwrap();
            let b = model.forward_eval(&[long]).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn pad_perturbation_is_invisible_real_tokens_are_not() {
        let model = toy_model(Arch::Decoder);
        let f = frame(9);
        let seq = seq_for(&model, &f);
        let base = model.forward_eval(std::slice::from_ref(&seq)).unwrap();

        let mut padded = seq.clone();
        padded.ids[padded.real_len] = model.vocab.unk();
        let shifted = model.forward_eval(&[padded]).unwrap();
        for (x, y) in base.data().iter().zip(shifted.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let mut perturbed = seq.clone();
        perturbed.ids[2] = model.vocab.id("f").unwrap();
        let moved = model.forward_eval(&[perturbed]).unwrap();
        assert_ne!(base.data(), moved.data());
    }

    #[test]
    fn batch_companionship_does_not_change_predictions() {
        for arch in [Arch::Encoder, Arch::Decoder] {
            let model = toy_model(arch);
            let solo = model.forward_eval(&[seq_for(&model, &frame(1))]).unwrap();
            let batch: Vec<TokenSequence> =
                (0..4).map(|i| seq_for(&model, &frame(i))).collect();
            let together = model.forward_eval(&batch).unwrap();
            for (x, y) in solo.row(0).iter().zip(together.row(1)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut model = toy_model(Arch::Encoder);
        model.head_hidden.w.value.fill(0.0);
        model.head_hidden.b.as_mut().unwrap().value.fill(0.0);
        model.head_out.w.value.fill(0.0);
        model.head_out.b.as_mut().unwrap().value.fill(0.0);
        let (_, probs) = model.predict_label(&frame(3)).unwrap();
        for &p in probs.values() {
            assert!((p - 0.2).abs() < 1e-15);
        }
        assert!((probs.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_matches_direct_formula_evaluation() {
        // Two-class toy head evaluated against the explicit
        // exp(W_j z + b_j) / sum_k exp(W_k z + b_k) computation.
        let vocab = Vocab::built_in();
        let mut config = toy_config(Arch::Encoder);
        config.n_classes = 2;
        let model = TransformerModel::new(config, vocab, 3).unwrap();
        let pooled = model.forward_eval(&[seq_for(&model, &frame(2))]).unwrap();
        let probs = model.classify(&pooled);

        let z = pooled.row(0);
        let mut hidden = vec![0.0; model.config.head_hidden];
        for (o, h) in hidden.iter_mut().enumerate() {
            let mut acc = model.head_hidden.b.as_ref().unwrap().value.data()[o];
            for (i, &zv) in z.iter().enumerate() {
                acc += model.head_hidden.w.value.row(o)[i] * zv;
            }
            *h = acc.tanh();
        }
        let mut exps = [0.0; 2];
        for (j, e) in exps.iter_mut().enumerate() {
            let mut logit = model.head_out.b.as_ref().unwrap().value.data()[j];
            for (i, &h) in hidden.iter().enumerate() {
                logit += model.head_out.w.value.row(j)[i] * h;
            }
            *e = logit.exp();
        }
        let total: f64 = exps.iter().sum();
        for (j, &e) in exps.iter().enumerate() {
            assert!((probs[0].values()[j] - e / total).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        let p = ProbVector(vec![0.1, 0.7, 0.1, 0.05, 0.05]);
        assert_eq!(p.argmax(), 1);
        let tie = ProbVector(vec![0.4, 0.4, 0.2]);
        assert_eq!(tie.argmax(), 0);
    }

    #[test]
    fn prob_vector_validates() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.9, 0.3]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn param_count_formula_matches_enumeration() {
        for arch in [Arch::Encoder, Arch::Decoder] {
            let model = toy_model(arch);
            assert_eq!(model.param_count(), model.config.param_count(), "{arch:?}");
        }
        // The documented desk-scale default.
        let vocab = Vocab::built_in();
        let model =
            TransformerModel::new(ModelConfig::encoder_default(vocab.len()), vocab, 1).unwrap();
        assert_eq!(model.param_count(), model.config.param_count());
    }

    #[test]
    fn wrong_arch_sequences_are_rejected() {
        let model = toy_model(Arch::Encoder);
        let f = frame(1);
        let decoder_seq = tokenize(&serialize_frame(&f), Arch::Decoder, 48, &model.vocab).unwrap();
        assert!(matches!(
            model.forward_eval(&[decoder_seq]),
            Err(ModelError::ArchMismatch { .. })
        ));
        assert!(matches!(model.forward_eval(&[]), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut config = toy_config(Arch::Encoder);
        config.n_heads = 3;
        assert!(config.validate().is_err());
        let mut config = toy_config(Arch::Decoder);
        config.n_kv_heads = 3;
        assert!(config.validate().is_err());
        let mut config = toy_config(Arch::Encoder);
        config.n_classes = 1;
        assert!(config.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::Encoder, Arch::Decoder] {
            let model = toy_model(arch);
            let path = dir.path().join(format!("{}.ckpt", arch.name()));
            model.save_checkpoint(&path).unwrap();
            let reloaded = TransformerModel::load_checkpoint(&path).unwrap();
            for i in 0..100 {
                let f = frame(i);
                let (la, pa) = model.predict_label(&f).unwrap();
                let (lb, pb) = reloaded.predict_label(&f).unwrap();
                assert_eq!(la, lb);
                for (x, y) in pa.values().iter().zip(pb.values()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn checkpoint_rejects_truncation_and_garbage() {
        let model = toy_model(Arch::Encoder);
        let bytes = model.to_bytes().unwrap();
        assert!(matches!(
            TransformerModel::from_bytes(&bytes[..bytes.len() / 2]),
            Err(CheckpointError::Truncated)
        ));
        assert!(matches!(
            TransformerModel::from_bytes(b"not a checkpoint"),
            Err(CheckpointError::BadMagic)
        ));
        let mut versioned = bytes.clone();
        versioned[8] = 99;
        assert!(matches!(
            TransformerModel::from_bytes(&versioned),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn checkpoint_rejects_vocab_mismatch() {
        let model = toy_model(Arch::Encoder);
        let mut bytes = model.to_bytes().unwrap();
        // The vocab version string sits right after the config JSON; flip a
        // byte inside it.
        let config_len =
            u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
        let vocab_pos = 16 + config_len + 4;
        bytes[vocab_pos] ^= 0x01;
        assert!(matches!(
            TransformerModel::from_bytes(&bytes),
            Err(CheckpointError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn adapted_models_refuse_plain_checkpointing() {
        let mut model = toy_model(Arch::Encoder);
        crate::lora::attach_adapters(&mut model, &crate::lora::LoraConfig::default(), 5).unwrap();
        assert!(matches!(model.to_bytes(), Err(CheckpointError::AdaptedModel)));
    }

    #[test]
    fn full_model_gradcheck_both_archs() {
        for arch in [Arch::Encoder, Arch::Decoder] {
            let mut model = toy_model(arch);
            let batch: Vec<TokenSequence> =
                (0..2).map(|i| seq_for(&model, &frame(i))).collect();
            let labels = [1usize, 3];
            let visit =
                |m: &mut TransformerModel, f: &mut dyn FnMut(&mut Param)| m.visit_params_mut(f);
            let (bc, lc) = (batch.clone(), labels);
            let mut backprop = move |m: &mut TransformerModel| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (pooled, cache) = m.forward_train(&bc, &mut rng).unwrap();
                let (logits, head_cache) = m.head_forward_train(&pooled);
                let (loss, dlogits) = crate::train::batch_loss_and_dlogits(&logits, &lc).unwrap();
                let dpooled = m.head_backward(&head_cache, &dlogits);
                m.backward(&cache, &dpooled);
                loss
            };
            let (bc, lc) = (batch.clone(), labels);
            let mut loss = move |m: &mut TransformerModel| {
                let pooled = m.forward_eval(&bc).unwrap();
                let logits = m.head_logits(&pooled);
                crate::train::batch_loss_and_dlogits(&logits, &lc).unwrap().0
            };
            let report = grad_check(&mut model, &visit, &mut backprop, &mut loss, 1e-5, 6, 77);
            assert!(
                report.max_rel_err() < 1e-4,
                "{arch:?} full-model gradcheck: {report:?}"
            );
        }
    }

    #[test]
    fn dropout_backward_matches_finite_differences_at_fixed_masks() {
        // Both closures reseed the dropout rng, so every probe replays the
        // same masks and the loss stays differentiable.
        let mut config = toy_config(Arch::Encoder);
        config.dropout = 0.25;
        let mut model = TransformerModel::new(config, Vocab::built_in(), 6).unwrap();
        let batch: Vec<TokenSequence> = (0..2).map(|i| seq_for(&model, &frame(i))).collect();
        let labels = [0usize, 2];
        let visit =
            |m: &mut TransformerModel, f: &mut dyn FnMut(&mut Param)| m.visit_params_mut(f);
        let run = |m: &mut TransformerModel, batch: &[TokenSequence], labels: &[usize], back: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (pooled, cache) = m.forward_train(batch, &mut rng).unwrap();
            let (logits, head_cache) = m.head_forward_train(&pooled);
            let (loss, dlogits) = crate::train::batch_loss_and_dlogits(&logits, labels).unwrap();
            if back {
                let dpooled = m.head_backward(&head_cache, &dlogits);
                m.backward(&cache, &dpooled);
            }
            loss
        };
        let (bc, lc) = (batch.clone(), labels);
        let mut backprop = move |m: &mut TransformerModel| run(m, &bc, &lc, true);
        let (bc, lc) = (batch, labels);
        let mut loss = move |m: &mut TransformerModel| run(m, &bc, &lc, false);
        let report = grad_check(&mut model, &visit, &mut backprop, &mut loss, 1e-5, 4, 13);
        assert!(report.max_rel_err() < 1e-4, "dropout gradcheck: {report:?}");
    }

    #[test]
    fn dropout_distinguishes_train_and_eval() {
        let mut config = toy_config(Arch::Encoder);
        config.dropout = 0.5;
        let model = TransformerModel::new(config, Vocab::built_in(), 4).unwrap();
        let batch = vec![seq_for(&model, &frame(1))];
        let eval = model.forward_eval(&batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train_a, _) = model.forward_train(&batch, &mut rng).unwrap();
        assert_ne!(eval.data(), train_a.data());
        // Same rng seed, same mask sequence.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train_b, _) = model.forward_train(&batch, &mut rng).unwrap();
        assert_eq!(train_a.data(), train_b.data());
    }

    #[test]
    fn reinit_head_changes_only_the_head() {
        let model = toy_model(Arch::Encoder);
        let mut reinit = model.clone();
        reinit.reinit_head(99);
        let mut changed = Vec::new();
        let mut original = std::collections::HashMap::new();
        model.visit_params(&mut |p| {
            original.insert(p.name.clone(), p.value.clone());
        });
        reinit.visit_params(&mut |p| {
            if original[&p.name] != p.value {
                changed.push(p.name.clone());
            }
        });
        changed.sort();
        assert_eq!(changed, vec!["head.hidden.w", "head.out.w"]);
    }
}
