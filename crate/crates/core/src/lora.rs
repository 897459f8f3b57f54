//! Low-rank adaptation of affine layers: freeze the base weights, train
//! rank-r factors U (out x r, zero-initialized) and V (r x in, small
//! gaussian), scale the branch by alpha/r, and merge for deployment.
//!
//! The adapter is additive: the forward pass of an adapted layer is
//! `W0 x + b + (alpha/r) U (V dropout(x))`, so a freshly attached model is
//! bitwise identical to its base, and the base tensors never move during
//! training.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::derive_seed;
use crate::model::TransformerModel;
use crate::nn::{Param, Tensor};

/// Spec of which layers to adapt and with what hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    /// Adapter rank r.
    pub rank: usize,
    /// Scaling numerator; the branch is scaled by alpha/r.
    pub alpha: f64,
    /// Dropout on the adapter-branch input during training.
    pub dropout: f64,
    /// Substring filters over layer names; a block affine is adapted when
    /// any filter matches its name (e.g. "attn.q", "ffn.w1", or "block1."
    /// to scope one layer).
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> LoraConfig {
        LoraConfig {
            rank: 16,
            alpha: 64.0,
            dropout: 0.1,
            targets: ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.w1", "ffn.w2", "ffn.w3"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Rank-r additive update attached to a frozen base matrix.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// out x r factor, zero-initialized so the adapted model starts
    /// identical to the base.
    pub u: Param,
    /// r x in factor, gaussian-initialized (std 0.02).
    pub v: Param,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(
        name: &str,
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> LoraAdapter {
        LoraAdapter {
            u: Param::new(format!("{name}.lora_u"), Tensor::zeros(&[out_dim, rank]), true),
            v: Param::new(
                format!("{name}.lora_v"),
                Tensor::randn(&[rank, in_dim], 0.02, rng),
                true,
            ),
            rank,
            alpha,
            dropout,
        }
    }

    /// Effective branch scale alpha/r.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("no block affine matches the target filters {0:?}")]
    NoTargets(Vec<String>),
    #[error("layer {layer} is already adapted")]
    AlreadyAdapted { layer: String },
    #[error("rank {rank} exceeds min(out, in) = {limit} for layer {layer}")]
    RankTooLarge {
        layer: String,
        rank: usize,
        limit: usize,
    },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("adapter file does not match the base model (expected hash {expected:016x}, found {found:016x})")]
    BaseMismatch { expected: u64, found: u64 },
    #[error("adapter file references unknown layer {0}")]
    UnknownLayer(String),
    #[error("adapter tensor shape mismatch for layer {0}")]
    ShapeMismatch(String),
    #[error("malformed adapter file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Trainable/total parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableCounts {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Freezes every parameter except the classifier head and any adapter
/// factors; the base model stops moving entirely.
fn freeze_base(model: &mut TransformerModel) {
    model.visit_params_mut(&mut |p| {
        p.frozen = !(p.name.starts_with("head.") || p.name.contains(".lora_"));
    });
}

/// Attaches adapters to every block affine whose name matches a target
/// filter and freezes the whole base model: afterwards only the adapter
/// factors and the (always fully trainable) classifier head receive
/// gradients. Embeddings, norms and the head are never adapted.
///
/// Returns the names of the adapted layers.
pub fn attach_adapters(
    model: &mut TransformerModel,
    config: &LoraConfig,
    seed: u64,
) -> Result<Vec<String>, LoraError> {
    if config.rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    let mut attached = Vec::new();
    let mut failure = None;
    model.visit_block_affines_mut(&mut |name, affine| {
        if failure.is_some() || !config.targets.iter().any(|t| name.contains(t.as_str())) {
            return;
        }
        if affine.adapter.is_some() {
            failure = Some(LoraError::AlreadyAdapted {
                layer: name.to_string(),
            });
            return;
        }
        let (out_dim, in_dim) = (affine.out_dim(), affine.in_dim());
        let limit = out_dim.min(in_dim);
        if config.rank > limit {
            failure = Some(LoraError::RankTooLarge {
                layer: name.to_string(),
                rank: config.rank,
                limit,
            });
            return;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, crate::fnv1a64(name.as_bytes())));
        affine.adapter = Some(LoraAdapter::new(
            name,
            out_dim,
            in_dim,
            config.rank,
            config.alpha,
            config.dropout,
            &mut rng,
        ));
        attached.push(name.to_string());
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if attached.is_empty() {
        return Err(LoraError::NoTargets(config.targets.clone()));
    }
    freeze_base(model);
    Ok(attached)
}

/// Folds every adapter into its base weight (`W0 + (alpha/r) U V`), removes
/// the adapters and unfreezes the model back into a plain fully trainable
/// one. Returns how many layers were merged.
pub fn merge_adapters(model: &mut TransformerModel) -> usize {
    let mut merged = 0;
    model.visit_block_affines_mut(&mut |_, affine| {
        let Some(adapter) = affine.adapter.take() else {
            return;
        };
        let scale = adapter.scaling();
        let (out_dim, in_dim) = (affine.out_dim(), affine.in_dim());
        let r = adapter.rank;
        let u = adapter.u.value.data();
        let v = adapter.v.value.data();
        for o in 0..out_dim {
            let wrow = affine.w.value.row_mut(o);
            for kk in 0..r {
                let coeff = scale * u[o * r + kk];
                if coeff == 0.0 {
                    continue;
                }
                let vrow = &v[kk * in_dim..(kk + 1) * in_dim];
                for (wv, &vv) in wrow.iter_mut().zip(vrow) {
                    *wv += coeff * vv;
                }
            }
        }
        merged += 1;
    });
    if merged > 0 {
        model.visit_params_mut(&mut |p| p.frozen = false);
    }
    merged
}

/// Walks every parameter tensor and counts trainable vs total elements.
pub fn count_trainable(model: &TransformerModel) -> TrainableCounts {
    let mut trainable = 0;
    let mut total = 0;
    model.visit_params(&mut |p| {
        total += p.value.elem_count();
        if !p.frozen {
            trainable += p.value.elem_count();
        }
    });
    TrainableCounts {
        trainable,
        total,
        fraction: trainable as f64 / total as f64,
    }
}

const ADAPTER_MAGIC: &[u8; 8] = b"CANIDSLA";
const ADAPTER_VERSION: u32 = 1;

fn write_tensor(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read) -> Result<String, LoraError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| LoraError::Malformed("non-utf8 layer name".into()))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor, LoraError> {
    let rank = read_u32(r)? as usize;
    if rank > 3 {
        return Err(LoraError::Malformed(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(read_f64(r)?);
    }
    Ok(Tensor::from_vec(&shape, data))
}

/// Saves an adapter-only checkpoint: (layer name, r, alpha, dropout, U, V)
/// tuples plus the fingerprint of the base checkpoint the adapters belong to.
pub fn save_adapters(
    model: &TransformerModel,
    base_hash: u64,
    path: impl AsRef<Path>,
) -> Result<(), LoraError> {
    let mut entries: Vec<(String, LoraAdapter)> = Vec::new();
    model.visit_block_affines(&mut |name, affine| {
        if let Some(a) = &affine.adapter {
            entries.push((name.to_string(), a.clone()));
        }
    });
    let mut w = io::BufWriter::new(File::create(path)?);
    w.write_all(ADAPTER_MAGIC)?;
    w.write_all(&ADAPTER_VERSION.to_le_bytes())?;
    w.write_all(&base_hash.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, adapter) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(adapter.rank as u32).to_le_bytes())?;
        w.write_all(&adapter.alpha.to_le_bytes())?;
        w.write_all(&adapter.dropout.to_le_bytes())?;
        write_tensor(&mut w, &adapter.u.value)?;
        write_tensor(&mut w, &adapter.v.value)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads an adapter-only checkpoint onto a plain base model, verifying the
/// base fingerprint. The base is frozen exactly as [`attach_adapters`]
/// leaves it.
pub fn load_adapters(
    model: &mut TransformerModel,
    expected_base_hash: u64,
    path: impl AsRef<Path>,
) -> Result<Vec<String>, LoraError> {
    let mut r = io::BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ADAPTER_MAGIC {
        return Err(LoraError::Malformed("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != ADAPTER_VERSION {
        return Err(LoraError::Malformed(format!("unsupported version {version}")));
    }
    let found = read_u64(&mut r)?;
    if found != expected_base_hash {
        return Err(LoraError::BaseMismatch {
            expected: expected_base_hash,
            found,
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let alpha = read_f64(&mut r)?;
        let dropout = read_f64(&mut r)?;
        let u = read_tensor(&mut r)?;
        let v = read_tensor(&mut r)?;
        let mut applied = false;
        let mut failure = None;
        model.visit_block_affines_mut(&mut |layer, affine| {
            if layer != name || failure.is_some() || applied {
                return;
            }
            if u.shape() != [affine.out_dim(), rank] || v.shape() != [rank, affine.in_dim()] {
                failure = Some(LoraError::ShapeMismatch(name.clone()));
                return;
            }
            affine.adapter = Some(LoraAdapter {
                u: Param::new(format!("{name}.lora_u"), u.clone(), true),
                v: Param::new(format!("{name}.lora_v"), v.clone(), true),
                rank,
                alpha,
                dropout,
            });
            applied = true;
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if !applied {
            return Err(LoraError::UnknownLayer(name));
        }
        names.push(name);
    }
    freeze_base(model);
    Ok(names)
}
