//! Weight-sharing supernet: one parameter store at the search space's
//! maximal dimensions, from which every gene's model is realized by taking
//! the front rows and columns of each tensor.
//!
//! Training follows single-path one-shot sampling: each step samples one
//! gene, runs forward/backward through its slices, and updates only the
//! touched regions (optimizer state is likewise advanced only for touched
//! entries, with global-step bias correction). Between training phases the
//! supernet ranks candidate genes by validation loss without any updates.

use std::collections::BTreeMap;
use std::path::Path;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::model::{self, ModelConfig};
use crate::space::{max_gene, sample_gene, validate_gene, Gene, SearchSpace};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Elem, ParamStore, Result, Tensor, TensorError,
};
use crate::train::{mean_val_loss, train_step_on_store, OptimHyper, StepCtx};

pub use crate::train::StepMetrics;

/// Shared weight store shaped by the space's maximal gene.
pub struct Supernet {
    pub space: SearchSpace,
    pub max_gene: Gene,
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// One front slice of a stored tensor: rows `[0, rows)`, columns `[0, cols)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceRef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// A gene plus the slices that realize it inside a supernet's storage.
pub struct SubnetView {
    pub gene: Gene,
    pub slices: Vec<SliceRef>,
}

impl Supernet {
    /// Builds and initializes supernet storage for `space`.
    pub fn new(space: SearchSpace, cfg: ModelConfig, init_seed: u64) -> Result<Supernet> {
        let problems = space.validate();
        if !problems.is_empty() {
            return Err(TensorError::Invalid(format!(
                "invalid search space: {}",
                problems.join("; ")
            )));
        }
        let maxg = max_gene(&space);
        let shapes = model::param_shapes(&maxg, cfg.vocab, cfg.max_positions);
        let store = model::init_store(&shapes, init_seed);
        Ok(Supernet { space, max_gene: maxg, cfg, store })
    }

    /// Every stored parameter is finite (checked after training steps).
    pub fn all_finite(&self) -> bool {
        self.store.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Front block `[0:e, 0:d]` of a supernet router matrix.
pub fn extract_router(supernet_router: &Tensor, e: usize, d: usize) -> Result<Tensor> {
    if e < 1 || e > supernet_router.rows() || d < 1 || d > supernet_router.cols() {
        return Err(TensorError::DimMismatch {
            op: "extract_router",
            a_rows: e,
            a_cols: d,
            b_rows: supernet_router.rows(),
            b_cols: supernet_router.cols(),
        });
    }
    Ok(Tensor::from_fn(e, d, |i, j| supernet_router.at(i, j)))
}

/// Front blocks of one expert's FFN pair: `(W_in[0:h, 0:d], W_out[0:d, 0:h])`.
/// `h = 0` yields empty matrices, marking an identity expert.
pub fn extract_expert_ffn(
    w_in: &Tensor,
    w_out: &Tensor,
    h: usize,
    d: usize,
) -> Result<(Tensor, Tensor)> {
    if h > w_in.rows() || d < 1 || d > w_in.cols() || w_out.shape() != (w_in.cols(), w_in.rows()) {
        return Err(TensorError::DimMismatch {
            op: "extract_expert_ffn",
            a_rows: h,
            a_cols: d,
            b_rows: w_in.rows(),
            b_cols: w_in.cols(),
        });
    }
    if h == 0 {
        return Ok((Tensor::zeros(0, 0), Tensor::zeros(0, 0)));
    }
    let front_in = Tensor::from_fn(h, d, |i, j| w_in.at(i, j));
    let front_out = Tensor::from_fn(d, h, |i, j| w_out.at(i, j));
    Ok((front_in, front_out))
}

/// The slice set realizing `gene` inside `net`'s storage. Slices are
/// descriptors into shared storage — reads and gradient write-back go
/// through the store — so perturbing a slice region is observed by the next
/// extraction. Use [`materialize_subnet`] for a detached copy.
pub fn extract_subnet(net: &Supernet, gene: &Gene) -> Result<SubnetView> {
    let problems = validate_gene(&net.space, gene);
    if !problems.is_empty() {
        return Err(TensorError::Invalid(format!(
            "gene invalid in this space: {}",
            problems.join("; ")
        )));
    }
    let slices = model::param_shapes(gene, net.cfg.vocab, net.cfg.max_positions)
        .into_iter()
        .map(|(name, rows, cols)| SliceRef { name, rows, cols })
        .collect();
    Ok(SubnetView { gene: gene.clone(), slices })
}

/// Copy-mode extraction: a fresh store holding each slice's values,
/// detached from supernet storage (oracle/testing aid).
pub fn materialize_subnet(net: &Supernet, gene: &Gene) -> Result<ParamStore> {
    let view = extract_subnet(net, gene)?;
    let mut out = ParamStore::new();
    for s in &view.slices {
        let block = net.store.read_slice(&s.name, s.rows, s.cols)?;
        out.add_tensor(&s.name, block);
    }
    Ok(out)
}

/// One SPOS step with the gene chosen by the caller (the sampled-gene form
/// is [`spos_train_step`]). Forward/backward run through the gene's slices;
/// Adam updates touch only those regions.
pub fn spos_step_with_gene(
    net: &mut Supernet,
    gene: &Gene,
    batch: &Batch,
    ctx: &StepCtx,
    hyper: &OptimHyper,
    dropout_rng: &mut dyn RngCore,
) -> Result<StepMetrics> {
    let view = extract_subnet(net, gene)?;
    let cfg = net.cfg.clone();
    train_step_on_store(&mut net.store, gene, &cfg, &view.slices, batch, ctx, hyper, dropout_rng)
}

/// Samples exactly one gene from the space and trains it for one step.
pub fn spos_train_step(
    net: &mut Supernet,
    batch: &Batch,
    ctx: &StepCtx,
    hyper: &OptimHyper,
    gene_rng: &mut ChaCha8Rng,
    dropout_rng: &mut dyn RngCore,
) -> Result<StepMetrics> {
    let gene = sample_gene(&net.space, gene_rng);
    spos_step_with_gene(net, &gene, batch, ctx, hyper, dropout_rng)
}

/// Mean label-smoothed cross-entropy of the gene's subnet over a validation
/// set, weighted by non-pad token counts. Read-only and deterministic.
pub fn estimate_fitness(
    net: &Supernet,
    gene: &Gene,
    val_pairs: &[(Vec<usize>, Vec<usize>)],
    label_smoothing: Elem,
    batch_pairs: usize,
) -> Result<Elem> {
    let view = extract_subnet(net, gene)?; // reject genes outside the space
    mean_val_loss(&net.store, &view.gene, &net.cfg, val_pairs, label_smoothing, batch_pairs)
}

/// Saves supernet weights with the space hash in the manifest, so a
/// checkpoint can never be loaded against a different space.
pub fn save_supernet(net: &Supernet, extra_meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut meta = extra_meta.clone();
    meta.insert("space_hash".to_string(), net.space.hash_hex());
    meta.insert("vocab".to_string(), net.cfg.vocab.to_string());
    meta.insert("max_positions".to_string(), net.cfg.max_positions.to_string());
    save_checkpoint(&net.store, &meta, path)
}

/// Loads weights saved by [`save_supernet`] into a freshly built supernet,
/// refusing mismatched spaces.
pub fn load_supernet(space: SearchSpace, cfg: ModelConfig, path: &Path) -> Result<Supernet> {
    let ckpt = load_checkpoint(path)?;
    let expected = space.hash_hex();
    match ckpt.meta.get("space_hash") {
        Some(h) if *h == expected => {}
        Some(h) => {
            return Err(TensorError::Format(format!(
                "checkpoint space hash {h} does not match this space ({expected})"
            )))
        }
        None => return Err(TensorError::Format("checkpoint has no space hash".into())),
    }
    let mut net = Supernet::new(space, cfg, 0)?;
    net.store.load_values(&ckpt)?;
    Ok(net)
}
