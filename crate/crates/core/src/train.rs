//! Training loops and evaluation.
//!
//! One optimizer step is shared between stand-alone training (a single gene,
//! store shaped exactly by that gene) and supernet training (single-path
//! sampling over shared storage): forward, smoothed cross-entropy plus the
//! scaled load-balance term, backward, then an Adam update restricted to the
//! gene's weight slices. Randomness comes from four named streams derived
//! from one seed — `data`, `init`, `gene`, `dropout` — so a supernet over a
//! one-point space reproduces stand-alone training bit for bit.
//!
//! Learning rate: linear warmup from `lr_min` to `lr_peak` over the first
//! quarter of training (by default), then cosine annealing back to `lr_min`.
//! A non-finite loss halts the run and leaves a last-good checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{make_batch, Batch};
use crate::jsonl::JsonlWriter;
use crate::model::{self, ForwardOpts, ModelConfig};
use crate::space::Gene;
use crate::supernet::{spos_train_step, SliceRef, Supernet};
use crate::tensor::{save_checkpoint, Elem, Graph, ParamStore, Result, TensorError};

/// Hyperparameters shared by every run at desk scale.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSchedule {
    pub total_steps: u64,
    /// Linear warmup length; the desk default is `total_steps / 4`.
    pub warmup_steps: u64,
    pub lr_min: Elem,
    pub lr_peak: Elem,
    pub label_smoothing: Elem,
    /// Scale on the router load-balance loss added to the cross-entropy.
    pub aux_coeff: Elem,
    pub batch_pairs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: u64,
}

impl TrainSchedule {
    /// Desk defaults: warmup = total/4, lr 1e-7 → 1e-3 → 1e-7,
    /// label smoothing 0.1, load-balance coefficient 0.01.
    pub fn desk(total_steps: u64, batch_pairs: usize, seed: u64) -> TrainSchedule {
        TrainSchedule {
            total_steps,
            warmup_steps: total_steps / 4,
            lr_min: 1e-7,
            lr_peak: 1e-3,
            label_smoothing: 0.1,
            aux_coeff: 0.01,
            batch_pairs,
            seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_pairs == 0 {
            return Err(TensorError::Invalid("schedule needs steps and batch pairs".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(TensorError::Invalid(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TensorError::Invalid("label smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based): linear from `lr_min` to `lr_peak`
/// over `[0, warmup]`, cosine from `lr_peak` back to `lr_min` over
/// `[warmup, total]`, clamped to `lr_min` afterwards. Both phases agree at
/// the warmup boundary.
pub fn lr_at(s: &TrainSchedule, step: u64) -> Elem {
    if step >= s.total_steps {
        return s.lr_min;
    }
    if s.warmup_steps > 0 && step < s.warmup_steps {
        return s.lr_min + (s.lr_peak - s.lr_min) * step as Elem / s.warmup_steps as Elem;
    }
    let t = (step - s.warmup_steps) as Elem / (s.total_steps - s.warmup_steps) as Elem;
    s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + (std::f64::consts::PI as Elem * t).cos())
}

/// Adam moment/step hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct OptimHyper {
    pub beta1: Elem,
    pub beta2: Elem,
    pub eps: Elem,
}

impl Default for OptimHyper {
    fn default() -> OptimHyper {
        OptimHyper { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Per-step context handed to the shared step function.
#[derive(Clone, Copy, Debug)]
pub struct StepCtx {
    pub lr: Elem,
    /// Global 1-based step number, used for Adam bias correction.
    pub step: u64,
    pub label_smoothing: Elem,
    pub aux_coeff: Elem,
}

/// Metrics from one optimizer step.
pub struct StepMetrics {
    pub gene_hash: String,
    pub loss: Elem,
    pub ce: Elem,
    pub aux: Elem,
}

/// Adam update restricted to the listed front slices. Moment state lives at
/// storage shape; entries outside the slices are untouched, so their state
/// does not advance. Bias correction uses the global step number.
pub fn adam_update_slices(
    store: &mut ParamStore,
    slices: &[SliceRef],
    lr: Elem,
    h: &OptimHyper,
    step: u64,
) {
    assert!(step >= 1, "Adam steps are 1-based");
    let bc1 = 1.0 - h.beta1.powi(step as i32);
    let bc2 = 1.0 - h.beta2.powi(step as i32);
    for s in slices {
        let idx = store.index_of(&s.name).expect("slice names a stored parameter");
        let p = store.param_mut(idx);
        debug_assert!(s.rows <= p.rows && s.cols <= p.cols, "slice exceeds {}", p.name);
        for i in 0..s.rows {
            let row0 = i * p.cols;
            for j in 0..s.cols {
                let k = row0 + j;
                let g = p.grad[k];
                p.adam_m[k] = h.beta1 * p.adam_m[k] + (1.0 - h.beta1) * g;
                p.adam_v[k] = h.beta2 * p.adam_v[k] + (1.0 - h.beta2) * g * g;
                let mhat = p.adam_m[k] / bc1;
                let vhat = p.adam_v[k] / bc2;
                p.value[k] -= lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
    }
}

/// One training step over the gene's slices of `store`: forward with
/// dropout, smoothed cross-entropy + scaled load-balance loss, backward,
/// slice-restricted Adam update. Errors with [`TensorError::NonFinite`]
/// before touching any weight if the loss is not finite.
pub fn train_step_on_store(
    store: &mut ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    slices: &[SliceRef],
    batch: &Batch,
    ctx: &StepCtx,
    hyper: &OptimHyper,
    dropout_rng: &mut dyn RngCore,
) -> Result<StepMetrics> {
    store.zero_grads();
    let mut g = Graph::new();
    let out = model::forward_training(
        &mut g,
        store,
        gene,
        cfg,
        &batch.src,
        &batch.tgt_in,
        ForwardOpts::training(),
        dropout_rng,
    )?;
    let ce = g.cross_entropy(out.logits, &batch.tgt_out_flat, ctx.label_smoothing, Some(cfg.pad))?;
    let aux_scaled = g.scale(out.aux_loss, ctx.aux_coeff);
    let total = g.add(ce, aux_scaled)?;
    let loss = g.scalar_of(total);
    if !loss.is_finite() {
        return Err(TensorError::NonFinite(format!(
            "loss {loss} at step {} (gene {})",
            ctx.step,
            gene.short_hash()
        )));
    }
    let metrics = StepMetrics {
        gene_hash: gene.short_hash(),
        loss,
        ce: g.scalar_of(ce),
        aux: g.scalar_of(out.aux_loss),
    };
    g.backward(total, store)?;
    adam_update_slices(store, slices, ctx.lr, hyper, ctx.step);
    Ok(metrics)
}

/// 64-bit seed for one named stream of a run seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic RNG for one named stream (`data`, `init`, `gene`,
/// `dropout`) of a run seed. Streams are independent: consuming one never
/// shifts another, which is what makes sampled-gene training comparable to
/// stand-alone training.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name))
}

/// What a training run produced.
pub struct TrainOutcome {
    pub steps_completed: u64,
    /// Total loss per completed step.
    pub losses: Vec<Elem>,
    /// True if the run stopped early on a non-finite loss.
    pub halted: bool,
    /// Checkpoint of the last finite-loss weights, when a directory was given.
    pub last_good: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainLogRecord<'a> {
    step: u64,
    lr: Elem,
    loss: Elem,
    ce: Elem,
    aux: Elem,
    gene: &'a str,
}

fn draw_batch(
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let picked: Vec<(Vec<usize>, Vec<usize>)> = (0..batch_pairs)
        .map(|_| pairs[rng.random_range(0..pairs.len())].clone())
        .collect();
    make_batch(&picked)
}

struct RunLogs {
    metrics: Option<JsonlWriter>,
    dir: Option<PathBuf>,
}

impl RunLogs {
    fn open(out_dir: Option<&Path>) -> Result<RunLogs> {
        match out_dir {
            None => Ok(RunLogs { metrics: None, dir: None }),
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Ok(RunLogs {
                    metrics: Some(JsonlWriter::create(&d.join("metrics.jsonl"))?),
                    dir: Some(d.to_path_buf()),
                })
            }
        }
    }

    fn log(&mut self, rec: &TrainLogRecord) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            w.write(rec)?;
        }
        Ok(())
    }
}

/// Trains one gene from scratch (or from `warm_start` weights, e.g. slices
/// copied out of a supernet). Returns the trained store and the outcome.
/// `out_dir`, when given, receives `metrics.jsonl` and checkpoints.
pub fn train_model(
    gene: &Gene,
    cfg: &ModelConfig,
    train_pairs: &[(Vec<usize>, Vec<usize>)],
    sched: &TrainSchedule,
    out_dir: Option<&Path>,
    warm_start: Option<ParamStore>,
) -> Result<(ParamStore, TrainOutcome)> {
    sched.validate()?;
    if train_pairs.is_empty() {
        return Err(TensorError::Invalid("no training pairs".into()));
    }
    let shapes = model::param_shapes(gene, cfg.vocab, cfg.max_positions);
    let mut store = match warm_start {
        None => model::init_store(&shapes, stream_seed(sched.seed, "init")),
        Some(s) => {
            for (name, rows, cols) in &shapes {
                match s.get(name) {
                    Some(p) if p.rows == *rows && p.cols == *cols => {}
                    Some(p) => {
                        return Err(TensorError::Invalid(format!(
                            "warm start shape mismatch for {name}: have {}x{}, need {rows}x{cols}",
                            p.rows, p.cols
                        )))
                    }
                    None => {
                        return Err(TensorError::Invalid(format!(
                            "warm start is missing parameter {name}"
                        )))
                    }
                }
            }
            s
        }
    };
    let slices: Vec<SliceRef> = shapes
        .into_iter()
        .map(|(name, rows, cols)| SliceRef { name, rows, cols })
        .collect();

    let mut data_rng = stream_rng(sched.seed, "data");
    let mut dropout_rng = stream_rng(sched.seed, "dropout");
    let _gene_rng = stream_rng(sched.seed, "gene"); // reserved for sampling runs
    let hyper = OptimHyper::default();
    let mut logs = RunLogs::open(out_dir)?;

    let mut outcome =
        TrainOutcome { steps_completed: 0, losses: Vec::new(), halted: false, last_good: None };
    let meta = |step: u64, loss: Elem| -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("gene_hash".into(), gene.hash_hex());
        m.insert("step".into(), step.to_string());
        m.insert("loss".into(), format!("{loss}"));
        m
    };

    for k in 0..sched.total_steps {
        let batch = draw_batch(train_pairs, sched.batch_pairs, &mut data_rng);
        let ctx = StepCtx {
            lr: lr_at(sched, k),
            step: k + 1,
            label_smoothing: sched.label_smoothing,
            aux_coeff: sched.aux_coeff,
        };
        match train_step_on_store(&mut store, gene, cfg, &slices, &batch, &ctx, &hyper, &mut dropout_rng)
        {
            Ok(m) => {
                logs.log(&TrainLogRecord {
                    step: k,
                    lr: ctx.lr,
                    loss: m.loss,
                    ce: m.ce,
                    aux: m.aux,
                    gene: &m.gene_hash,
                })?;
                outcome.losses.push(m.loss);
                outcome.steps_completed = k + 1;
                if sched.checkpoint_every > 0 && (k + 1) % sched.checkpoint_every == 0 {
                    if let Some(d) = &logs.dir {
                        let last = outcome.losses[outcome.losses.len() - 1];
                        save_checkpoint(&store, &meta(k + 1, last), &d.join(format!("step-{:06}.ckpt", k + 1)))?;
                    }
                }
            }
            Err(TensorError::NonFinite(why)) => {
                outcome.halted = true;
                if let Some(d) = &logs.dir {
                    let path = d.join("last-good.ckpt");
                    let last = outcome.losses.last().copied().unwrap_or(Elem::NAN);
                    save_checkpoint(&store, &meta(outcome.steps_completed, last), &path)?;
                    outcome.last_good = Some(path);
                }
                eprintln!("training halted: {why}");
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if !outcome.halted {
        if let Some(d) = &logs.dir {
            let last = outcome.losses.last().copied().unwrap_or(Elem::NAN);
            let path = d.join("final.ckpt");
            save_checkpoint(&store, &meta(outcome.steps_completed, last), &path)?;
            outcome.last_good = Some(path);
        }
    }
    Ok((store, outcome))
}

/// Single-path supernet training: each step samples one gene from the
/// space (via the `gene` stream) and updates only that gene's slices. The
/// caller builds `net` — seed its storage with `stream_seed(seed, "init")`
/// to make a one-point space reproduce stand-alone training exactly.
pub fn train_supernet(
    net: &mut Supernet,
    train_pairs: &[(Vec<usize>, Vec<usize>)],
    sched: &TrainSchedule,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if train_pairs.is_empty() {
        return Err(TensorError::Invalid("no training pairs".into()));
    }
    let mut data_rng = stream_rng(sched.seed, "data");
    let mut dropout_rng = stream_rng(sched.seed, "dropout");
    let mut gene_rng = stream_rng(sched.seed, "gene");
    let hyper = OptimHyper::default();
    let mut logs = RunLogs::open(out_dir)?;

    let mut outcome =
        TrainOutcome { steps_completed: 0, losses: Vec::new(), halted: false, last_good: None };
    let save = |net: &Supernet, step: u64, loss: Elem, path: &Path| -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), step.to_string());
        meta.insert("loss".to_string(), format!("{loss}"));
        crate::supernet::save_supernet(net, &meta, path)
    };

    for k in 0..sched.total_steps {
        let batch = draw_batch(train_pairs, sched.batch_pairs, &mut data_rng);
        let ctx = StepCtx {
            lr: lr_at(sched, k),
            step: k + 1,
            label_smoothing: sched.label_smoothing,
            aux_coeff: sched.aux_coeff,
        };
        match spos_train_step(net, &batch, &ctx, &hyper, &mut gene_rng, &mut dropout_rng) {
            Ok(m) => {
                logs.log(&TrainLogRecord {
                    step: k,
                    lr: ctx.lr,
                    loss: m.loss,
                    ce: m.ce,
                    aux: m.aux,
                    gene: &m.gene_hash,
                })?;
                outcome.losses.push(m.loss);
                outcome.steps_completed = k + 1;
                if sched.checkpoint_every > 0 && (k + 1) % sched.checkpoint_every == 0 {
                    if let Some(d) = &logs.dir {
                        save(net, k + 1, m.loss, &d.join(format!("step-{:06}.ckpt", k + 1)))?;
                    }
                }
            }
            Err(TensorError::NonFinite(why)) => {
                outcome.halted = true;
                if let Some(d) = &logs.dir {
                    let path = d.join("last-good.ckpt");
                    let last = outcome.losses.last().copied().unwrap_or(Elem::NAN);
                    save(net, outcome.steps_completed, last, &path)?;
                    outcome.last_good = Some(path);
                }
                eprintln!("supernet training halted: {why}");
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if !outcome.halted {
        if let Some(d) = &logs.dir {
            let path = d.join("final.ckpt");
            let last = outcome.losses.last().copied().unwrap_or(Elem::NAN);
            save(net, outcome.steps_completed, last, &path)?;
            outcome.last_good = Some(path);
        }
    }
    Ok(outcome)
}

/// Mean label-smoothed cross-entropy over `pairs`, weighted by non-pad
/// token counts so batch boundaries don't skew the mean. Read-only.
pub fn mean_val_loss(
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    pairs: &[(Vec<usize>, Vec<usize>)],
    label_smoothing: Elem,
    batch_pairs: usize,
) -> Result<Elem> {
    if pairs.is_empty() {
        return Err(TensorError::Invalid("empty validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // inference: dropout never drawn
    let mut weighted = 0.0;
    let mut tokens_total = 0usize;
    for chunk in pairs.chunks(batch_pairs.max(1)) {
        let batch = make_batch(chunk);
        let mut g = Graph::new();
        let out = model::forward_training(
            &mut g,
            store,
            gene,
            cfg,
            &batch.src,
            &batch.tgt_in,
            ForwardOpts::inference(),
            &mut rng,
        )?;
        let ce = g.cross_entropy(out.logits, &batch.tgt_out_flat, label_smoothing, Some(cfg.pad))?;
        let tokens = batch.tgt_out_flat.iter().filter(|&&t| t != cfg.pad).count();
        weighted += g.scalar_of(ce) * tokens as Elem;
        tokens_total += tokens;
    }
    Ok(weighted / tokens_total as Elem)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Mean label-smoothed cross-entropy (lower is better).
    Loss,
    /// Fraction of reference tokens matched position-wise by greedy decode.
    TokenAccuracy,
    /// Corpus-level 4-gram BLEU of greedy decodes against references.
    CorpusBleu,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<EvalMode, String> {
        match s {
            "loss" => Ok(EvalMode::Loss),
            "token_accuracy" => Ok(EvalMode::TokenAccuracy),
            "corpus_bleu" => Ok(EvalMode::CorpusBleu),
            other => Err(format!(
                "unknown eval mode {other:?} (expected loss, token_accuracy, or corpus_bleu)"
            )),
        }
    }
}

/// Corpus-level BLEU with 4-gram clipped precisions, geometric mean, and
/// the usual brevity penalty. No smoothing: any empty n-gram order gives 0,
/// so very short corpora score 0 by construction.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Elem {
    assert_eq!(hyps.len(), refs.len(), "one hypothesis per reference");
    use std::collections::HashMap;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            total[n - 1] += h.len() - n + 1;
            let mut ref_counts: HashMap<&[usize], usize> = HashMap::new();
            if r.len() >= n {
                for w in r.windows(n) {
                    *ref_counts.entry(w).or_default() += 1;
                }
            }
            let mut hyp_counts: HashMap<&[usize], usize> = HashMap::new();
            for w in h.windows(n) {
                *hyp_counts.entry(w).or_default() += 1;
            }
            for (w, c) in hyp_counts {
                matched[n - 1] += c.min(*ref_counts.get(w).unwrap_or(&0));
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return 0.0;
        }
        log_p += (matched[n] as Elem / total[n] as Elem).ln();
    }
    let bp =
        if hyp_len < ref_len { (1.0 - ref_len as Elem / hyp_len as Elem).exp() } else { 1.0 };
    bp * (log_p / 4.0).exp()
}

/// Evaluates a trained store for `gene` over held-out pairs.
pub fn evaluate(
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    pairs: &[(Vec<usize>, Vec<usize>)],
    mode: EvalMode,
    label_smoothing: Elem,
    batch_pairs: usize,
) -> Result<Elem> {
    if pairs.is_empty() {
        return Err(TensorError::Invalid("empty evaluation set".into()));
    }
    match mode {
        EvalMode::Loss => mean_val_loss(store, gene, cfg, pairs, label_smoothing, batch_pairs),
        EvalMode::TokenAccuracy => {
            let mut matches = 0usize;
            let mut denom = 0usize;
            for (src, reference) in pairs {
                let hyp = model::greedy_decode(store, gene, cfg, src, reference.len())?.tokens;
                denom += reference.len();
                for (i, want) in reference.iter().enumerate() {
                    if hyp.get(i) == Some(want) {
                        matches += 1;
                    }
                }
            }
            Ok(matches as Elem / denom as Elem)
        }
        EvalMode::CorpusBleu => {
            let mut hyps = Vec::with_capacity(pairs.len());
            let mut refs = Vec::with_capacity(pairs.len());
            for (src, reference) in pairs {
                let cap = (2 * reference.len() + 4).min(cfg.max_positions.saturating_sub(1));
                hyps.push(model::greedy_decode(store, gene, cfg, src, cap)?.tokens);
                refs.push(reference.clone());
            }
            Ok(corpus_bleu(&hyps, &refs))
        }
    }
}
