//! Heterogeneous mixture-of-experts encoder-decoder transformer.
//!
//! A model is a [`Gene`] plus a parameter store. The same forward code
//! serves stand-alone models (store shaped exactly by the gene) and
//! shared-weight supernets (store shaped by the space's maximal gene):
//! every parameter read is a front slice, so a smaller gene simply reads
//! the front block of each stored tensor.
//!
//! Expert FFN sublayers use top-1 routing: each token goes to the single
//! highest-scoring expert (ties to the lowest index) and the expert output
//! is scaled by the winning gate probability. A width-0 expert is an
//! identity passthrough (gate-scaled), letting a token skip FFN compute.
//! Each decoder layer cross-attends to the elementwise mean of the last
//! `k` encoder layer outputs (`k = -1` means the final layer only).

use std::collections::HashMap;
use std::io::Write as IoWrite;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::space::Gene;
use crate::tensor::{Elem, Graph, NodeId, ParamStore, Result, Tensor, TensorError, MASK_NEG};

/// Model-level settings that are not part of the architecture encoding.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub vocab: usize,
    pub max_positions: usize,
    pub dropout: Elem,
    /// Token id excluded from loss and attention keys.
    pub pad: usize,
}

impl ModelConfig {
    pub fn new(vocab: usize, max_positions: usize) -> ModelConfig {
        ModelConfig { vocab, max_positions, dropout: 0.0, pad: crate::data::PAD }
    }
}

/// Per-call forward switches.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    /// Enables dropout (with the caller's random stream).
    pub training: bool,
    /// Learned positional embeddings; disable to make the encoder
    /// permutation-equivariant for testing.
    pub use_positions: bool,
}

impl ForwardOpts {
    pub fn training() -> ForwardOpts {
        ForwardOpts { training: true, use_positions: true }
    }
    pub fn inference() -> ForwardOpts {
        ForwardOpts { training: false, use_positions: true }
    }
}

// ---------------------------------------------------------------------------
// Host-side routing primitives (also the oracle surface for the graph path).
// ---------------------------------------------------------------------------

/// One expert-FFN layer's weights, detached from any store.
pub struct MoeLayerWeights {
    /// `e x d`; row `i` scores expert `i` for a `d`-dim token.
    pub router: Tensor,
    /// Per-expert `(W_in [h_j x d], W_out [d x h_j])`; widths may differ.
    pub experts: Vec<(Tensor, Tensor)>,
}

impl MoeLayerWeights {
    fn check(&self) -> Result<()> {
        let e = self.experts.len();
        if e == 0 || self.router.rows() != e {
            return Err(TensorError::Invalid(format!(
                "router has {} rows for {} experts",
                self.router.rows(),
                e
            )));
        }
        let d = self.router.cols();
        for (j, (w_in, w_out)) in self.experts.iter().enumerate() {
            let h = w_in.rows();
            if (w_in.cols() != d && h != 0) || w_out.shape() != (if h == 0 { 0 } else { d }, h) {
                return Err(TensorError::Invalid(format!(
                    "expert {j} shapes {:?}/{:?} inconsistent with d={d}",
                    w_in.shape(),
                    w_out.shape()
                )));
            }
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.experts.iter().map(|(w_in, _)| w_in.rows()).collect()
    }
}

/// Per-token dispatch produced by [`route_top1`].
pub struct RoutingDecision {
    /// Chosen expert per token, in `[0, e)`.
    pub expert_index: Vec<usize>,
    /// Winning gate probability per token, in `(0, 1]`.
    pub gate_prob: Vec<Elem>,
    /// Full gate distribution, `t x e`, rows on the simplex.
    pub gates: Tensor,
}

/// Argmax with ties broken toward the lowest index.
fn argmax_tie_low(row: &[Elem]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Softmax-of-scores routing: gates = softmax(tokens · routerᵀ) per token,
/// expert = argmax with lowest-index tie-break.
pub fn route_top1(weights: &MoeLayerWeights, tokens: &Tensor) -> Result<RoutingDecision> {
    weights.check()?;
    if tokens.cols() != weights.router.cols() {
        return Err(TensorError::DimMismatch {
            op: "route_top1",
            a_rows: tokens.rows(),
            a_cols: tokens.cols(),
            b_rows: weights.router.rows(),
            b_cols: weights.router.cols(),
        });
    }
    let mut g = Graph::new();
    let toks = g.input(tokens.clone());
    let router = g.input(weights.router.clone());
    let scores = g.matmul_bt(toks, router)?;
    let gates_node = g.softmax_rows(scores);
    let gates = g.value_of(gates_node);

    let t = tokens.rows();
    let mut expert_index = Vec::with_capacity(t);
    let mut gate_prob = Vec::with_capacity(t);
    for i in 0..t {
        let j = argmax_tie_low(gates.row(i));
        expert_index.push(j);
        gate_prob.push(gates.at(i, j));
    }
    Ok(RoutingDecision { expert_index, gate_prob, gates })
}

/// Applies each token's routed expert and scales by its gate:
/// `out[i] = gate[i] · W_out · relu(W_in · token[i])`, with width-0 experts
/// passing the token through unchanged (times the gate). Tokens are grouped
/// by expert so each expert runs as one pair of matrix products.
pub fn moe_ffn_forward(
    weights: &MoeLayerWeights,
    tokens: &Tensor,
    decision: &RoutingDecision,
) -> Result<Tensor> {
    weights.check()?;
    let t = tokens.rows();
    if decision.expert_index.len() != t {
        return Err(TensorError::Invalid(format!(
            "decision covers {} tokens, input has {t}",
            decision.expert_index.len()
        )));
    }
    let e = weights.experts.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); e];
    for (i, &j) in decision.expert_index.iter().enumerate() {
        groups[j].push(i);
    }

    let mut g = Graph::new();
    let toks = g.input(tokens.clone());
    let gate_col =
        g.input(Tensor::from_flat(t, 1, decision.gate_prob.clone()));
    let mut pieces = Vec::new();
    for (j, ids) in groups.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let xj = g.gather_rows(toks, ids)?;
        let gj = g.gather_rows(gate_col, ids)?;
        let (w_in, w_out) = &weights.experts[j];
        let out = if w_in.rows() == 0 {
            g.row_scale(xj, gj)?
        } else {
            let win = g.input(w_in.clone());
            let wout = g.input(w_out.clone());
            let h1 = g.matmul_bt(xj, win)?;
            let h2 = g.relu(h1);
            let o = g.matmul_bt(h2, wout)?;
            g.row_scale(o, gj)?
        };
        pieces.push((out, ids.clone()));
    }
    let out = g.scatter_rows(&pieces, t)?;
    Ok(g.value_of(out))
}

/// Switch-style balance loss: `e · Σ_i f_i · P_i` where `f_i` is the
/// fraction of tokens routed to expert `i` and `P_i` the mean gate
/// probability of expert `i`.
pub fn load_balance_loss(decision: &RoutingDecision, e: usize) -> Elem {
    let t = decision.expert_index.len();
    if t == 0 || e == 0 {
        return 0.0;
    }
    let mut f = vec![0.0 as Elem; e];
    for &j in &decision.expert_index {
        f[j] += 1.0;
    }
    let tf = t as Elem;
    let mut loss = 0.0;
    for j in 0..e {
        let mut p = 0.0;
        for i in 0..t {
            p += decision.gates.at(i, j);
        }
        loss += (f[j] / tf) * (p / tf);
    }
    e as Elem * loss
}

/// Context for a decoder layer's cross-attention: the final encoder layer's
/// output when `k == -1`, otherwise the elementwise mean of the last `k`
/// encoder layer outputs.
pub fn arbitrary_attention_context(encoder_layer_outputs: &[Tensor], k: i32) -> Result<Tensor> {
    let n = encoder_layer_outputs.len();
    if n == 0 {
        return Err(TensorError::Invalid("no encoder layer outputs".into()));
    }
    let span = if k == -1 {
        1
    } else if k >= 1 && (k as usize) <= n {
        k as usize
    } else {
        return Err(TensorError::IndexOutOfRange {
            op: "arbitrary_attention_context",
            index: k.unsigned_abs() as usize,
            bound: n,
        });
    };
    let last = &encoder_layer_outputs[n - 1];
    let (r, c) = last.shape();
    if span == 1 {
        return Ok(last.clone());
    }
    let mut out = Tensor::zeros(r, c);
    for layer in &encoder_layer_outputs[n - span..] {
        if layer.shape() != (r, c) {
            return Err(TensorError::DimMismatch {
                op: "arbitrary_attention_context",
                a_rows: r,
                a_cols: c,
                b_rows: layer.rows(),
                b_cols: layer.cols(),
            });
        }
        for i in 0..r {
            for j in 0..c {
                out.set(i, j, out.at(i, j) + layer.at(i, j));
            }
        }
    }
    let kf = span as Elem;
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, out.at(i, j) / kf);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameter layout.
// ---------------------------------------------------------------------------

fn attn_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, d_q: usize, d_kv: usize, qkv: usize) {
    out.push((format!("{prefix}.wq"), d_q, qkv));
    out.push((format!("{prefix}.bq"), 1, qkv));
    out.push((format!("{prefix}.wk"), d_kv, qkv));
    out.push((format!("{prefix}.bk"), 1, qkv));
    out.push((format!("{prefix}.wv"), d_kv, qkv));
    out.push((format!("{prefix}.bv"), 1, qkv));
    out.push((format!("{prefix}.wo"), qkv, d_q));
    out.push((format!("{prefix}.bo"), 1, d_q));
}

fn ln_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), 1, d));
    out.push((format!("{prefix}.bias"), 1, d));
}

fn moe_shapes(out: &mut Vec<(String, usize, usize)>, prefix: &str, d: usize, widths: &[usize]) {
    out.push((format!("{prefix}.router"), widths.len(), d));
    for (j, &h) in widths.iter().enumerate() {
        out.push((format!("{prefix}.expert{j}.win"), h, d));
        out.push((format!("{prefix}.expert{j}.wout"), d, h));
    }
}

/// Every parameter the gene's model owns, as `(name, rows, cols)` in a fixed
/// registration order. A supernet uses the same layout at the space's
/// maximal gene; any valid gene's shapes are coordinate-wise front blocks of
/// that layout. Expert FFNs are bias-free; attention and layernorm carry
/// biases.
pub fn param_shapes(gene: &Gene, vocab: usize, max_positions: usize) -> Vec<(String, usize, usize)> {
    let d_enc = gene.embed_dim_enc;
    let d_dec = gene.embed_dim_dec;
    let qkv = gene.qkv_dim;
    let mut out = Vec::new();
    out.push(("src_embed.tok".to_string(), vocab, d_enc));
    out.push(("src_embed.pos".to_string(), max_positions, d_enc));
    out.push(("tgt_embed.tok".to_string(), vocab, d_dec));
    out.push(("tgt_embed.pos".to_string(), max_positions, d_dec));
    for i in 0..gene.num_enc_layers {
        let p = format!("enc.{i}");
        ln_shapes(&mut out, &format!("{p}.ln1"), d_enc);
        attn_shapes(&mut out, &format!("{p}.attn"), d_enc, d_enc, qkv);
        ln_shapes(&mut out, &format!("{p}.ln2"), d_enc);
        moe_shapes(&mut out, &format!("{p}.moe"), d_enc, &gene.enc_expert_ffn_dims[i]);
    }
    ln_shapes(&mut out, "enc.final_ln", d_enc);
    for i in 0..gene.num_dec_layers {
        let p = format!("dec.{i}");
        ln_shapes(&mut out, &format!("{p}.ln1"), d_dec);
        attn_shapes(&mut out, &format!("{p}.self"), d_dec, d_dec, qkv);
        ln_shapes(&mut out, &format!("{p}.ln2"), d_dec);
        attn_shapes(&mut out, &format!("{p}.cross"), d_dec, d_enc, qkv);
        ln_shapes(&mut out, &format!("{p}.ln3"), d_dec);
        moe_shapes(&mut out, &format!("{p}.moe"), d_dec, &gene.dec_expert_ffn_dims[i]);
    }
    ln_shapes(&mut out, "dec.final_ln", d_dec);
    out.push(("vocab_proj.w".to_string(), d_dec, vocab));
    out.push(("vocab_proj.b".to_string(), 1, vocab));
    out
}

/// True for parameters excluded from reported parameter/FLOPs totals
/// (embedding tables and the output vocabulary projection).
pub fn is_reporting_excluded(name: &str) -> bool {
    name.starts_with("src_embed.") || name.starts_with("tgt_embed.") || name.starts_with("vocab_proj.")
}

/// Builds and initializes a store for the given layout: layernorm gains 1,
/// all biases 0, embeddings Normal(0, 1/√dim), other matrices
/// Xavier-uniform at their stored shape. Draw order equals layout order, so
/// two equal layouts with equal seeds initialize bit-identically.
pub fn init_store(shapes: &[(String, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, rows, cols) in shapes {
        let idx = store.add(name, *rows, *cols);
        let p = store.param_mut(idx);
        let is_bias = name.ends_with(".bias")
            || name.ends_with(".bq")
            || name.ends_with(".bk")
            || name.ends_with(".bv")
            || name.ends_with(".bo")
            || name.ends_with(".b");
        if name.ends_with(".gain") {
            p.value.iter_mut().for_each(|v| *v = 1.0);
        } else if is_bias {
            // stays zero
        } else if name.contains("embed.") {
            let std = 1.0 / (*cols as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            p.value.iter_mut().for_each(|v| *v = dist.sample(&mut rng) as Elem);
        } else {
            let limit = (6.0 / (*rows as f64 + *cols as f64)).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("valid uniform");
            p.value.iter_mut().for_each(|v| *v = dist.sample(&mut rng) as Elem);
        }
    }
    store
}

// ---------------------------------------------------------------------------
// Routing traces.
// ---------------------------------------------------------------------------

/// Dispatch record for one expert layer in one forward pass.
pub struct LayerRouting {
    /// "enc" or "dec".
    pub scope: &'static str,
    pub layer: usize,
    pub expert_of_token: Vec<usize>,
    pub gate_of_token: Vec<Elem>,
    /// Tokens per expert; sums to the token count (exactly-one dispatch).
    pub group_sizes: Vec<usize>,
}

/// All expert-layer dispatches from one forward pass.
#[derive(Default)]
pub struct RoutingTrace {
    pub layers: Vec<LayerRouting>,
}

/// One JSON line per (layer, token): scope, layer, token, expert, gate.
pub fn write_routing_jsonl<W: IoWrite>(trace: &RoutingTrace, w: &mut W) -> std::io::Result<()> {
    for lr in &trace.layers {
        for (tok, (&e, &g)) in lr.expert_of_token.iter().zip(&lr.gate_of_token).enumerate() {
            writeln!(
                w,
                "{{\"scope\":\"{}\",\"layer\":{},\"token\":{},\"expert\":{},\"gate\":{}}}",
                lr.scope, lr.layer, tok, e, g
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph-building blocks.
// ---------------------------------------------------------------------------

struct Ctx<'a> {
    store: &'a ParamStore,
    gene: &'a Gene,
    cfg: &'a ModelConfig,
    opts: ForwardOpts,
}

impl<'a> Ctx<'a> {
    fn dropout_rate(&self) -> Elem {
        if self.opts.training {
            self.cfg.dropout
        } else {
            0.0
        }
    }
}

fn layernorm(g: &mut Graph, ctx: &Ctx, prefix: &str, x: NodeId, d: usize) -> Result<NodeId> {
    let gain = g.param_slice(ctx.store, &format!("{prefix}.gain"), 1, d)?;
    let bias = g.param_slice(ctx.store, &format!("{prefix}.bias"), 1, d)?;
    g.layernorm_rows(x, gain, bias)
}

/// Multi-head attention: `q_in` is `[tq x d_q]`, `kv_in` is `[tk x d_kv]`,
/// both already normalized; `mask` is `[tq x tk]` additive. Heads partition
/// the qkv columns contiguously (head_dim = qkv / heads).
#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    ctx: &Ctx,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    d_q: usize,
    d_kv: usize,
    heads: usize,
    mask: &Tensor,
) -> Result<NodeId> {
    let qkv = ctx.gene.qkv_dim;
    let wq = g.param_slice(ctx.store, &format!("{prefix}.wq"), d_q, qkv)?;
    let bq = g.param_slice(ctx.store, &format!("{prefix}.bq"), 1, qkv)?;
    let wk = g.param_slice(ctx.store, &format!("{prefix}.wk"), d_kv, qkv)?;
    let bk = g.param_slice(ctx.store, &format!("{prefix}.bk"), 1, qkv)?;
    let wv = g.param_slice(ctx.store, &format!("{prefix}.wv"), d_kv, qkv)?;
    let bv = g.param_slice(ctx.store, &format!("{prefix}.bv"), 1, qkv)?;
    let wo = g.param_slice(ctx.store, &format!("{prefix}.wo"), qkv, d_q)?;
    let bo = g.param_slice(ctx.store, &format!("{prefix}.bo"), 1, d_q)?;

    let q0 = g.matmul(q_in, wq)?;
    let q = g.add_bias(q0, bq)?;
    let k0 = g.matmul(kv_in, wk)?;
    let k = g.add_bias(k0, bk)?;
    let v0 = g.matmul(kv_in, wv)?;
    let v = g.add_bias(v0, bv)?;

    let head_dim = qkv / heads;
    let scale = 1.0 / (head_dim as Elem).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, c0, c1)?;
        let kh = g.slice_cols(k, c0, c1)?;
        let vh = g.slice_cols(v, c0, c1)?;
        let s0 = g.matmul_bt(qh, kh)?;
        let s1 = g.scale(s0, scale);
        let s2 = g.add_mask(s1, mask)?;
        let probs = g.softmax_rows(s2);
        contexts.push(g.matmul(probs, vh)?);
    }
    let merged = g.concat_cols(&contexts)?;
    let o = g.matmul(merged, wo)?;
    g.add_bias(o, bo)
}

/// Expert-FFN sublayer on the tape. Routes every token to exactly one
/// expert, runs each expert's tokens as one grouped pair of products,
/// gate-scales, and scatters back. Returns the sublayer output and the
/// updated running auxiliary-loss accumulator (balance loss enters the tape
/// through the gate matrix, so the router receives gradient).
#[allow(clippy::too_many_arguments)]
fn moe_sublayer(
    g: &mut Graph,
    ctx: &Ctx,
    prefix: &str,
    scope: &'static str,
    layer: usize,
    y: NodeId,
    d: usize,
    widths: &[usize],
    aux_acc: NodeId,
    trace: &mut RoutingTrace,
) -> Result<(NodeId, NodeId)> {
    let e = widths.len();
    let t = g.shape_of(y).0;
    let router = g.param_slice(ctx.store, &format!("{prefix}.router"), e, d)?;
    let scores = g.matmul_bt(y, router)?;
    let gates = g.softmax_rows(scores);
    let gv = g.value_of(gates);

    let mut expert_of_token = Vec::with_capacity(t);
    let mut gate_of_token = Vec::with_capacity(t);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); e];
    for i in 0..t {
        let j = argmax_tie_low(gv.row(i));
        expert_of_token.push(j);
        gate_of_token.push(gv.at(i, j));
        groups[j].push(i);
    }

    // Balance loss e·Σ f_j·P_j as a weighted sum over the gate matrix:
    // weight[i][j] = e·f_j/t, so the P_j term stays differentiable.
    let tf = t as Elem;
    let ef = e as Elem;
    let mut aux_w = Tensor::zeros(t, e);
    for (j, ids) in groups.iter().enumerate() {
        let w = ef * (ids.len() as Elem / tf) / tf;
        for i in 0..t {
            aux_w.set(i, j, w);
        }
    }
    let layer_aux = g.dot_const(gates, &aux_w)?;
    let aux_acc = g.add(aux_acc, layer_aux)?;

    let mut pieces = Vec::new();
    for (j, ids) in groups.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let xj = g.gather_rows(y, ids)?;
        let gates_j = g.gather_rows(gates, ids)?;
        let gj = g.slice_cols(gates_j, j, j + 1)?;
        let out = if widths[j] == 0 {
            g.row_scale(xj, gj)?
        } else {
            let win = g.param_slice(ctx.store, &format!("{prefix}.expert{j}.win"), widths[j], d)?;
            let wout = g.param_slice(ctx.store, &format!("{prefix}.expert{j}.wout"), d, widths[j])?;
            let h1 = g.matmul_bt(xj, win)?;
            let h2 = g.relu(h1);
            let o = g.matmul_bt(h2, wout)?;
            g.row_scale(o, gj)?
        };
        pieces.push((out, ids.clone()));
    }
    let out = g.scatter_rows(&pieces, t)?;

    let group_sizes: Vec<usize> = groups.iter().map(|v| v.len()).collect();
    debug_assert_eq!(group_sizes.iter().sum::<usize>(), t, "exactly-one dispatch");
    trace.layers.push(LayerRouting { scope, layer, expert_of_token, gate_of_token, group_sizes });
    Ok((out, aux_acc))
}

/// Dense FFN sublayer reading expert 0's weights directly — the reduction
/// target for one-expert genes.
fn dense_sublayer(g: &mut Graph, ctx: &Ctx, prefix: &str, y: NodeId, d: usize, h: usize) -> Result<NodeId> {
    let win = g.param_slice(ctx.store, &format!("{prefix}.expert0.win"), h, d)?;
    let wout = g.param_slice(ctx.store, &format!("{prefix}.expert0.wout"), d, h)?;
    let h1 = g.matmul_bt(y, win)?;
    let h2 = g.relu(h1);
    g.matmul_bt(h2, wout)
}

fn embed_sequence(
    g: &mut Graph,
    ctx: &Ctx,
    table: &str,
    ids: &[usize],
    seq_len: usize,
    d: usize,
) -> Result<NodeId> {
    let tok = g.param_slice(ctx.store, &format!("{table}.tok"), ctx.cfg.vocab, d)?;
    let e = g.embed(tok, ids)?;
    let mut x = g.scale(e, (d as Elem).sqrt());
    if ctx.opts.use_positions {
        let pos_tab = g.param_slice(ctx.store, &format!("{table}.pos"), ctx.cfg.max_positions, d)?;
        let pos_ids: Vec<usize> = (0..ids.len()).map(|i| i % seq_len).collect();
        let p = g.embed(pos_tab, &pos_ids)?;
        x = g.add(x, p)?;
    }
    Ok(x)
}

/// Additive attention mask over flattened `[batch·len_q x batch·len_k]`
/// rows: cross-pair positions, padded keys, and (optionally) future
/// positions are blocked with `MASK_NEG`.
fn build_mask(
    batch: usize,
    len_q: usize,
    len_k: usize,
    key_pad: &[bool],
    causal: bool,
) -> Tensor {
    Tensor::from_fn(batch * len_q, batch * len_k, |i, j| {
        let (pq, posq) = (i / len_q, i % len_q);
        let (pk, posk) = (j / len_k, j % len_k);
        let blocked = pq != pk || key_pad[j] || (causal && posk > posq);
        if blocked {
            MASK_NEG
        } else {
            0.0
        }
    })
}

/// Encoder outputs: the raw residual stream after each layer (the final
/// layernorm is applied later, when a cross-attention context is formed).
pub struct EncodeOut {
    pub layer_outputs: Vec<NodeId>,
    pub batch: usize,
    pub src_len: usize,
    pub src_pad: Vec<bool>,
}

fn encode_impl(
    g: &mut Graph,
    ctx: &Ctx,
    src: &[Vec<usize>],
    rng: &mut dyn RngCore,
    trace: &mut RoutingTrace,
    aux_acc: NodeId,
) -> Result<(EncodeOut, NodeId)> {
    let batch = src.len();
    if batch == 0 {
        return Err(TensorError::Invalid("empty source batch".into()));
    }
    let src_len = src[0].len();
    if src_len == 0 || src.iter().any(|s| s.len() != src_len) {
        return Err(TensorError::Invalid(
            "source sequences must be non-empty and equal-length (pad first)".into(),
        ));
    }
    let flat: Vec<usize> = src.iter().flatten().copied().collect();
    let src_pad: Vec<bool> = flat.iter().map(|&id| id == ctx.cfg.pad).collect();
    let d = ctx.gene.embed_dim_enc;
    let rate = ctx.dropout_rate();

    let mut x = embed_sequence(g, ctx, "src_embed", &flat, src_len, d)?;
    x = g.dropout(x, rate, rng)?;
    let self_mask = build_mask(batch, src_len, src_len, &src_pad, false);

    let mut layer_outputs = Vec::with_capacity(ctx.gene.num_enc_layers);
    let mut aux = aux_acc;
    for i in 0..ctx.gene.num_enc_layers {
        let p = format!("enc.{i}");
        let n1 = layernorm(g, ctx, &format!("{p}.ln1"), x, d)?;
        let a = attention(g, ctx, &format!("{p}.attn"), n1, n1, d, d, ctx.gene.enc_heads[i], &self_mask)?;
        let a = g.dropout(a, rate, rng)?;
        x = g.add(x, a)?;

        let n2 = layernorm(g, ctx, &format!("{p}.ln2"), x, d)?;
        let widths = &ctx.gene.enc_expert_ffn_dims[i];
        let (f, new_aux) = moe_sublayer(g, ctx, &format!("{p}.moe"), "enc", i, n2, d, widths, aux, trace)?;
        aux = new_aux;
        let f = g.dropout(f, rate, rng)?;
        x = g.add(x, f)?;
        layer_outputs.push(x);
    }
    Ok((EncodeOut { layer_outputs, batch, src_len, src_pad }, aux))
}

/// Encoder-only forward (used by tests and by incremental decoding).
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    src: &[Vec<usize>],
    opts: ForwardOpts,
    rng: &mut dyn RngCore,
) -> Result<EncodeOut> {
    let ctx = Ctx { store, gene, cfg, opts };
    let mut trace = RoutingTrace::default();
    let zero = g.input(Tensor::zeros(1, 1));
    let (out, _aux) = encode_impl(g, &ctx, src, rng, &mut trace, zero)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn decode_stack(
    g: &mut Graph,
    ctx: &Ctx,
    enc: &EncodeOut,
    tgt_in: &[Vec<usize>],
    dense: bool,
    rng: &mut dyn RngCore,
    trace: &mut RoutingTrace,
    aux_acc: NodeId,
) -> Result<(NodeId, NodeId)> {
    let batch = tgt_in.len();
    let tgt_len = tgt_in[0].len();
    if batch != enc.batch {
        return Err(TensorError::Invalid(format!(
            "target batch {batch} != source batch {}",
            enc.batch
        )));
    }
    if tgt_len == 0 || tgt_in.iter().any(|s| s.len() != tgt_len) {
        return Err(TensorError::Invalid(
            "target sequences must be non-empty and equal-length (pad first)".into(),
        ));
    }
    let d = ctx.gene.embed_dim_dec;
    let d_enc = ctx.gene.embed_dim_enc;
    let rate = ctx.dropout_rate();
    let flat: Vec<usize> = tgt_in.iter().flatten().copied().collect();
    let tgt_pad: Vec<bool> = flat.iter().map(|&id| id == ctx.cfg.pad).collect();

    let mut x = embed_sequence(g, ctx, "tgt_embed", &flat, tgt_len, d)?;
    x = g.dropout(x, rate, rng)?;
    let self_mask = build_mask(batch, tgt_len, tgt_len, &tgt_pad, true);
    let cross_mask = build_mask(batch, tgt_len, enc.src_len, &enc.src_pad, false);

    // Cross-attention context per distinct attention span, normalized by the
    // shared final encoder layernorm.
    let mut context_cache: HashMap<usize, NodeId> = HashMap::new();
    let mut context_for = |g: &mut Graph, span: usize| -> Result<NodeId> {
        if let Some(&c) = context_cache.get(&span) {
            return Ok(c);
        }
        let n = enc.layer_outputs.len();
        let picked = &enc.layer_outputs[n - span..];
        let raw = if picked.len() == 1 { picked[0] } else { g.mean_of(picked)? };
        let gain = g.param_slice(ctx.store, "enc.final_ln.gain", 1, d_enc)?;
        let bias = g.param_slice(ctx.store, "enc.final_ln.bias", 1, d_enc)?;
        let normed = g.layernorm_rows(raw, gain, bias)?;
        context_cache.insert(span, normed);
        Ok(normed)
    };

    let mut aux = aux_acc;
    for i in 0..ctx.gene.num_dec_layers {
        let p = format!("dec.{i}");
        let n1 = layernorm(g, ctx, &format!("{p}.ln1"), x, d)?;
        let a = attention(g, ctx, &format!("{p}.self"), n1, n1, d, d, ctx.gene.dec_self_heads[i], &self_mask)?;
        let a = g.dropout(a, rate, rng)?;
        x = g.add(x, a)?;

        let span = if dense {
            1
        } else {
            crate::space::attention_span(ctx.gene.dec_arbitrary_attn[i])
        };
        let context = context_for(g, span)?;
        let n2 = layernorm(g, ctx, &format!("{p}.ln2"), x, d)?;
        let c = attention(
            g,
            ctx,
            &format!("{p}.cross"),
            n2,
            context,
            d,
            d_enc,
            ctx.gene.dec_cross_heads[i],
            &cross_mask,
        )?;
        let c = g.dropout(c, rate, rng)?;
        x = g.add(x, c)?;

        let n3 = layernorm(g, ctx, &format!("{p}.ln3"), x, d)?;
        let widths = &ctx.gene.dec_expert_ffn_dims[i];
        let f = if dense {
            dense_sublayer(g, ctx, &format!("{p}.moe"), n3, d, widths[0])?
        } else {
            let (f, new_aux) = moe_sublayer(g, ctx, &format!("{p}.moe"), "dec", i, n3, d, widths, aux, trace)?;
            aux = new_aux;
            f
        };
        let f = g.dropout(f, rate, rng)?;
        x = g.add(x, f)?;
    }
    let normed = layernorm(g, ctx, "dec.final_ln", x, d)?;
    Ok((normed, aux))
}

/// Output of a full teacher-forced forward pass.
pub struct ForwardOut {
    /// Flattened `[batch·tgt_len x vocab]` logits.
    pub logits: NodeId,
    /// Scalar: sum of per-layer load-balance losses (encoder + decoder).
    pub aux_loss: NodeId,
    pub trace: RoutingTrace,
    /// Forward matmul FLOPs excluding the vocabulary projection.
    pub body_flops: u64,
    /// Forward matmul FLOPs of the vocabulary projection alone.
    pub vocab_flops: u64,
}

/// Teacher-forced forward over equal-length (padded) batches. `tgt_in` is
/// the shifted decoder input (BOS-first); pair logits rows with the
/// corresponding flattened gold targets for the loss.
pub fn forward_training(
    g: &mut Graph,
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    src: &[Vec<usize>],
    tgt_in: &[Vec<usize>],
    opts: ForwardOpts,
    rng: &mut dyn RngCore,
) -> Result<ForwardOut> {
    forward_inner(g, store, gene, cfg, src, tgt_in, opts, rng, false)
}

/// Same dimensions and weights, but the plain dense path: no router, no
/// gather/scatter, standard last-layer cross-attention. Only valid for
/// genes with exactly one expert per layer; used to verify that one-expert
/// routing reduces to a dense transformer bit-for-bit.
pub fn forward_dense(
    g: &mut Graph,
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    src: &[Vec<usize>],
    tgt_in: &[Vec<usize>],
    opts: ForwardOpts,
    rng: &mut dyn RngCore,
) -> Result<ForwardOut> {
    if gene.enc_experts.iter().chain(&gene.dec_experts).any(|&e| e != 1) {
        return Err(TensorError::Invalid("dense path requires 1 expert per layer".into()));
    }
    forward_inner(g, store, gene, cfg, src, tgt_in, opts, rng, true)
}

#[allow(clippy::too_many_arguments)]
fn forward_inner(
    g: &mut Graph,
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    src: &[Vec<usize>],
    tgt_in: &[Vec<usize>],
    opts: ForwardOpts,
    rng: &mut dyn RngCore,
    dense: bool,
) -> Result<ForwardOut> {
    let ctx = Ctx { store, gene, cfg, opts };
    let mut trace = RoutingTrace::default();
    let zero = g.input(Tensor::zeros(1, 1));
    let (enc, aux) = if dense {
        // Dense path: same encoder wiring, FFN sublayers without routing.
        encode_dense(g, &ctx, src, rng)?
    } else {
        encode_impl(g, &ctx, src, rng, &mut trace, zero)?
    };
    let (hidden, aux) = decode_stack(g, &ctx, &enc, tgt_in, dense, rng, &mut trace, aux)?;
    let body_flops = g.matmul_flops();
    let d = gene.embed_dim_dec;
    let w = g.param_slice(store, "vocab_proj.w", d, cfg.vocab)?;
    let b = g.param_slice(store, "vocab_proj.b", 1, cfg.vocab)?;
    let l0 = g.matmul(hidden, w)?;
    let logits = g.add_bias(l0, b)?;
    let vocab_flops = g.matmul_flops() - body_flops;
    Ok(ForwardOut { logits, aux_loss: aux, trace, body_flops, vocab_flops })
}

fn encode_dense(
    g: &mut Graph,
    ctx: &Ctx,
    src: &[Vec<usize>],
    rng: &mut dyn RngCore,
) -> Result<(EncodeOut, NodeId)> {
    let batch = src.len();
    if batch == 0 {
        return Err(TensorError::Invalid("empty source batch".into()));
    }
    let src_len = src[0].len();
    if src_len == 0 || src.iter().any(|s| s.len() != src_len) {
        return Err(TensorError::Invalid(
            "source sequences must be non-empty and equal-length (pad first)".into(),
        ));
    }
    let flat: Vec<usize> = src.iter().flatten().copied().collect();
    let src_pad: Vec<bool> = flat.iter().map(|&id| id == ctx.cfg.pad).collect();
    let d = ctx.gene.embed_dim_enc;
    let rate = ctx.dropout_rate();

    let mut x = embed_sequence(g, ctx, "src_embed", &flat, src_len, d)?;
    x = g.dropout(x, rate, rng)?;
    let self_mask = build_mask(batch, src_len, src_len, &src_pad, false);

    let mut layer_outputs = Vec::with_capacity(ctx.gene.num_enc_layers);
    for i in 0..ctx.gene.num_enc_layers {
        let p = format!("enc.{i}");
        let n1 = layernorm(g, ctx, &format!("{p}.ln1"), x, d)?;
        let a = attention(g, ctx, &format!("{p}.attn"), n1, n1, d, d, ctx.gene.enc_heads[i], &self_mask)?;
        let a = g.dropout(a, rate, rng)?;
        x = g.add(x, a)?;
        let n2 = layernorm(g, ctx, &format!("{p}.ln2"), x, d)?;
        let f = dense_sublayer(g, ctx, &format!("{p}.moe"), n2, d, ctx.gene.enc_expert_ffn_dims[i][0])?;
        let f = g.dropout(f, rate, rng)?;
        x = g.add(x, f)?;
        layer_outputs.push(x);
    }
    let zero = g.input(Tensor::zeros(1, 1));
    Ok((EncodeOut { layer_outputs, batch, src_len, src_pad }, zero))
}

// ---------------------------------------------------------------------------
// Greedy decoding.
// ---------------------------------------------------------------------------

/// Greedy decode of a single source sequence, with section timings for the
/// latency harness. Each step re-runs the decoder on the full prefix (no
/// incremental cache); the encoder runs exactly once.
pub struct DecodeResult {
    /// Generated ids, BOS excluded; stops after EOS or `max_len` tokens.
    pub tokens: Vec<usize>,
    pub encoder_ns: u128,
    pub total_ns: u128,
}

pub fn greedy_decode(
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    src: &[usize],
    max_len: usize,
) -> Result<DecodeResult> {
    decode_loop(store, gene, cfg, src, max_len, true)
}

/// Latency-protocol decode: exactly `steps` greedy steps, never stopping at
/// EOS (which counts as an ordinary generated token), so every pass does
/// identical work. `tokens` always has `steps` entries.
pub fn timed_decode_pass(
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    src: &[usize],
    steps: usize,
) -> Result<DecodeResult> {
    decode_loop(store, gene, cfg, src, steps, false)
}

fn decode_loop(
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    src: &[usize],
    max_len: usize,
    stop_on_eos: bool,
) -> Result<DecodeResult> {
    let started = Instant::now();
    let opts = ForwardOpts::inference();
    let ctx = Ctx { store, gene, cfg, opts };
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout is off; never drawn from
    let mut trace = RoutingTrace::default();

    // Encoder once; capture per-layer outputs as plain tensors.
    let src_batch = vec![src.to_vec()];
    let mut eg = Graph::new();
    let zero = eg.input(Tensor::zeros(1, 1));
    let (enc, _aux) = encode_impl(&mut eg, &ctx, &src_batch, &mut rng, &mut trace, zero)?;
    let enc_tensors: Vec<Tensor> = enc.layer_outputs.iter().map(|&n| eg.value_of(n)).collect();
    let encoder_ns = started.elapsed().as_nanos();

    let eos = crate::data::EOS;
    let mut prefix = vec![crate::data::BOS];
    let mut out_tokens = Vec::new();
    for _ in 0..max_len {
        let mut g = Graph::new();
        let layer_nodes: Vec<NodeId> = enc_tensors.iter().map(|t| g.input(t.clone())).collect();
        let enc_view = EncodeOut {
            layer_outputs: layer_nodes,
            batch: 1,
            src_len: enc.src_len,
            src_pad: enc.src_pad.clone(),
        };
        let aux0 = g.input(Tensor::zeros(1, 1));
        let mut step_trace = RoutingTrace::default();
        let (hidden, _aux) = decode_stack(
            &mut g,
            &ctx,
            &enc_view,
            &[prefix.clone()],
            false,
            &mut rng,
            &mut step_trace,
            aux0,
        )?;
        let d = gene.embed_dim_dec;
        let w = g.param_slice(store, "vocab_proj.w", d, cfg.vocab)?;
        let b = g.param_slice(store, "vocab_proj.b", 1, cfg.vocab)?;
        let l0 = g.matmul(hidden, w)?;
        let logits = g.add_bias(l0, b)?;
        let last = g.value_row(logits, prefix.len() - 1);
        let next = argmax_tie_low(last);
        prefix.push(next);
        if stop_on_eos && next == eos {
            break;
        }
        out_tokens.push(next);
    }
    Ok(DecodeResult { tokens: out_tokens, encoder_ns, total_ns: started.elapsed().as_nanos() })
}
