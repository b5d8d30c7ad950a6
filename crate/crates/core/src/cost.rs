//! Analytical parameter and FLOPs accounting.
//!
//! Written from the architecture definition, independently of the graph
//! builder, so the instrumented matmul counter and these formulas can
//! cross-check each other. Two FLOPs conventions exist on purpose:
//!
//! * **Reporting** ([`count_flops`]): inference-style. The encoder runs
//!   once; the decoder is billed per generated token with cached
//!   self-attention keys/values and cross-attention K/V computed once.
//!   Expert FFNs are billed at the layer's *mean* expert width (each token
//!   activates exactly one expert). Returns `f64`.
//! * **Teacher-forced** ([`count_flops_teacher_forced`]): training-style.
//!   Dense `[t x t]` self-attention score matrices, every projection over
//!   the full sequence, and expert FFNs billed at the *actual* routed group
//!   sizes taken from a forward pass's routing trace. Matches the graph's
//!   matmul counter exactly, in `u64`.
//!
//! Parameter counts exclude token/position embeddings and the vocabulary
//! projection by default (the `_including_embeddings` variant adds them).
//! Expert FFNs are bias-free; attention and layernorm carry biases.

use serde::Serialize;

use crate::model::RoutingTrace;
use crate::space::Gene;
use crate::tensor::{Result, TensorError};

/// Parameter totals for one gene's subnet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCounts {
    /// Every parameter, all experts included.
    pub total: u64,
    /// Expected parameters touched per token: experts enter at their mean
    /// size per layer, everything else fully.
    pub active_mean: f64,
    /// Worst-case parameters touched per token: the largest expert per layer.
    pub active_worst: u64,
}

/// 100 · (total − active_mean) / total: how much of the network a single
/// token never touches.
pub fn sparsity_pct(c: &ParamCounts) -> f64 {
    if c.total == 0 {
        return 0.0;
    }
    100.0 * (c.total as f64 - c.active_mean) / c.total as f64
}

fn attn_params(d_q: u64, d_kv: u64, q: u64) -> u64 {
    // wq [d_q x q] + wk,wv [d_kv x q] + wo [q x d_q] + biases bq,bk,bv [q] + bo [d_q].
    d_q * q + 2 * d_kv * q + q * d_q + 3 * q + d_q
}

fn expert_params(d: u64, widths: &[usize]) -> (u64, f64, u64) {
    let per: Vec<u64> = widths.iter().map(|&h| 2 * d * h as u64).collect();
    let total: u64 = per.iter().sum();
    let mean = total as f64 / widths.len() as f64;
    let worst = per.iter().copied().max().unwrap_or(0);
    (total, mean, worst)
}

/// Parameters of the gene's subnet, embeddings and vocabulary projection
/// excluded.
pub fn count_params(gene: &Gene) -> ParamCounts {
    let de = gene.embed_dim_enc as u64;
    let dd = gene.embed_dim_dec as u64;
    let q = gene.qkv_dim as u64;
    let mut total = 0u64;
    let mut active = 0f64;
    let mut worst = 0u64;

    for widths in &gene.enc_expert_ffn_dims {
        let base = attn_params(de, de, q)      // self-attention
            + 2 * (2 * de)                     // ln1 + ln2 (gain & bias)
            + widths.len() as u64 * de;        // router
        let (et, em, ew) = expert_params(de, widths);
        total += base + et;
        active += base as f64 + em;
        worst += base + ew;
    }
    total += 2 * de; // enc.final_ln
    active += (2 * de) as f64;
    worst += 2 * de;

    for widths in &gene.dec_expert_ffn_dims {
        let base = attn_params(dd, dd, q)      // self-attention
            + attn_params(dd, de, q)           // cross-attention (K/V from encoder width)
            + 3 * (2 * dd)                     // ln1 + ln2 + ln3
            + widths.len() as u64 * dd;        // router
        let (et, em, ew) = expert_params(dd, widths);
        total += base + et;
        active += base as f64 + em;
        worst += base + ew;
    }
    total += 2 * dd; // dec.final_ln
    active += (2 * dd) as f64;
    worst += 2 * dd;

    ParamCounts { total, active_mean: active, active_worst: worst }
}

/// Like [`count_params`] but with token/position embeddings and the
/// vocabulary projection added to all three figures (a token reads one
/// embedding row and the full projection, so they count as active).
pub fn count_params_including_embeddings(
    gene: &Gene,
    vocab: usize,
    max_positions: usize,
) -> ParamCounts {
    let base = count_params(gene);
    let (v, p) = (vocab as u64, max_positions as u64);
    let de = gene.embed_dim_enc as u64;
    let dd = gene.embed_dim_dec as u64;
    let extra = v * de + p * de   // src embed + positions
        + v * dd + p * dd         // tgt embed + positions
        + dd * v + v;             // vocab projection + bias
    ParamCounts {
        total: base.total + extra,
        active_mean: base.active_mean + extra as f64,
        active_worst: base.active_worst + extra,
    }
}

/// FLOPs of one translated sentence under the reporting convention,
/// bucketed. Matrix products are billed `2·m·k·n`; everything that is not a
/// matrix product is a first-order estimate kept in [`other`](Self::other).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlopsBreakdown {
    pub encoder: f64,
    pub decoder: f64,
    /// Vocabulary projection, excluded from the headline.
    pub vocab: f64,
    /// First-order non-matmul estimate (softmax 5/elem, layernorm 8/elem,
    /// relu 1/elem, residual add 1/elem). Never part of the headline.
    pub other: f64,
}

impl FlopsBreakdown {
    /// The comparable figure: encoder + decoder matmul FLOPs.
    pub fn headline(&self) -> f64 {
        self.encoder + self.decoder
    }

    /// Headline with the vocabulary projection re-included.
    pub fn with_vocab(&self) -> f64 {
        self.headline() + self.vocab
    }
}

fn mean_width(widths: &[usize]) -> f64 {
    widths.iter().sum::<usize>() as f64 / widths.len() as f64
}

/// Analytical FLOPs for translating a source of `s` tokens into `t`
/// generated tokens (reporting convention; see module docs).
pub fn count_flops(gene: &Gene, s: usize, t: usize, vocab: usize) -> FlopsBreakdown {
    let de = gene.embed_dim_enc as f64;
    let dd = gene.embed_dim_dec as f64;
    let q = gene.qkv_dim as f64;
    let (s, t) = (s as f64, t as f64);

    let mut encoder = 0.0;
    let mut other = 0.0;
    for (i, widths) in gene.enc_expert_ffn_dims.iter().enumerate() {
        let e = widths.len() as f64;
        let w = mean_width(widths);
        encoder += 8.0 * s * de * q      // q/k/v/o projections
            + 4.0 * s * s * q            // scores + context over all heads
            + 2.0 * s * de * e           // router
            + 4.0 * s * de * w;          // expert FFN at mean width
        let heads = gene.enc_heads[i] as f64;
        other += 5.0 * (heads * s * s + s * e)   // softmax over scores + gates
            + 8.0 * 2.0 * s * de                 // two layernorms
            + s * w                              // relu
            + 2.0 * s * de;                      // residual adds
    }
    other += 8.0 * s * de; // enc.final_ln

    let mut decoder = 0.0;
    for (i, widths) in gene.dec_expert_ffn_dims.iter().enumerate() {
        let e = widths.len() as f64;
        let w = mean_width(widths);
        decoder += t * 8.0 * dd * q              // self q/k/v/o, new token only
            + 2.0 * q * t * (t + 1.0)            // self scores+context vs growing cache
            + t * 4.0 * dd * q                   // cross q and o
            + 4.0 * s * de * q                   // cross k/v, computed once
            + t * 4.0 * s * q                    // cross scores + context
            + t * 2.0 * dd * e                   // router
            + t * 4.0 * dd * w;                  // expert FFN at mean width
        let sh = gene.dec_self_heads[i] as f64;
        let ch = gene.dec_cross_heads[i] as f64;
        other += 5.0 * (sh * t * (t + 1.0) / 2.0 + ch * t * s + t * e)
            + 8.0 * 3.0 * t * dd
            + t * w
            + 3.0 * t * dd;
    }
    other += 8.0 * t * dd; // dec.final_ln

    FlopsBreakdown { encoder, decoder, vocab: 2.0 * t * dd * vocab as f64, other }
}

/// Exact matmul FLOPs of one teacher-forced forward pass at batch size 1,
/// with `s` source rows and `u` decoder input rows, using the routed group
/// sizes recorded in `trace`. Returns `(body, vocab)`, matching the graph's
/// instrumented counter split around the vocabulary projection.
pub fn count_flops_teacher_forced(
    gene: &Gene,
    s: usize,
    u: usize,
    vocab: usize,
    trace: &RoutingTrace,
) -> Result<(u64, u64)> {
    let groups = |scope: &str, layer: usize, experts: usize, tokens: usize| -> Result<Vec<usize>> {
        let entry = trace
            .layers
            .iter()
            .find(|l| l.scope == scope && l.layer == layer)
            .ok_or_else(|| {
                TensorError::Invalid(format!("trace has no entry for {scope} layer {layer}"))
            })?;
        if entry.group_sizes.len() != experts {
            return Err(TensorError::Invalid(format!(
                "{scope} layer {layer}: trace has {} groups, gene has {experts} experts",
                entry.group_sizes.len()
            )));
        }
        let sum: usize = entry.group_sizes.iter().sum();
        if sum != tokens {
            return Err(TensorError::Invalid(format!(
                "{scope} layer {layer}: group sizes sum to {sum}, expected {tokens} tokens"
            )));
        }
        Ok(entry.group_sizes.clone())
    };

    let de = gene.embed_dim_enc as u64;
    let dd = gene.embed_dim_dec as u64;
    let q = gene.qkv_dim as u64;
    let (su, uu) = (s as u64, u as u64);

    let mut body = 0u64;
    for (i, widths) in gene.enc_expert_ffn_dims.iter().enumerate() {
        body += 8 * su * de * q + 4 * su * su * q + 2 * su * de * widths.len() as u64;
        for (n, &h) in groups("enc", i, widths.len(), s)?.iter().zip(widths) {
            body += 4 * (*n as u64) * de * h as u64;
        }
    }
    for (i, widths) in gene.dec_expert_ffn_dims.iter().enumerate() {
        body += 8 * uu * dd * q          // self projections over all rows
            + 4 * uu * uu * q            // dense masked self scores + context
            + 4 * uu * dd * q            // cross q and o
            + 4 * su * de * q            // cross k/v over the source
            + 4 * uu * su * q            // cross scores + context
            + 2 * uu * dd * widths.len() as u64;
        for (n, &h) in groups("dec", i, widths.len(), u)?.iter().zip(widths) {
            body += 4 * (*n as u64) * dd * h as u64;
        }
    }
    Ok((body, 2 * uu * dd * vocab as u64))
}

/// Everything the cost model knows about one gene at one sequence length,
/// ready for TOML serialization.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub gene_hash: String,
    pub src_len: usize,
    pub tgt_len: usize,
    pub vocab: usize,
    pub params_total: u64,
    pub params_active_mean: f64,
    pub params_active_worst: u64,
    pub sparsity_pct: f64,
    pub flops_encoder: f64,
    pub flops_decoder: f64,
    /// encoder + decoder; the figure constraints and comparisons use.
    pub flops_headline: f64,
    pub flops_vocab: f64,
    pub flops_other: f64,
}

pub fn cost_report(gene: &Gene, src_len: usize, tgt_len: usize, vocab: usize) -> CostReport {
    let params = count_params(gene);
    let flops = count_flops(gene, src_len, tgt_len, vocab);
    CostReport {
        gene_hash: gene.hash_hex(),
        src_len,
        tgt_len,
        vocab,
        params_total: params.total,
        params_active_mean: params.active_mean,
        params_active_worst: params.active_worst,
        sparsity_pct: sparsity_pct(&params),
        flops_encoder: flops.encoder,
        flops_decoder: flops.decoder,
        flops_headline: flops.headline(),
        flops_vocab: flops.vocab,
        flops_other: flops.other,
    }
}

pub fn report_toml(report: &CostReport) -> String {
    toml::to_string(report).expect("report serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_batch;
    use crate::model::{self, ForwardOpts, ModelConfig};
    use crate::space::{max_gene, sample_gene, SearchSpace};
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A published expert-layout architecture at translation scale, used as
    /// a frozen reference point for the cost model.
    fn std_expert_gene() -> Gene {
        Gene {
            embed_dim_enc: 512,
            embed_dim_dec: 512,
            qkv_dim: 512,
            num_enc_layers: 6,
            num_dec_layers: 4,
            enc_heads: vec![8; 6],
            dec_self_heads: vec![8; 4],
            dec_cross_heads: vec![8; 4],
            dec_arbitrary_attn: vec![-1; 4],
            enc_experts: vec![5, 1, 1, 1, 2, 1],
            dec_experts: vec![1, 1, 1, 1],
            enc_expert_ffn_dims: vec![
                vec![3072; 5],
                vec![3072],
                vec![3072],
                vec![3072],
                vec![2048; 2],
                vec![3072],
            ],
            dec_expert_ffn_dims: vec![vec![3072]; 4],
        }
    }

    /// The classic dense big encoder-decoder written as a gene.
    fn dense_big_gene() -> Gene {
        Gene {
            embed_dim_enc: 1024,
            embed_dim_dec: 1024,
            qkv_dim: 1024,
            num_enc_layers: 6,
            num_dec_layers: 6,
            enc_heads: vec![16; 6],
            dec_self_heads: vec![16; 6],
            dec_cross_heads: vec![16; 6],
            dec_arbitrary_attn: vec![-1; 6],
            enc_experts: vec![1; 6],
            dec_experts: vec![1; 6],
            enc_expert_ffn_dims: vec![vec![4096]; 6],
            dec_expert_ffn_dims: vec![vec![4096]; 6],
        }
    }

    fn forward_once(
        gene: &Gene,
        cfg: &ModelConfig,
        src: Vec<usize>,
        tgt: Vec<usize>,
        seed: u64,
    ) -> (model::ForwardOut, u64, u64) {
        let shapes = model::param_shapes(gene, cfg.vocab, cfg.max_positions);
        let store = model::init_store(&shapes, seed);
        let batch = make_batch(&[(src, tgt)]);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model::forward_training(
            &mut g,
            &store,
            gene,
            cfg,
            &batch.src,
            &batch.tgt_in,
            ForwardOpts::training(),
            &mut rng,
        )
        .unwrap();
        let s = batch.src[0].len();
        let u = batch.tgt_in[0].len();
        (out, s as u64, u as u64)
    }

    #[test]
    fn teacher_forced_formula_matches_the_instrumented_counter() {
        let space = SearchSpace::toy();
        let cfg = ModelConfig::new(24, 32);
        for seed in 0..8u64 {
            let gene = sample_gene(&space, &mut ChaCha8Rng::seed_from_u64(seed));
            let src = vec![5, 6, 7, 8, 9, 10];
            let tgt = vec![11, 12, 13];
            let (out, s, u) = forward_once(&gene, &cfg, src, tgt, seed);
            let (body, vocab) =
                count_flops_teacher_forced(&gene, s as usize, u as usize, cfg.vocab, &out.trace)
                    .unwrap();
            assert_eq!(body, out.body_flops, "body flops diverged for seed {seed}");
            assert_eq!(vocab, out.vocab_flops, "vocab flops diverged for seed {seed}");
        }
        // The space's largest member too.
        let gene = max_gene(&space);
        let (out, s, u) = forward_once(&gene, &cfg, vec![4, 5, 6, 7], vec![8, 9], 99);
        let (body, vocab) =
            count_flops_teacher_forced(&gene, s as usize, u as usize, cfg.vocab, &out.trace).unwrap();
        assert_eq!((body, vocab), (out.body_flops, out.vocab_flops));
    }

    #[test]
    fn teacher_forced_formula_covers_identity_experts() {
        let mut gene = max_gene(&SearchSpace::toy());
        gene.enc_experts[0] = 2;
        gene.enc_expert_ffn_dims[0] = vec![64, 0]; // expert 1 is a passthrough
        let cfg = ModelConfig::new(20, 32);
        let (out, s, u) = forward_once(&gene, &cfg, vec![4, 5, 6, 7, 8], vec![9, 10, 11], 5);
        let (body, vocab) =
            count_flops_teacher_forced(&gene, s as usize, u as usize, cfg.vocab, &out.trace).unwrap();
        assert_eq!((body, vocab), (out.body_flops, out.vocab_flops));
    }

    #[test]
    fn teacher_forced_rejects_inconsistent_traces() {
        let gene = max_gene(&SearchSpace::toy());
        let cfg = ModelConfig::new(20, 32);
        let (out, s, u) = forward_once(&gene, &cfg, vec![4, 5, 6], vec![7, 8], 1);
        let (s, u) = (s as usize, u as usize);
        // Wrong token count.
        assert!(count_flops_teacher_forced(&gene, s + 1, u, cfg.vocab, &out.trace).is_err());
        // Missing layer.
        let mut chopped = out.trace;
        chopped.layers.pop();
        assert!(count_flops_teacher_forced(&gene, s, u, cfg.vocab, &chopped).is_err());
    }

    #[test]
    fn reference_architectures_have_frozen_costs_and_ratio() {
        let moe = count_flops(&std_expert_gene(), 30, 30, 32000);
        assert_eq!(moe.encoder, 1_458_432_000.0);
        assert_eq!(moe.decoder, 1_269_596_160.0);
        assert_eq!(moe.headline(), 2_728_028_160.0);

        let big = count_flops(&dense_big_gene(), 30, 30, 32000);
        assert_eq!(big.headline(), 10_626_048_000.0);

        // The dense big model costs about 3.7x the searched expert model;
        // the accepted window is +/-15% around that.
        let ratio = big.headline() / moe.headline();
        assert!((3.145..=4.255).contains(&ratio), "ratio {ratio}");
        assert!((ratio - 3.8951386777473735).abs() < 1e-12);
    }

    #[test]
    fn reference_architecture_has_frozen_param_counts() {
        let c = count_params(&std_expert_gene());
        assert_eq!(c.total, 59_831_808);
        assert!((c.active_mean - 45_151_744.0).abs() < 1e-6);
        // Every layer's experts share one width here, so worst == mean.
        assert_eq!(c.active_worst, 45_151_744);
        let sp = sparsity_pct(&c);
        assert!((sp - 24.535551390992563).abs() < 1e-9, "sparsity {sp}");
    }

    #[test]
    fn params_match_the_instantiated_store_manifest() {
        let mut genes =
            vec![std_expert_gene(), dense_big_gene(), max_gene(&SearchSpace::toy())];
        for seed in 0..5u64 {
            genes.push(sample_gene(&SearchSpace::toy(), &mut ChaCha8Rng::seed_from_u64(seed)));
        }
        for gene in genes {
            let (vocab, positions) = (50, 64);
            let shapes = model::param_shapes(&gene, vocab, positions);
            let body: u64 = shapes
                .iter()
                .filter(|(name, _, _)| !model::is_reporting_excluded(name))
                .map(|(_, r, c)| (r * c) as u64)
                .sum();
            let everything: u64 = shapes.iter().map(|(_, r, c)| (r * c) as u64).sum();
            assert_eq!(count_params(&gene).total, body, "body params vs manifest");
            assert_eq!(
                count_params_including_embeddings(&gene, vocab, positions).total,
                everything,
                "full params vs manifest"
            );
        }
    }

    #[test]
    fn active_counts_follow_expert_structure() {
        let mut gene = max_gene(&SearchSpace::toy());
        gene.enc_experts[0] = 2;
        gene.enc_expert_ffn_dims[0] = vec![128, 64];
        let c = count_params(&gene);
        assert!(c.active_mean < c.total as f64, "routing must save something");
        assert!((c.active_worst as f64) > c.active_mean, "mixed widths: worst > mean");
        assert!(sparsity_pct(&c) > 0.0);

        // Identity expert: zero parameters, halves the mean FFN width.
        let mut with_id = gene.clone();
        with_id.enc_expert_ffn_dims[0] = vec![128, 0];
        let ci = count_params(&with_id);
        assert!(ci.total < c.total);
        assert_eq!(ci.active_worst, c.active_worst, "worst expert unchanged");

        // One-expert genes have zero expert sparsity (router params remain).
        let mut dense = max_gene(&SearchSpace::toy());
        dense.enc_experts = vec![1; dense.num_enc_layers];
        dense.dec_experts = vec![1; dense.num_dec_layers];
        dense.enc_expert_ffn_dims = vec![vec![128]; dense.num_enc_layers];
        dense.dec_expert_ffn_dims = vec![vec![128]; dense.num_dec_layers];
        let cd = count_params(&dense);
        assert!((cd.active_mean - cd.total as f64).abs() < 1e-9);
        assert_eq!(sparsity_pct(&cd), 0.0);
    }

    #[test]
    fn flops_grow_with_length_depth_and_experts() {
        let gene = std_expert_gene();
        let base = count_flops(&gene, 30, 30, 32000).headline();
        assert!(count_flops(&gene, 31, 30, 32000).headline() > base);
        assert!(count_flops(&gene, 30, 31, 32000).headline() > base);

        let mut deeper = gene.clone();
        deeper.num_dec_layers += 1;
        deeper.dec_self_heads.push(8);
        deeper.dec_cross_heads.push(8);
        deeper.dec_arbitrary_attn.push(-1);
        deeper.dec_experts.push(1);
        deeper.dec_expert_ffn_dims.push(vec![3072]);
        assert!(count_flops(&deeper, 30, 30, 32000).headline() > base);

        // Adding an expert raises the router term but can lower the mean
        // width; with an equal-width expert the headline strictly grows.
        let mut wider = gene.clone();
        wider.enc_experts[1] = 2;
        wider.enc_expert_ffn_dims[1] = vec![3072, 3072];
        assert!(count_flops(&wider, 30, 30, 32000).headline() > base);
        assert!(count_params(&wider).total > count_params(&gene).total);
    }

    #[test]
    fn encoder_flops_add_per_layer() {
        // A two-layer encoder costs exactly the sum of its one-layer parts.
        let mk = |experts: Vec<Vec<usize>>| {
            let n = experts.len();
            Gene {
                embed_dim_enc: 64,
                embed_dim_dec: 64,
                qkv_dim: 64,
                num_enc_layers: n,
                num_dec_layers: 1,
                enc_heads: vec![4; n],
                dec_self_heads: vec![4],
                dec_cross_heads: vec![4],
                dec_arbitrary_attn: vec![-1],
                enc_experts: experts.iter().map(Vec::len).collect(),
                dec_experts: vec![1],
                enc_expert_ffn_dims: experts,
                dec_expert_ffn_dims: vec![vec![128]],
            }
        };
        let both = mk(vec![vec![128, 256], vec![64]]);
        let first = mk(vec![vec![128, 256]]);
        let second = mk(vec![vec![64]]);
        let f = |g: &Gene| count_flops(g, 13, 7, 40).encoder;
        assert_eq!(f(&both), f(&first) + f(&second));
    }

    #[test]
    fn other_bucket_is_positive_and_small() {
        let f = count_flops(&std_expert_gene(), 30, 30, 32000);
        assert!(f.other > 0.0);
        assert!(f.other < 0.02 * f.headline(), "first-order terms stay far below matmuls");
        assert!(f.with_vocab() > f.headline());
    }

    #[test]
    fn cost_report_serializes_to_toml() {
        let report = cost_report(&std_expert_gene(), 30, 30, 32000);
        let text = report_toml(&report);
        let back: toml::Table = text.parse().unwrap();
        assert_eq!(back["params_total"].as_integer(), Some(59_831_808));
        assert_eq!(back["src_len"].as_integer(), Some(30));
        assert_eq!(back["flops_headline"].as_float(), Some(2_728_028_160.0));
        assert!(back["gene_hash"].as_str().unwrap().len() >= 16);
        assert!((back["sparsity_pct"].as_float().unwrap() - 24.5355).abs() < 1e-3);
    }
}
