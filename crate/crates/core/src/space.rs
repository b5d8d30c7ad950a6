//! Heterogeneous MoE search space and the gene encoding of one architecture.
//!
//! A [`SearchSpace`] is the menu of legal choices per dimension; a [`Gene`] is
//! one concrete architecture drawn from it. Genes serialize to a key-value
//! text document (TOML) with explicit per-layer arrays; hyphen-separated
//! strings such as `"5-1-1-1-2-1"` are accepted on input as a convenience and
//! normalized to arrays.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Menu of legal choices per searchable dimension.
///
/// Every choice list must be non-empty, sorted ascending and duplicate-free.
/// `ffn_dim_choices` may contain 0 only when `identity_experts_enabled`; a
/// width-0 expert applies no FFN and passes the token through scaled by its
/// gate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub embed_dim_choices: Vec<usize>,
    pub encoder_layer_choices: Vec<usize>,
    pub decoder_layer_choices: Vec<usize>,
    pub qkv_dim_choices: Vec<usize>,
    pub head_choices: Vec<usize>,
    /// Per decoder layer: -1 = attend only to the last encoder layer,
    /// k >= 1 = attend to the elementwise mean of the last k encoder layers.
    pub arbitrary_attn_choices: Vec<i32>,
    /// Candidate FFN intermediate widths, per layer and per expert.
    pub ffn_dim_choices: Vec<usize>,
    pub max_experts_per_layer: usize,
    pub identity_experts_enabled: bool,
}

/// One concrete architecture. Per-layer lists have exactly
/// `num_enc_layers` / `num_dec_layers` entries; `*_expert_ffn_dims[l][j]` is
/// the FFN intermediate width of expert `j` in layer `l`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Gene {
    pub embed_dim_enc: usize,
    pub embed_dim_dec: usize,
    pub qkv_dim: usize,
    pub num_enc_layers: usize,
    pub num_dec_layers: usize,
    pub enc_heads: Vec<usize>,
    pub dec_self_heads: Vec<usize>,
    pub dec_cross_heads: Vec<usize>,
    pub dec_arbitrary_attn: Vec<i32>,
    pub enc_experts: Vec<usize>,
    pub dec_experts: Vec<usize>,
    pub enc_expert_ffn_dims: Vec<Vec<usize>>,
    pub dec_expert_ffn_dims: Vec<Vec<usize>>,
}

/// Decode failure for gene/space/config text documents.
#[derive(thiserror::Error, Debug)]
pub enum ParseError {
    /// Malformed document syntax; `offset` is the 1-based byte offset.
    #[error("parse error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    /// Well-formed document with an out-of-domain or missing value.
    #[error("invalid value: {message}")]
    Value { message: String },
}

/// Number of trailing encoder layers a decoder layer attends to.
pub fn attention_span(k: i32) -> usize {
    if k == -1 {
        1
    } else {
        k as usize
    }
}

impl SearchSpace {
    /// Reference translation space: embed {512, 640}, 6 encoder layers,
    /// decoder depth 1..6, qkv 512, heads {4, 8}, attention span {-1, 1, 2},
    /// FFN widths {1024, 2048, 3072}, up to `max_experts` experts per layer.
    pub fn translation(max_experts: usize) -> SearchSpace {
        SearchSpace {
            embed_dim_choices: vec![512, 640],
            encoder_layer_choices: vec![6],
            decoder_layer_choices: vec![1, 2, 3, 4, 5, 6],
            qkv_dim_choices: vec![512],
            head_choices: vec![4, 8],
            arbitrary_attn_choices: vec![-1, 1, 2],
            ffn_dim_choices: vec![1024, 2048, 3072],
            max_experts_per_layer: max_experts,
            identity_experts_enabled: false,
        }
    }

    /// Small space for synthetic tasks and fast end-to-end runs.
    pub fn toy() -> SearchSpace {
        SearchSpace {
            embed_dim_choices: vec![32, 64],
            encoder_layer_choices: vec![2],
            decoder_layer_choices: vec![1, 2],
            qkv_dim_choices: vec![32],
            head_choices: vec![2, 4],
            arbitrary_attn_choices: vec![-1, 1, 2],
            ffn_dim_choices: vec![32, 64, 128],
            max_experts_per_layer: 2,
            identity_experts_enabled: false,
        }
    }

    /// Structural violations of the space itself (empty = valid).
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let lists: [(&str, &[usize]); 6] = [
            ("embed_dim_choices", &self.embed_dim_choices),
            ("encoder_layer_choices", &self.encoder_layer_choices),
            ("decoder_layer_choices", &self.decoder_layer_choices),
            ("qkv_dim_choices", &self.qkv_dim_choices),
            ("head_choices", &self.head_choices),
            ("ffn_dim_choices", &self.ffn_dim_choices),
        ];
        for (name, list) in lists {
            check_choice_list(&mut v, name, list);
            if name != "ffn_dim_choices" {
                if let Some(&0) = list.iter().find(|&&x| x == 0) {
                    v.push(format!("{name} contains 0"));
                }
            }
        }
        if self.arbitrary_attn_choices.is_empty() {
            v.push("arbitrary_attn_choices is empty".into());
        }
        if !self.arbitrary_attn_choices.windows(2).all(|w| w[0] < w[1]) {
            v.push("arbitrary_attn_choices not sorted ascending / duplicate-free".into());
        }
        for &k in &self.arbitrary_attn_choices {
            if k != -1 && k < 1 {
                v.push(format!("arbitrary_attn_choices contains {k}; must be -1 or >= 1"));
            }
        }
        // Every k >= 1 must be realizable at the smallest encoder depth, so
        // uniform sampling never produces an unattainable span.
        if let Some(&min_enc) = self.encoder_layer_choices.first() {
            for &k in &self.arbitrary_attn_choices {
                if k > min_enc as i32 {
                    v.push(format!(
                        "arbitrary attention span {k} exceeds the minimum encoder depth {min_enc}"
                    ));
                }
            }
        }
        for &h in &self.head_choices {
            if h == 0 {
                continue;
            }
            for &d in &self.embed_dim_choices {
                if d % h != 0 {
                    v.push(format!("embed_dim {d} not divisible by head count {h}"));
                }
            }
            for &q in &self.qkv_dim_choices {
                if q % h != 0 {
                    v.push(format!("qkv_dim {q} not divisible by head count {h}"));
                }
            }
        }
        if self.max_experts_per_layer < 1 {
            v.push("max_experts_per_layer must be >= 1".into());
        }
        if !self.identity_experts_enabled && self.ffn_dim_choices.contains(&0) {
            v.push("ffn_dim_choices contains 0 but identity experts are disabled".into());
        }
        v
    }

    /// Stable content hash (hex) of the canonical text encoding.
    pub fn hash_hex(&self) -> String {
        let text = toml::to_string(self).expect("search space serializes");
        hex_digest(text.as_bytes())
    }
}

fn check_choice_list(v: &mut Vec<String>, name: &str, list: &[usize]) {
    if list.is_empty() {
        v.push(format!("{name} is empty"));
    }
    if !list.windows(2).all(|w| w[0] < w[1]) {
        v.push(format!("{name} not sorted ascending / duplicate-free"));
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn pick<T: Copy>(rng: &mut impl Rng, choices: &[T]) -> T {
    choices[rng.random_range(0..choices.len())]
}

/// Draws one gene uniformly and independently per dimension. Deterministic
/// for a fixed random source state.
pub fn sample_gene(space: &SearchSpace, rng: &mut impl Rng) -> Gene {
    let embed_dim_enc = pick(rng, &space.embed_dim_choices);
    let embed_dim_dec = pick(rng, &space.embed_dim_choices);
    let qkv_dim = pick(rng, &space.qkv_dim_choices);
    let num_enc_layers = pick(rng, &space.encoder_layer_choices);
    let num_dec_layers = pick(rng, &space.decoder_layer_choices);
    let m = space.max_experts_per_layer;

    let mut enc_heads = Vec::with_capacity(num_enc_layers);
    let mut enc_experts = Vec::with_capacity(num_enc_layers);
    let mut enc_expert_ffn_dims = Vec::with_capacity(num_enc_layers);
    for _ in 0..num_enc_layers {
        enc_heads.push(pick(rng, &space.head_choices));
        let e = rng.random_range(1..=m);
        enc_experts.push(e);
        enc_expert_ffn_dims.push((0..e).map(|_| pick(rng, &space.ffn_dim_choices)).collect());
    }

    let mut dec_self_heads = Vec::with_capacity(num_dec_layers);
    let mut dec_cross_heads = Vec::with_capacity(num_dec_layers);
    let mut dec_arbitrary_attn = Vec::with_capacity(num_dec_layers);
    let mut dec_experts = Vec::with_capacity(num_dec_layers);
    let mut dec_expert_ffn_dims = Vec::with_capacity(num_dec_layers);
    for _ in 0..num_dec_layers {
        dec_self_heads.push(pick(rng, &space.head_choices));
        dec_cross_heads.push(pick(rng, &space.head_choices));
        dec_arbitrary_attn.push(pick(rng, &space.arbitrary_attn_choices));
        let e = rng.random_range(1..=m);
        dec_experts.push(e);
        dec_expert_ffn_dims.push((0..e).map(|_| pick(rng, &space.ffn_dim_choices)).collect());
    }

    Gene {
        embed_dim_enc,
        embed_dim_dec,
        qkv_dim,
        num_enc_layers,
        num_dec_layers,
        enc_heads,
        dec_self_heads,
        dec_cross_heads,
        dec_arbitrary_attn,
        enc_experts,
        dec_experts,
        enc_expert_ffn_dims,
        dec_expert_ffn_dims,
    }
}

/// Gene taking the maximum of every choice list, with `max_experts_per_layer`
/// experts of maximal width in every layer.
pub fn max_gene(space: &SearchSpace) -> Gene {
    let embed = *space.embed_dim_choices.last().unwrap();
    let qkv = *space.qkv_dim_choices.last().unwrap();
    let enc_l = *space.encoder_layer_choices.last().unwrap();
    let dec_l = *space.decoder_layer_choices.last().unwrap();
    let heads = *space.head_choices.last().unwrap();
    let attn = *space.arbitrary_attn_choices.last().unwrap();
    let ffn = *space.ffn_dim_choices.last().unwrap();
    let m = space.max_experts_per_layer;
    Gene {
        embed_dim_enc: embed,
        embed_dim_dec: embed,
        qkv_dim: qkv,
        num_enc_layers: enc_l,
        num_dec_layers: dec_l,
        enc_heads: vec![heads; enc_l],
        dec_self_heads: vec![heads; dec_l],
        dec_cross_heads: vec![heads; dec_l],
        dec_arbitrary_attn: vec![attn; dec_l],
        enc_experts: vec![m; enc_l],
        dec_experts: vec![m; dec_l],
        enc_expert_ffn_dims: vec![vec![ffn; m]; enc_l],
        dec_expert_ffn_dims: vec![vec![ffn; m]; dec_l],
    }
}

/// Violation descriptions for `gene` against `space` (empty = valid).
pub fn validate_gene(space: &SearchSpace, gene: &Gene) -> Vec<String> {
    let mut v = Vec::new();
    let member = |v: &mut Vec<String>, name: &str, val: usize, choices: &[usize]| {
        if !choices.contains(&val) {
            v.push(format!("{name} = {val} not in choices {choices:?}"));
        }
    };
    member(&mut v, "embed_dim_enc", gene.embed_dim_enc, &space.embed_dim_choices);
    member(&mut v, "embed_dim_dec", gene.embed_dim_dec, &space.embed_dim_choices);
    member(&mut v, "qkv_dim", gene.qkv_dim, &space.qkv_dim_choices);
    member(&mut v, "num_enc_layers", gene.num_enc_layers, &space.encoder_layer_choices);
    member(&mut v, "num_dec_layers", gene.num_dec_layers, &space.decoder_layer_choices);

    let len_check = |v: &mut Vec<String>, name: &str, got: usize, want: usize| {
        if got != want {
            v.push(format!("{name} has {got} entries, expected {want}"));
        }
    };
    len_check(&mut v, "enc_heads", gene.enc_heads.len(), gene.num_enc_layers);
    len_check(&mut v, "enc_experts", gene.enc_experts.len(), gene.num_enc_layers);
    len_check(&mut v, "enc_expert_ffn_dims", gene.enc_expert_ffn_dims.len(), gene.num_enc_layers);
    len_check(&mut v, "dec_self_heads", gene.dec_self_heads.len(), gene.num_dec_layers);
    len_check(&mut v, "dec_cross_heads", gene.dec_cross_heads.len(), gene.num_dec_layers);
    len_check(&mut v, "dec_arbitrary_attn", gene.dec_arbitrary_attn.len(), gene.num_dec_layers);
    len_check(&mut v, "dec_experts", gene.dec_experts.len(), gene.num_dec_layers);
    len_check(&mut v, "dec_expert_ffn_dims", gene.dec_expert_ffn_dims.len(), gene.num_dec_layers);

    for (l, &h) in gene.enc_heads.iter().enumerate() {
        if !space.head_choices.contains(&h) {
            v.push(format!("enc_heads[{l}] = {h} not in head_choices"));
        }
    }
    for (l, &h) in gene.dec_self_heads.iter().enumerate() {
        if !space.head_choices.contains(&h) {
            v.push(format!("dec_self_heads[{l}] = {h} not in head_choices"));
        }
    }
    for (l, &h) in gene.dec_cross_heads.iter().enumerate() {
        if !space.head_choices.contains(&h) {
            v.push(format!("dec_cross_heads[{l}] = {h} not in head_choices"));
        }
    }
    for (l, &k) in gene.dec_arbitrary_attn.iter().enumerate() {
        if !space.arbitrary_attn_choices.contains(&k) {
            v.push(format!("dec_arbitrary_attn[{l}] = {k} not in arbitrary_attn_choices"));
        } else if k != -1 && k as usize > gene.num_enc_layers {
            v.push(format!(
                "dec_arbitrary_attn[{l}] = {k} exceeds num_enc_layers = {}",
                gene.num_enc_layers
            ));
        }
    }

    let m = space.max_experts_per_layer;
    let expert_checks = |prefix: &str,
                             v: &mut Vec<String>,
                             experts: &[usize],
                             widths: &[Vec<usize>]| {
        for (l, &e) in experts.iter().enumerate() {
            if e < 1 || e > m {
                v.push(format!("{prefix}_experts[{l}] = {e} out of range [1, {m}]"));
            }
        }
        for (l, ws) in widths.iter().enumerate() {
            if let Some(&e) = experts.get(l) {
                if ws.len() != e {
                    v.push(format!(
                        "{prefix}_expert_ffn_dims[{l}] has {} widths but {prefix}_experts[{l}] = {e}",
                        ws.len()
                    ));
                }
            }
            for (j, &w) in ws.iter().enumerate() {
                if !space.ffn_dim_choices.contains(&w) {
                    v.push(format!("{prefix}_expert_ffn_dims[{l}][{j}] = {w} not in ffn_dim_choices"));
                }
            }
        }
    };
    expert_checks("enc", &mut v, &gene.enc_experts, &gene.enc_expert_ffn_dims);
    expert_checks("dec", &mut v, &gene.dec_experts, &gene.dec_expert_ffn_dims);
    v
}

impl Gene {
    /// Stable content hash (hex) of the canonical text encoding.
    pub fn hash_hex(&self) -> String {
        hex_digest(encode_gene(self).as_bytes())
    }

    /// Short prefix of [`Gene::hash_hex`], for log lines and filenames.
    pub fn short_hash(&self) -> String {
        self.hash_hex()[..12].to_string()
    }
}

/// Canonical text encoding (stable field names and order).
pub fn encode_gene(gene: &Gene) -> String {
    toml::to_string(gene).expect("gene serializes")
}

/// Parses the structured text form, accepting hyphen-string conveniences.
pub fn decode_gene(text: &str) -> Result<Gene, ParseError> {
    let doc: GeneDoc = toml::from_str(text).map_err(toml_error)?;
    doc.into_gene()
}

/// Parses a search-space document.
pub fn decode_space(text: &str) -> Result<SearchSpace, ParseError> {
    toml::from_str(text).map_err(toml_error)
}

/// Canonical text encoding of a search space.
pub fn encode_space(space: &SearchSpace) -> String {
    toml::to_string(space).expect("search space serializes")
}

fn toml_error(e: toml::de::Error) -> ParseError {
    match e.span() {
        Some(span) => ParseError::Syntax {
            offset: span.start + 1,
            message: e.message().to_string(),
        },
        None => ParseError::Value { message: e.message().to_string() },
    }
}

// ---------------------------------------------------------------------------
// Flexible decode: arrays are canonical, hyphen strings are accepted.
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct GeneDoc {
    embed_dim_enc: usize,
    embed_dim_dec: usize,
    qkv_dim: usize,
    num_enc_layers: usize,
    num_dec_layers: usize,
    enc_heads: IntList,
    dec_self_heads: IntList,
    dec_cross_heads: IntList,
    dec_arbitrary_attn: Vec<i32>,
    enc_experts: IntList,
    dec_experts: IntList,
    enc_expert_ffn_dims: NestedList,
    dec_expert_ffn_dims: NestedList,
}

impl GeneDoc {
    fn into_gene(self) -> Result<Gene, ParseError> {
        Ok(Gene {
            embed_dim_enc: self.embed_dim_enc,
            embed_dim_dec: self.embed_dim_dec,
            qkv_dim: self.qkv_dim,
            num_enc_layers: self.num_enc_layers,
            num_dec_layers: self.num_dec_layers,
            enc_heads: self.enc_heads.0,
            dec_self_heads: self.dec_self_heads.0,
            dec_cross_heads: self.dec_cross_heads.0,
            dec_arbitrary_attn: self.dec_arbitrary_attn,
            enc_experts: self.enc_experts.0,
            dec_experts: self.dec_experts.0,
            enc_expert_ffn_dims: self.enc_expert_ffn_dims.0,
            dec_expert_ffn_dims: self.dec_expert_ffn_dims.0,
        })
    }
}

/// List of non-negative ints: `[5, 1, 2]` or `"5-1-2"`.
struct IntList(Vec<usize>);

impl<'de> Deserialize<'de> for IntList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = IntList;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an array of non-negative ints or a hyphen-separated string")
            }
            fn visit_str<E: serde::de::Error>(self, s: &str) -> Result<IntList, E> {
                parse_hyphen_ints(s).map(IntList).map_err(E::custom)
            }
            fn visit_seq<A: serde::de::SeqAccess<'de>>(self, mut a: A) -> Result<IntList, A::Error> {
                let mut out = Vec::new();
                while let Some(x) = a.next_element::<usize>()? {
                    out.push(x);
                }
                Ok(IntList(out))
            }
        }
        d.deserialize_any(V)
    }
}

/// List of per-expert width lists: `[[3072, 1024], [2048]]` or the string
/// form `"[3072-1024]-2048"` where a bare int is a single-expert layer.
struct NestedList(Vec<Vec<usize>>);

impl<'de> Deserialize<'de> for NestedList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = NestedList;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an array of int arrays or a bracketed hyphen string")
            }
            fn visit_str<E: serde::de::Error>(self, s: &str) -> Result<NestedList, E> {
                parse_bracket_groups(s).map(NestedList).map_err(E::custom)
            }
            fn visit_seq<A: serde::de::SeqAccess<'de>>(
                self,
                mut a: A,
            ) -> Result<NestedList, A::Error> {
                let mut out = Vec::new();
                while let Some(x) = a.next_element::<IntList>()? {
                    out.push(x.0);
                }
                Ok(NestedList(out))
            }
        }
        d.deserialize_any(V)
    }
}

fn parse_hyphen_ints(s: &str) -> Result<Vec<usize>, String> {
    s.split('-')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad int segment {part:?} in {s:?}"))
        })
        .collect()
}

/// Splits on '-' at bracket depth 0; `[a-b-c]` groups become one layer.
fn parse_bracket_groups(s: &str) -> Result<Vec<Vec<usize>>, String> {
    let mut groups = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let bytes = s.as_bytes();
    let mut cuts = Vec::new();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' => depth += 1,
            b']' => depth = depth.checked_sub(1).ok_or("unbalanced ']'")?,
            b'-' if depth == 0 => cuts.push(i),
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced '['".into());
    }
    cuts.push(s.len());
    for cut in cuts {
        let part = s[start..cut].trim();
        start = cut + 1;
        if part.is_empty() {
            return Err(format!("empty segment in {s:?}"));
        }
        if let Some(inner) = part.strip_prefix('[').and_then(|p| p.strip_suffix(']')) {
            groups.push(parse_hyphen_ints(inner)?);
        } else {
            groups.push(vec![part
                .parse::<usize>()
                .map_err(|_| format!("bad int segment {part:?} in {s:?}"))?]);
        }
    }
    Ok(groups)
}
