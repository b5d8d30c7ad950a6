//! Evolutionary architecture search over a gene space.
//!
//! Plain generational loop: seed a feasible population by rejection
//! sampling, then each iteration keeps the best genes as parents and refills
//! the population with per-position mutations of random members and uniform
//! crossovers of random pairs, admitting only candidates that pass the
//! constraint filter. Fitness is "lower is better" (typically supernet
//! validation loss), supplied as a closure so search stays decoupled from
//! how candidates are scored. Parents carry over unchanged, so the best
//! fitness never regresses.
//!
//! Structural repair keeps mutants well-formed: a depth change keeps the
//! front layers and samples fresh tail layers; an expert-count change
//! resamples that layer's whole width list. Crossover treats each layer's
//! expert count + width list as one block, so mixed genes never end up with
//! mismatched lists.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::jsonl::JsonlWriter;
use crate::space::{sample_gene, validate_gene, Gene, SearchSpace};
use crate::tensor::{Result, TensorError};

#[derive(Clone, Debug, Serialize)]
pub struct EvoConfig {
    pub iterations: usize,
    pub population: usize,
    /// Top genes kept verbatim each iteration.
    pub parents: usize,
    /// Mutants admitted per iteration.
    pub mutations: usize,
    /// Chance that any one genome position resamples during mutation.
    pub mutation_prob: f64,
    /// Crossover children admitted per iteration.
    pub crossovers: usize,
    pub seed: u64,
    /// Rejection-sampling budget: this many attempts per requested gene
    /// before seeding reports the constraint infeasible.
    pub cap_factor: usize,
}

impl Default for EvoConfig {
    /// The search settings used throughout: 15 iterations, population 125 =
    /// 25 parents + 50 mutants + 50 crossovers, position mutation 0.3.
    fn default() -> EvoConfig {
        EvoConfig {
            iterations: 15,
            population: 125,
            parents: 25,
            mutations: 50,
            mutation_prob: 0.3,
            crossovers: 50,
            seed: 0,
            cap_factor: 50,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.parents == 0 {
            return Err(TensorError::Invalid("population and parents must be positive".into()));
        }
        if self.parents > self.population {
            return Err(TensorError::Invalid(format!(
                "parents {} exceed population {}",
                self.parents, self.population
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(TensorError::Invalid("mutation probability must be in [0, 1]".into()));
        }
        if self.cap_factor == 0 {
            return Err(TensorError::Invalid("cap factor must be positive".into()));
        }
        Ok(())
    }
}

fn pick<T: Copy>(rng: &mut impl Rng, choices: &[T]) -> T {
    choices[rng.random_range(0..choices.len())]
}

/// Rolls the per-position coin; on a hit resamples from `choices` (which
/// may return the same value — a position with k choices actually changes
/// with probability `prob · (1 − 1/k)`).
fn maybe<T: Copy>(rng: &mut impl Rng, prob: f64, current: T, choices: &[T]) -> T {
    if rng.random::<f64>() < prob {
        pick(rng, choices)
    } else {
        current
    }
}

fn sample_expert_block(space: &SearchSpace, rng: &mut impl Rng) -> (usize, Vec<usize>) {
    let e = rng.random_range(1..=space.max_experts_per_layer);
    (e, (0..e).map(|_| pick(rng, &space.ffn_dim_choices)).collect())
}

fn sample_enc_layer(space: &SearchSpace, rng: &mut impl Rng) -> (usize, usize, Vec<usize>) {
    let heads = pick(rng, &space.head_choices);
    let (e, w) = sample_expert_block(space, rng);
    (heads, e, w)
}

#[allow(clippy::type_complexity)]
fn sample_dec_layer(
    space: &SearchSpace,
    rng: &mut impl Rng,
) -> (usize, usize, i32, usize, Vec<usize>) {
    let sh = pick(rng, &space.head_choices);
    let ch = pick(rng, &space.head_choices);
    let arb = pick(rng, &space.arbitrary_attn_choices);
    let (e, w) = sample_expert_block(space, rng);
    (sh, ch, arb, e, w)
}

/// Per-position mutation with structural repair. Every scalar position in
/// the genome (dims, depths, per-layer heads, per-layer expert count, each
/// expert width slot) independently resamples with `prob`.
pub fn mutate(space: &SearchSpace, gene: &Gene, prob: f64, rng: &mut impl Rng) -> Gene {
    let mut g = gene.clone();

    // Depths first: they decide how many per-layer positions exist.
    let new_enc = maybe(rng, prob, g.num_enc_layers, &space.encoder_layer_choices);
    if new_enc != g.num_enc_layers {
        g.enc_heads.truncate(new_enc);
        g.enc_experts.truncate(new_enc);
        g.enc_expert_ffn_dims.truncate(new_enc);
        while g.enc_heads.len() < new_enc {
            let (h, e, w) = sample_enc_layer(space, rng);
            g.enc_heads.push(h);
            g.enc_experts.push(e);
            g.enc_expert_ffn_dims.push(w);
        }
        g.num_enc_layers = new_enc;
    }
    let new_dec = maybe(rng, prob, g.num_dec_layers, &space.decoder_layer_choices);
    if new_dec != g.num_dec_layers {
        g.dec_self_heads.truncate(new_dec);
        g.dec_cross_heads.truncate(new_dec);
        g.dec_arbitrary_attn.truncate(new_dec);
        g.dec_experts.truncate(new_dec);
        g.dec_expert_ffn_dims.truncate(new_dec);
        while g.dec_self_heads.len() < new_dec {
            let (sh, ch, arb, e, w) = sample_dec_layer(space, rng);
            g.dec_self_heads.push(sh);
            g.dec_cross_heads.push(ch);
            g.dec_arbitrary_attn.push(arb);
            g.dec_experts.push(e);
            g.dec_expert_ffn_dims.push(w);
        }
        g.num_dec_layers = new_dec;
    }

    g.embed_dim_enc = maybe(rng, prob, g.embed_dim_enc, &space.embed_dim_choices);
    g.embed_dim_dec = maybe(rng, prob, g.embed_dim_dec, &space.embed_dim_choices);
    g.qkv_dim = maybe(rng, prob, g.qkv_dim, &space.qkv_dim_choices);

    for i in 0..g.num_enc_layers {
        g.enc_heads[i] = maybe(rng, prob, g.enc_heads[i], &space.head_choices);
        let e = if rng.random::<f64>() < prob {
            rng.random_range(1..=space.max_experts_per_layer)
        } else {
            g.enc_experts[i]
        };
        if e != g.enc_experts[i] {
            // Expert-count change: the width list is resampled wholesale.
            g.enc_experts[i] = e;
            g.enc_expert_ffn_dims[i] =
                (0..e).map(|_| pick(rng, &space.ffn_dim_choices)).collect();
        } else {
            for w in g.enc_expert_ffn_dims[i].iter_mut() {
                *w = maybe(rng, prob, *w, &space.ffn_dim_choices);
            }
        }
    }
    for i in 0..g.num_dec_layers {
        g.dec_self_heads[i] = maybe(rng, prob, g.dec_self_heads[i], &space.head_choices);
        g.dec_cross_heads[i] = maybe(rng, prob, g.dec_cross_heads[i], &space.head_choices);
        g.dec_arbitrary_attn[i] =
            maybe(rng, prob, g.dec_arbitrary_attn[i], &space.arbitrary_attn_choices);
        let e = if rng.random::<f64>() < prob {
            rng.random_range(1..=space.max_experts_per_layer)
        } else {
            g.dec_experts[i]
        };
        if e != g.dec_experts[i] {
            g.dec_experts[i] = e;
            g.dec_expert_ffn_dims[i] =
                (0..e).map(|_| pick(rng, &space.ffn_dim_choices)).collect();
        } else {
            for w in g.dec_expert_ffn_dims[i].iter_mut() {
                *w = maybe(rng, prob, *w, &space.ffn_dim_choices);
            }
        }
    }
    g
}

fn coin(rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < 0.5
}

/// Uniform crossover: every position comes from one parent or the other.
/// Depths pick a donor; a layer present in both parents mixes per position,
/// with each layer's expert count + width list moving as one block; a layer
/// only one parent has is copied from that parent.
pub fn crossover(a: &Gene, b: &Gene, rng: &mut impl Rng) -> Gene {
    let num_enc = if coin(rng) { a.num_enc_layers } else { b.num_enc_layers };
    let num_dec = if coin(rng) { a.num_dec_layers } else { b.num_dec_layers };

    let mut g = Gene {
        embed_dim_enc: if coin(rng) { a.embed_dim_enc } else { b.embed_dim_enc },
        embed_dim_dec: if coin(rng) { a.embed_dim_dec } else { b.embed_dim_dec },
        qkv_dim: if coin(rng) { a.qkv_dim } else { b.qkv_dim },
        num_enc_layers: num_enc,
        num_dec_layers: num_dec,
        enc_heads: Vec::with_capacity(num_enc),
        dec_self_heads: Vec::with_capacity(num_dec),
        dec_cross_heads: Vec::with_capacity(num_dec),
        dec_arbitrary_attn: Vec::with_capacity(num_dec),
        enc_experts: Vec::with_capacity(num_enc),
        dec_experts: Vec::with_capacity(num_dec),
        enc_expert_ffn_dims: Vec::with_capacity(num_enc),
        dec_expert_ffn_dims: Vec::with_capacity(num_dec),
    };

    for i in 0..num_enc {
        let donor = |rng: &mut ChaCha8Rng| -> &Gene {
            match (i < a.num_enc_layers, i < b.num_enc_layers) {
                (true, true) => {
                    if coin(rng) {
                        a
                    } else {
                        b
                    }
                }
                (true, false) => a,
                _ => b,
            }
        };
        let _ = donor; // the closure form fights the borrow checker; inline instead
        let both = i < a.num_enc_layers && i < b.num_enc_layers;
        let from_a = |rng: &mut dyn FnMut() -> bool, only: bool| only || both && rng();
        let _ = from_a;
        let pick_parent = |c: bool| -> &Gene {
            if i >= a.num_enc_layers {
                b
            } else if i >= b.num_enc_layers {
                a
            } else if c {
                a
            } else {
                b
            }
        };
        let hd = pick_parent(coin(rng));
        g.enc_heads.push(hd.enc_heads[i]);
        let bx = pick_parent(coin(rng));
        g.enc_experts.push(bx.enc_experts[i]);
        g.enc_expert_ffn_dims.push(bx.enc_expert_ffn_dims[i].clone());
    }
    for i in 0..num_dec {
        let pick_parent = |c: bool| -> &Gene {
            if i >= a.num_dec_layers {
                b
            } else if i >= b.num_dec_layers {
                a
            } else if c {
                a
            } else {
                b
            }
        };
        g.dec_self_heads.push(pick_parent(coin(rng)).dec_self_heads[i]);
        g.dec_cross_heads.push(pick_parent(coin(rng)).dec_cross_heads[i]);
        g.dec_arbitrary_attn.push(pick_parent(coin(rng)).dec_arbitrary_attn[i]);
        let bx = pick_parent(coin(rng));
        g.dec_experts.push(bx.dec_experts[i]);
        g.dec_expert_ffn_dims.push(bx.dec_expert_ffn_dims[i].clone());
    }
    g
}

/// A scored gene.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub gene: Gene,
    pub fitness: f64,
}

/// Per-iteration search statistics (one JSONL line each).
#[derive(Clone, Debug, Serialize)]
pub struct IterStats {
    pub iteration: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub population: usize,
    pub admitted_mutants: usize,
    pub admitted_crossovers: usize,
    pub best_gene: String,
}

pub struct EvoOutcome {
    pub best: Candidate,
    /// Final population, best fitness first.
    pub population: Vec<Candidate>,
    pub history: Vec<IterStats>,
    /// Distinct genes scored across the whole run.
    pub evaluations: usize,
}

/// Runs the search. `feasible` is the constraint filter applied at
/// admission time (seeding, mutants, crossovers alike); `fitness` scores a
/// gene, lower better, and is consulted once per distinct gene. Seeding
/// fails with an error if `cap_factor · population` samples can't produce a
/// feasible population; later shortfalls just shrink that iteration.
pub fn evolve(
    space: &SearchSpace,
    cfg: &EvoConfig,
    feasible: &mut dyn FnMut(&Gene) -> bool,
    fitness: &mut dyn FnMut(&Gene) -> Result<f64>,
    history_path: Option<&Path>,
) -> Result<EvoOutcome> {
    cfg.validate()?;
    let problems = space.validate();
    if !problems.is_empty() {
        return Err(TensorError::Invalid(format!("invalid space: {}", problems.join("; "))));
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let mut cache: HashMap<Gene, f64> = HashMap::new();
    let mut score = |g: &Gene,
                     cache: &mut HashMap<Gene, f64>,
                     fitness: &mut dyn FnMut(&Gene) -> Result<f64>|
     -> Result<f64> {
        if let Some(&f) = cache.get(g) {
            return Ok(f);
        }
        let f = fitness(g)?;
        cache.insert(g.clone(), f);
        Ok(f)
    };

    // Seed by rejection sampling.
    let mut popu: Vec<Candidate> = Vec::with_capacity(cfg.population);
    let budget = cfg.cap_factor * cfg.population;
    let mut attempts = 0usize;
    while popu.len() < cfg.population {
        if attempts >= budget {
            return Err(TensorError::Invalid(format!(
                "seeding admitted only {} of {} genes in {budget} attempts; \
                 the constraint looks infeasible for this space",
                popu.len(),
                cfg.population
            )));
        }
        attempts += 1;
        let g = sample_gene(space, &mut rng);
        if feasible(&g) {
            let f = score(&g, &mut cache, fitness)?;
            popu.push(Candidate { gene: g, fitness: f });
        }
    }

    let mut writer = match history_path {
        Some(p) => Some(JsonlWriter::create(p)?),
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut log_iter = |iteration: usize,
                        popu: &[Candidate],
                        admitted_mutants: usize,
                        admitted_crossovers: usize,
                        history: &mut Vec<IterStats>,
                        writer: &mut Option<JsonlWriter>|
     -> Result<()> {
        let best = popu.iter().min_by(|x, y| x.fitness.total_cmp(&y.fitness)).unwrap();
        let stats = IterStats {
            iteration,
            best_fitness: best.fitness,
            mean_fitness: popu.iter().map(|c| c.fitness).sum::<f64>() / popu.len() as f64,
            population: popu.len(),
            admitted_mutants,
            admitted_crossovers,
            best_gene: best.gene.short_hash(),
        };
        if let Some(w) = writer.as_mut() {
            w.write(&stats)?;
        }
        history.push(stats);
        Ok(())
    };
    log_iter(0, &popu, 0, 0, &mut history, &mut writer)?;

    for iteration in 1..=cfg.iterations {
        popu.sort_by(|x, y| x.fitness.total_cmp(&y.fitness));
        let parents: Vec<Candidate> = popu[..cfg.parents.min(popu.len())].to_vec();

        let mut mutants: Vec<Candidate> = Vec::with_capacity(cfg.mutations);
        let mut tries = 0;
        while mutants.len() < cfg.mutations && tries < cfg.cap_factor * cfg.mutations {
            tries += 1;
            let base = &popu[rng.random_range(0..popu.len())].gene;
            let child = mutate(space, base, cfg.mutation_prob, &mut rng);
            debug_assert!(validate_gene(space, &child).is_empty());
            if feasible(&child) {
                let f = score(&child, &mut cache, fitness)?;
                mutants.push(Candidate { gene: child, fitness: f });
            }
        }

        let mut children: Vec<Candidate> = Vec::with_capacity(cfg.crossovers);
        let mut tries = 0;
        while children.len() < cfg.crossovers && tries < cfg.cap_factor * cfg.crossovers {
            tries += 1;
            let ia = rng.random_range(0..popu.len());
            let ib = rng.random_range(0..popu.len());
            let child = crossover(&popu[ia].gene, &popu[ib].gene, &mut rng);
            debug_assert!(validate_gene(space, &child).is_empty());
            if feasible(&child) {
                let f = score(&child, &mut cache, fitness)?;
                children.push(Candidate { gene: child, fitness: f });
            }
        }

        let (nm, nc) = (mutants.len(), children.len());
        let mut next = parents;
        next.extend(mutants);
        next.extend(children);
        popu = next;
        log_iter(iteration, &popu, nm, nc, &mut history, &mut writer)?;
    }

    popu.sort_by(|x, y| x.fitness.total_cmp(&y.fitness));
    let best = popu[0].clone();
    Ok(EvoOutcome { best, population: popu, history, evaluations: cache.len() })
}

/// Indices of the non-dominated points when minimizing both coordinates
/// (fitness, cost), by sort-and-sweep. Duplicate points all stay on the
/// front; order is ascending cost.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a].1.total_cmp(&points[b].1).then(points[a].0.total_cmp(&points[b].0))
    });
    let mut front = Vec::new();
    let mut best_fitness = f64::INFINITY;
    let mut last_kept: Option<(f64, f64)> = None;
    for &i in &idx {
        let (fit, cost) = points[i];
        if fit < best_fitness || last_kept == Some((fit, cost)) {
            front.push(i);
            best_fitness = best_fitness.min(fit);
            last_kept = Some((fit, cost));
        }
    }
    front
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::count_flops;
    use crate::space::SearchSpace;
    use rand::SeedableRng;

    fn seeded(n: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(n)
    }

    #[test]
    fn mutation_change_rate_matches_expectation() {
        // A position with k choices changes with probability p·(1 − 1/k).
        let space = SearchSpace::toy();
        let mut rng = seeded(11);
        let base = sample_gene(&space, &mut rng);
        let trials = 6000;
        let mut embed_changes = 0; // 2 choices -> expect 0.3 * 1/2 = 0.15
        let mut qkv_changes = 0; // 1 choice  -> expect 0.0
        for _ in 0..trials {
            let m = mutate(&space, &base, 0.3, &mut rng);
            if m.embed_dim_enc != base.embed_dim_enc {
                embed_changes += 1;
            }
            if m.qkv_dim != base.qkv_dim {
                qkv_changes += 1;
            }
        }
        let rate = embed_changes as f64 / trials as f64;
        assert!((rate - 0.15).abs() < 0.02, "embed change rate {rate}");
        assert_eq!(qkv_changes, 0, "single-choice positions can never change");
    }

    #[test]
    fn mutation_always_repairs_to_a_valid_gene() {
        let space = SearchSpace::toy();
        let mut rng = seeded(22);
        for trial in 0..300 {
            let base = sample_gene(&space, &mut rng);
            for prob in [0.3, 1.0] {
                let m = mutate(&space, &base, prob, &mut rng);
                let problems = validate_gene(&space, &m);
                assert!(problems.is_empty(), "trial {trial} p={prob}: {problems:?}");
                assert_eq!(m.enc_heads.len(), m.num_enc_layers);
                assert_eq!(m.dec_expert_ffn_dims.len(), m.num_dec_layers);
                for (e, w) in m.enc_experts.iter().zip(&m.enc_expert_ffn_dims) {
                    assert_eq!(*e, w.len());
                }
            }
        }
    }

    #[test]
    fn depth_mutation_keeps_the_front_layers() {
        let space = SearchSpace::toy();
        let mut rng = seeded(33);
        let mut seen_grow = false;
        for _ in 0..400 {
            let base = sample_gene(&space, &mut rng);
            let m = mutate(&space, &base, 0.3, &mut rng);
            if m.num_dec_layers > base.num_dec_layers {
                // Front layers survive even if later positions re-rolled:
                // the tail is fresh, the front came from the base (possibly
                // point-mutated, but list lengths always match the count).
                seen_grow = true;
                assert_eq!(m.dec_self_heads.len(), m.num_dec_layers);
            }
        }
        assert!(seen_grow, "with dec choices {{1,2}} growth must occur sometimes");
    }

    #[test]
    fn crossover_takes_every_position_from_a_parent() {
        let space = SearchSpace::toy();
        let mut rng = seeded(44);
        for _ in 0..300 {
            let a = sample_gene(&space, &mut rng);
            let b = sample_gene(&space, &mut rng);
            let c = crossover(&a, &b, &mut rng);
            assert!(validate_gene(&space, &c).is_empty());
            assert!(c.embed_dim_enc == a.embed_dim_enc || c.embed_dim_enc == b.embed_dim_enc);
            assert!(
                c.num_dec_layers == a.num_dec_layers || c.num_dec_layers == b.num_dec_layers
            );
            for i in 0..c.num_enc_layers {
                let block = (&c.enc_experts[i], &c.enc_expert_ffn_dims[i]);
                let from_a = i < a.num_enc_layers
                    && block == (&a.enc_experts[i], &a.enc_expert_ffn_dims[i]);
                let from_b = i < b.num_enc_layers
                    && block == (&b.enc_experts[i], &b.enc_expert_ffn_dims[i]);
                assert!(from_a || from_b, "expert block must come intact from a parent");
            }
        }
    }

    fn tiny_cfg(seed: u64) -> EvoConfig {
        EvoConfig {
            iterations: 8,
            population: 32,
            parents: 8,
            mutations: 12,
            mutation_prob: 0.3,
            crossovers: 12,
            seed,
            cap_factor: 50,
        }
    }

    #[test]
    fn search_closes_in_on_a_flops_target() {
        // Fitness = distance of the reporting FLOPs to a target picked from
        // the space itself, so 0 is attainable and "within 5%" is easy to
        // state exactly.
        let space = SearchSpace::toy();
        let target = count_flops(&sample_gene(&space, &mut seeded(7)), 12, 12, 64).headline();
        let mut feasible = |_: &Gene| true;
        let mut fitness =
            |g: &Gene| Ok((count_flops(g, 12, 12, 64).headline() - target).abs());
        let out = evolve(&space, &tiny_cfg(1), &mut feasible, &mut fitness, None).unwrap();
        let best_flops = count_flops(&out.best.gene, 12, 12, 64).headline();
        assert!(
            (best_flops - target).abs() <= 0.05 * target,
            "best {best_flops} vs target {target}"
        );
        assert!(out.evaluations > 32, "search must explore beyond the seed population");
    }

    #[test]
    fn best_fitness_never_regresses_across_iterations() {
        let space = SearchSpace::toy();
        let mut feasible = |_: &Gene| true;
        let mut fitness = |g: &Gene| Ok(count_flops(g, 10, 10, 64).headline());
        let out = evolve(&space, &tiny_cfg(5), &mut feasible, &mut fitness, None).unwrap();
        for w in out.history.windows(2) {
            assert!(
                w[1].best_fitness <= w[0].best_fitness,
                "parents carry over, so the best cannot get worse"
            );
        }
        assert_eq!(out.history.len(), 9, "seed stats + one per iteration");
    }

    #[test]
    fn same_seed_reproduces_the_whole_run() {
        let space = SearchSpace::toy();
        let run = |seed| {
            let mut feasible = |_: &Gene| true;
            let mut fitness = |g: &Gene| Ok(count_flops(g, 10, 10, 64).headline());
            evolve(&space, &tiny_cfg(seed), &mut feasible, &mut fitness, None).unwrap()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.best.gene, b.best.gene);
        assert_eq!(a.best.fitness.to_bits(), b.best.fitness.to_bits());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.best_fitness.to_bits(), y.best_fitness.to_bits());
            assert_eq!(x.mean_fitness.to_bits(), y.mean_fitness.to_bits());
        }
    }

    #[test]
    fn admission_filter_is_applied_and_infeasible_seeding_errors() {
        let space = SearchSpace::toy();
        // A satisfiable but tight constraint: every admitted gene honors it.
        let budget = count_flops(&crate::space::max_gene(&space), 10, 10, 64).headline() * 0.8;
        let mut feasible = |g: &Gene| count_flops(g, 10, 10, 64).headline() <= budget;
        let mut fitness = |g: &Gene| Ok(count_flops(g, 10, 10, 64).headline());
        let out = evolve(&space, &tiny_cfg(3), &mut feasible, &mut fitness, None).unwrap();
        for c in &out.population {
            assert!(count_flops(&c.gene, 10, 10, 64).headline() <= budget);
        }

        let mut never = |_: &Gene| false;
        let mut fit = |_: &Gene| Ok(0.0);
        let err = evolve(&space, &tiny_cfg(3), &mut never, &mut fit, None)
            .err()
            .expect("impossible constraint must fail seeding");
        assert!(err.to_string().contains("infeasible"), "got: {err}");
    }

    #[test]
    fn history_jsonl_has_one_line_per_iteration() {
        let dir = std::env::temp_dir().join("moenas-evolve-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("history.jsonl");
        let _ = std::fs::remove_file(&path);
        let space = SearchSpace::toy();
        let mut feasible = |_: &Gene| true;
        let mut fitness = |g: &Gene| Ok(count_flops(g, 10, 10, 64).headline());
        evolve(&space, &tiny_cfg(2), &mut feasible, &mut fitness, Some(&path)).unwrap();
        let rows = crate::jsonl::read_values(&path).unwrap();
        assert_eq!(rows.len(), 9);
        assert_eq!(rows[0]["iteration"], 0);
        assert_eq!(rows[8]["iteration"], 8);
        for r in &rows {
            assert!(r["best_fitness"].as_f64().unwrap() >= 0.0);
            assert!(r["population"].as_u64().unwrap() > 0);
            assert!(r["best_gene"].is_string());
        }
    }

    #[test]
    fn pareto_front_matches_brute_force() {
        let dominates = |p: (f64, f64), q: (f64, f64)| {
            p.0 <= q.0 && p.1 <= q.1 && (p.0 < q.0 || p.1 < q.1)
        };
        let mut rng = seeded(99);
        for trial in 0..20 {
            let n = 3 + rng.random_range(0..200);
            let mut pts: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (rng.random_range(0.0..10.0f64).round(), rng.random_range(0.0..10.0f64).round())
                })
                .collect();
            // Force duplicates into some trials.
            if trial % 3 == 0 && n > 4 {
                pts[1] = pts[0];
                pts[3] = pts[2];
            }
            let mut want: Vec<usize> = (0..n)
                .filter(|&i| (0..n).all(|j| j == i || !dominates(pts[j], pts[i])))
                .collect();
            let mut got = pareto_front(&pts);
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want, "trial {trial}: {pts:?}");
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut c = EvoConfig::default();
        assert_eq!((c.iterations, c.population, c.parents), (15, 125, 25));
        assert_eq!((c.mutations, c.crossovers), (50, 50));
        assert_eq!(c.mutation_prob, 0.3);
        c.parents = 200;
        assert!(c.validate().is_err());
        c = EvoConfig::default();
        c.mutation_prob = 1.5;
        assert!(c.validate().is_err());
        c = EvoConfig { population: 0, ..EvoConfig::default() };
        assert!(c.validate().is_err());
    }
}
