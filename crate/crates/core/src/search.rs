//! NSGA-II with differential-evolution operators over the ResNet-like
//! genome space, maximizing (score, parameter count) under a budget.

use crate::arch::genome::{ordered, InitRanges, BlockKind, GenomeBlock, KERNELS, STRIDES};
use crate::arch::{ArchGraph, ResNetGenome};
use crate::de::rand1_bin;
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `a` dominates `b` when it is no worse in both objectives and better in one
/// (both maximized).
pub fn dominates(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] >= b[0] && a[1] >= b[1] && (a[0] > b[0] || a[1] > b[1])
}

/// Pareto fronts as index lists, best front first.
pub fn nondominated_sort(objs: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let n = objs.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(objs[i], objs[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(objs[j], objs[i]) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front`, in `front` order.
pub fn crowding_distance(objs: &[[f64; 2]], front: &[usize]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for m in 0..2 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| objs[front[a]][m].total_cmp(&objs[front[b]][m]).then(a.cmp(&b)));
        let lo = objs[front[order[0]]][m];
        let hi = objs[front[order[n - 1]]][m];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi > lo {
            for k in 1..n - 1 {
                let gap = objs[front[order[k + 1]]][m] - objs[front[order[k - 1]]][m];
                dist[order[k]] += gap / (hi - lo);
            }
        }
    }
    dist
}

/// Indices of the `k` survivors: whole fronts first, then the most crowded-apart
/// members of the first front that does not fit.
pub fn select(objs: &[[f64; 2]], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    for front in nondominated_sort(objs) {
        if out.len() + front.len() <= k {
            out.extend(front);
        } else {
            let d = crowding_distance(objs, &front);
            let mut order: Vec<usize> = (0..front.len()).collect();
            order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
            out.extend(order.into_iter().take(k - out.len()).map(|i| front[i]));
        }
        if out.len() == k {
            break;
        }
    }
    out
}

/// A problem the generic NSGA-II loop can optimize.
pub trait Problem: Sync {
    type Genome: Clone + Send + Sync;

    /// A random genome, or `None` when the draw violates constraints.
    fn random(&self, rng: &mut ChaCha8Rng) -> Option<Self::Genome>;

    /// Objectives to maximize, already sign-adjusted for infeasibility.
    fn evaluate(&self, g: &Self::Genome) -> Result<[f64; 2]>;

    fn offspring(&self, pop: &[Self::Genome], rng: &mut ChaCha8Rng) -> Vec<Self::Genome>;
}

#[derive(Clone, Debug)]
pub struct Population<G> {
    pub genomes: Vec<G>,
    pub objectives: Vec<[f64; 2]>,
}

/// Random initial population, rejecting infeasible draws.
pub fn initial_population<P: Problem>(p: &P, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<P::Genome>> {
    let limit = size.saturating_mul(1000).max(10_000);
    let mut out = Vec::with_capacity(size);
    for _ in 0..limit {
        if out.len() == size {
            break;
        }
        if let Some(g) = p.random(rng) {
            out.push(g);
        }
    }
    if out.len() < size {
        return Err(Error::Usage(format!(
            "only {} of {size} random draws satisfied the constraints",
            out.len()
        )));
    }
    Ok(out)
}

fn evaluate_all<P: Problem>(p: &P, gs: &[P::Genome]) -> Result<Vec<[f64; 2]>> {
    let r: Vec<Result<[f64; 2]>> = gs.par_iter().map(|g| p.evaluate(g)).collect();
    r.into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::AtIndex { index, source: Box::new(e) }))
        .collect()
}

/// Run NSGA-II; `on_generation` sees the population after each selection
/// (and once for the initial population, as generation 0).
pub fn nsga2<P: Problem>(
    p: &P,
    size: usize,
    generations: usize,
    rng: &mut ChaCha8Rng,
    mut on_generation: impl FnMut(usize, &Population<P::Genome>),
) -> Result<Population<P::Genome>> {
    let genomes = initial_population(p, size, rng)?;
    let objectives = evaluate_all(p, &genomes)?;
    let mut pop = Population { genomes, objectives };
    on_generation(0, &pop);
    for gen in 1..=generations {
        let kids = p.offspring(&pop.genomes, rng);
        let kid_obj = evaluate_all(p, &kids)?;
        let mut all_g = std::mem::take(&mut pop.genomes);
        all_g.extend(kids);
        let mut all_o = std::mem::take(&mut pop.objectives);
        all_o.extend(kid_obj);
        let keep = select(&all_o, size);
        pop = Population {
            genomes: keep.iter().map(|&i| all_g[i].clone()).collect(),
            objectives: keep.iter().map(|&i| all_o[i]).collect(),
        };
        on_generation(gen, &pop);
    }
    Ok(pop)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub ux_prob: f64,
    pub mutation_rate: f64,
    pub de_cr: f64,
    pub de_f: f64,
    pub max_blocks: usize,
    pub param_budget: u64,
    pub param_floor: u64,
    pub init_channels: (usize, usize),
    pub init_bottleneck: (usize, usize),
    pub init_sublayers: (usize, usize),
    /// Probability of inserting or deleting one block.
    pub depth_mutation: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 512,
            generations: 100,
            ux_prob: 0.5,
            mutation_rate: 0.8,
            de_cr: 0.8,
            de_f: 0.8,
            max_blocks: 18,
            param_budget: 1_000_000,
            param_floor: 900_000,
            init_channels: (48, 320),
            init_bottleneck: (32, 80),
            init_sublayers: (1, 2),
            depth_mutation: 0.1,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.ux_prob, self.mutation_rate, self.de_cr, self.depth_mutation];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Usage("probabilities must lie in [0, 1]".into()));
        }
        if self.param_floor >= self.param_budget {
            return Err(Error::Usage("parameter floor must be below the budget".into()));
        }
        if self.population < 4 {
            return Err(Error::Usage("population must be at least 4".into()));
        }
        if self.max_blocks == 0 || self.max_blocks > crate::arch::genome::MAX_BLOCKS {
            return Err(Error::Usage(format!("max blocks must be in 1..={}", crate::arch::genome::MAX_BLOCKS)));
        }
        Ok(())
    }

    fn init_ranges(&self) -> InitRanges {
        InitRanges {
            channels: self.init_channels,
            bottleneck: self.init_bottleneck,
            sublayers: self.init_sublayers,
            max_blocks: self.max_blocks,
        }
    }
}

fn ordered_genes(b: &GenomeBlock) -> [f64; 3] {
    [
        ordered::width_to_index(b.channels) as f64,
        ordered::width_to_index(b.bottleneck) as f64,
        (b.sublayers - 1) as f64,
    ]
}

fn set_ordered_genes(b: &mut GenomeBlock, x: &[f64]) {
    let clamp = |v: f64, len: usize| (v.round().max(0.0) as usize).min(len - 1);
    b.channels = ordered::index_to_width(clamp(x[0], ordered::channels_len()));
    b.bottleneck = ordered::index_to_width(clamp(x[1], ordered::bottleneck_len()));
    b.sublayers = clamp(x[2], ordered::sublayers_len()) + 1;
}

/// One offspring per population member. Member `i` is the DE target and
/// is crossed with a random mate; ordered genes use rand/1/bin with three
/// further random donors.
pub fn make_offspring(pop: &[ResNetGenome], cfg: &SearchConfig, rng: &mut ChaCha8Rng) -> Vec<ResNetGenome> {
    let n = pop.len();
    assert!(n >= 4, "offspring needs at least 4 parents");
    let ranges = cfg.init_ranges();
    (0..n)
        .map(|i| {
            let others: Vec<usize> = sample(rng, n - 1, 4).into_iter().map(|k| if k >= i { k + 1 } else { k }).collect();
            let target = &pop[i];
            let mate = &pop[others[0]];
            let (a, b, c) = (&pop[others[1]], &pop[others[2]], &pop[others[3]]);
            let pick = |g: &ResNetGenome, j: usize| g.blocks[j % g.blocks.len()];
            let mut blocks = Vec::with_capacity(target.blocks.len() + 1);
            for (j, &t) in target.blocks.iter().enumerate() {
                let m = pick(mate, j);
                let mut child = t;
                if rng.gen::<f64>() < cfg.ux_prob {
                    child.kind = m.kind;
                }
                if rng.gen::<f64>() < cfg.ux_prob {
                    child.kernel = m.kernel;
                }
                if rng.gen::<f64>() < cfg.ux_prob {
                    child.stride = m.stride;
                }
                if rng.gen::<f64>() < cfg.mutation_rate {
                    child.kind = BlockKind::ALL[rng.gen_range(0..BlockKind::ALL.len())];
                }
                if rng.gen::<f64>() < cfg.mutation_rate {
                    child.kernel = KERNELS[rng.gen_range(0..KERNELS.len())];
                }
                if rng.gen::<f64>() < cfg.mutation_rate {
                    child.stride = STRIDES[rng.gen_range(0..STRIDES.len())];
                }
                let x = rand1_bin(
                    &ordered_genes(&t),
                    &ordered_genes(&pick(a, j)),
                    &ordered_genes(&pick(b, j)),
                    &ordered_genes(&pick(c, j)),
                    cfg.de_f,
                    cfg.de_cr,
                    rng,
                );
                set_ordered_genes(&mut child, &x);
                blocks.push(child);
            }
            if rng.gen::<f64>() < cfg.depth_mutation {
                let insert = rng.gen_bool(0.5);
                if insert && blocks.len() < cfg.max_blocks {
                    let at = rng.gen_range(0..=blocks.len());
                    blocks.insert(at, GenomeBlock::random(&ranges, rng));
                } else if !insert && blocks.len() > 1 {
                    let at = rng.gen_range(0..blocks.len());
                    blocks.remove(at);
                }
            }
            ResNetGenome { blocks }
        })
        .collect()
}

/// The genome search problem around a neural (or proxy) scorer.
pub struct GenomeProblem<'a, F> {
    pub cfg: &'a SearchConfig,
    pub scorer: F,
}

/// Objectives before the infeasibility flip.
pub fn raw_objectives<F>(scorer: &F, g: &ResNetGenome) -> Result<(f64, u64, ArchGraph)>
where
    F: Fn(&ArchGraph) -> Result<f64>,
{
    let graph = g.decode()?;
    let params = graph.count_params();
    Ok((scorer(&graph)?, params, graph))
}

impl<F> Problem for GenomeProblem<'_, F>
where
    F: Fn(&ArchGraph) -> Result<f64> + Sync,
{
    type Genome = ResNetGenome;

    fn random(&self, rng: &mut ChaCha8Rng) -> Option<ResNetGenome> {
        let g = ResNetGenome::random(&self.cfg.init_ranges(), rng);
        (g.params() <= self.cfg.param_budget).then_some(g)
    }

    fn evaluate(&self, g: &ResNetGenome) -> Result<[f64; 2]> {
        let (score, params, _) = raw_objectives(&self.scorer, g)?;
        let obj = [score, params as f64];
        Ok(if params > self.cfg.param_budget { [-obj[0], -obj[1]] } else { obj })
    }

    fn offspring(&self, pop: &[ResNetGenome], rng: &mut ChaCha8Rng) -> Vec<ResNetGenome> {
        make_offspring(pop, self.cfg, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub gen: usize,
    pub best_score: Option<f64>,
    pub best_params: Option<u64>,
    pub front0_size: usize,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genome: ResNetGenome,
    pub graph: ArchGraph,
    pub score: f64,
    pub params: u64,
    pub history: Vec<GenerationLog>,
}

fn in_window(cfg: &SearchConfig, params: f64) -> bool {
    params >= cfg.param_floor as f64 && params <= cfg.param_budget as f64
}

/// Highest score among members whose (unflipped) parameter count lies in
/// `[floor, budget]`.
fn best_in_window(cfg: &SearchConfig, pop: &Population<ResNetGenome>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, o) in pop.objectives.iter().enumerate() {
        if o[1] >= 0.0 && in_window(cfg, o[1]) && best.map_or(true, |b| o[0] > pop.objectives[b][0]) {
            best = Some(i);
        }
    }
    best
}

/// Full search. Returns the best architecture with parameters inside
/// `[param_floor, param_budget]`.
pub fn run_search<F>(scorer: F, cfg: &SearchConfig) -> Result<SearchOutcome>
where
    F: Fn(&ArchGraph) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let problem = GenomeProblem { cfg, scorer };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let pop = nsga2(&problem, cfg.population, cfg.generations, &mut rng, |gen, pop| {
        let best = best_in_window(cfg, pop);
        let log = GenerationLog {
            gen,
            best_score: best.map(|b| pop.objectives[b][0]),
            best_params: best.map(|b| pop.objectives[b][1] as u64),
            front0_size: nondominated_sort(&pop.objectives).first().map_or(0, Vec::len),
        };
        log::info!("{}", serde_json::to_string(&log).unwrap_or_default());
        history.push(log);
    })?;
    match best_in_window(cfg, &pop) {
        Some(b) => {
            let genome = pop.genomes[b].clone();
            let (score, params, graph) = raw_objectives(&problem.scorer, &genome)?;
            Ok(SearchOutcome {
                genome,
                graph,
                score,
                params,
                history,
            })
        }
        None => {
            let b = (0..pop.genomes.len())
                .max_by(|&x, &y| pop.objectives[x][0].abs().total_cmp(&pop.objectives[y][0].abs()).then(y.cmp(&x)))
                .expect("population is non-empty");
            let genome = pop.genomes[b].clone();
            let (score, params, _) = raw_objectives(&problem.scorer, &genome)?;
            Err(Error::NoFeasible {
                genome: Box::new(genome),
                params,
                score,
            })
        }
    }
}

/// Analytic two-objective problem `(x, 1 - x)` on `x = i / steps`; every
/// grid point is Pareto optimal.
pub struct LineFront {
    pub steps: usize,
}

impl Problem for LineFront {
    type Genome = usize;

    fn random(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        Some(rng.gen_range(0..=self.steps))
    }

    fn evaluate(&self, g: &usize) -> Result<[f64; 2]> {
        let x = *g as f64 / self.steps as f64;
        Ok([x, 1.0 - x])
    }

    fn offspring(&self, pop: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = pop.len();
        (0..n)
            .map(|i| {
                let idx = sample(rng, n, 3);
                let v: Vec<f64> = (0..3).map(|k| pop[idx.index(k)] as f64).collect();
                let x = rand1_bin(&[pop[i] as f64], &[v[0]], &[v[1]], &[v[2]], 0.8, 0.9, rng);
                (x[0].round().max(0.0) as usize).min(self.steps)
            })
            .collect()
    }
}

/// Largest distance from a grid point to its nearest population member,
/// in grid steps.
pub fn coverage_gap(pop: &[usize], steps: usize) -> usize {
    (0..=steps)
        .map(|t| pop.iter().map(|&p| p.abs_diff(t)).min().unwrap_or(usize::MAX))
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::params_proxy;

    fn brute_fronts(objs: &[[f64; 2]]) -> Vec<Vec<usize>> {
        let mut left: Vec<usize> = (0..objs.len()).collect();
        let mut fronts = Vec::new();
        while !left.is_empty() {
            let front: Vec<usize> = left
                .iter()
                .copied()
                .filter(|&i| !left.iter().any(|&j| dominates(objs[j], objs[i])))
                .collect();
            left.retain(|i| !front.contains(i));
            fronts.push(front);
        }
        fronts
    }

    #[test]
    fn sort_examples() {
        let f = nondominated_sort(&[[2.0, 2.0], [1.0, 1.0], [0.0, 3.0]]);
        assert_eq!(f, vec![vec![0, 2], vec![1]]);
        assert_eq!(nondominated_sort(&[[1.0, 1.0]; 4]), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn sort_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let objs: Vec<[f64; 2]> = (0..50).map(|_| [rng.gen_range(0..10) as f64, rng.gen_range(0..10) as f64]).collect();
            let mut fast = nondominated_sort(&objs);
            fast.iter_mut().for_each(|f| f.sort_unstable());
            assert_eq!(fast, brute_fronts(&objs));
        }
    }

    #[test]
    fn crowding_examples() {
        let objs = [[0.0, 2.0], [1.0, 1.0], [2.0, 0.0]];
        assert_eq!(crowding_distance(&objs, &[0, 2]), vec![f64::INFINITY; 2]);
        let d = crowding_distance(&objs, &[0, 1, 2]);
        assert_eq!(d[1], 2.0);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        let flat = [[0.0, 5.0], [1.0, 5.0], [2.0, 5.0], [4.0, 5.0]];
        let d = crowding_distance(&flat, &[0, 1, 2, 3]);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[2], 0.75);
    }

    #[test]
    fn line_front_is_covered() {
        let steps = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pop = nsga2(&LineFront { steps }, 101, 100, &mut rng, |_, _| {}).unwrap();
        assert_eq!(pop.genomes.len(), 101);
        let gap = coverage_gap(&pop.genomes, steps);
        assert!(gap <= 1, "gap {gap}");
    }

    #[test]
    fn zero_rates_clone_identical_parents() {
        let cfg = SearchConfig {
            mutation_rate: 0.0,
            depth_mutation: 0.0,
            ..Default::default()
        };
        let g: ResNetGenome = "SuperResKXKX:3:1:64:32:2;SuperResK1KXK1:5:2:128:48:1".parse().unwrap();
        let pop = vec![g.clone(); 6];
        let kids = make_offspring(&pop, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(kids.iter().all(|k| *k == g));
    }

    #[test]
    fn offspring_stay_in_domain() {
        let cfg = SearchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wide = InitRanges {
            channels: (8, 2048),
            bottleneck: (8, 256),
            sublayers: (1, 9),
            max_blocks: 18,
        };
        let mut pop: Vec<ResNetGenome> = (0..40).map(|_| ResNetGenome::random(&wide, &mut rng)).collect();
        let mut total = 0;
        for _ in 0..25 {
            pop = make_offspring(&pop, &cfg, &mut rng);
            for k in &pop {
                k.validate().unwrap();
                assert!(k.blocks.len() <= cfg.max_blocks);
            }
            total += pop.len();
        }
        assert!(total >= 1000);
    }

    #[test]
    fn selection_keeps_first_front() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let objs: Vec<[f64; 2]> = (0..40).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            let front0 = &nondominated_sort(&objs)[0];
            let keep = select(&objs, 20);
            assert_eq!(keep.len(), 20);
            if front0.len() <= 20 {
                assert!(front0.iter().all(|i| keep.contains(i)));
            }
        }
    }

    #[test]
    fn params_proxy_search_hits_window() {
        let cfg = SearchConfig {
            population: 32,
            generations: 30,
            seed: 5,
            ..Default::default()
        };
        let out = run_search(|g| Ok(params_proxy(g)), &cfg).unwrap();
        assert!((900_000..=1_000_000).contains(&out.params), "{}", out.params);
        assert!(out.genome.blocks.len() <= 18);
        assert_eq!(out.history.len(), 31);
        let again = run_search(|g| Ok(params_proxy(g)), &cfg).unwrap();
        assert_eq!(out.genome, again.genome);
        assert_eq!(out.history, again.history);
    }

    #[test]
    fn zero_generations_return_best_initial() {
        let cfg = SearchConfig {
            population: 64,
            generations: 0,
            param_floor: 1,
            seed: 8,
            ..Default::default()
        };
        let out = run_search(|g| Ok(params_proxy(g)), &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].best_params, Some(out.params));
    }

    #[test]
    fn infeasible_final_population_is_reported() {
        let cfg = SearchConfig {
            population: 8,
            generations: 0,
            param_budget: 1_000_000,
            param_floor: 999_999,
            seed: 1,
            ..Default::default()
        };
        let err = run_search(|g| Ok(params_proxy(g)), &cfg).unwrap_err();
        assert!(matches!(err, Error::NoFeasible { .. }));
    }
}
