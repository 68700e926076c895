use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::space::{build_prototype, SearchSpace};
use super::{Candidate, GenesisError};
use crate::archdsl::{ArchGraph, LayerKind};
use crate::complexity::{analyze, count_flops};
use crate::data::DatasetSplit;
use crate::objective::{indicator, netscore, rank_scores, Metrics, ObjectiveParams};
use crate::train::{fit, TrainConfig};

pub const REPAIR_ROUNDS: usize = 3;
const SAMPLE_RETRIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorState {
    pub space: SearchSpace,
    /// One probability vector per [`SearchSpace::decisions`] entry.
    pub distributions: Vec<Vec<f64>>,
    pub generation: usize,
    pub master_seed: u64,
    /// Best score of each completed update, `None` while nothing is feasible.
    pub history: Vec<Option<f64>>,
    /// Step size of the update towards elite frequencies.
    pub alpha: f64,
    /// Minimum probability of every option.
    pub floor: f64,
}

impl GeneratorState {
    pub fn uniform(space: SearchSpace, master_seed: u64) -> Result<Self, GenesisError> {
        space.validate()?;
        let distributions =
            space.decisions().iter().map(|d| vec![1.0 / d.options.len() as f64; d.options.len()]).collect();
        Ok(Self { space, distributions, generation: 0, master_seed, history: Vec::new(), alpha: 0.5, floor: 0.02 })
    }

    /// Every vector sums to 1 within 1e-9 and respects the floor.
    pub fn is_valid(&self) -> bool {
        self.distributions.iter().all(|p| {
            (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && p.iter().all(|&x| x >= self.floor - 1e-12 && x <= 1.0 + 1e-12)
        })
    }
}

fn candidate_rng(state: &GeneratorState, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(state.master_seed);
    rng.set_stream(((state.generation as u64) << 32) | index as u64);
    rng
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, &x) in p.iter().enumerate() {
        cumulative += x;
        if u < cumulative {
            return i;
        }
    }
    // rounding left u above the total: take the last option with mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

fn unscored(id: usize, generation: Option<usize>, genome: Option<Vec<usize>>, arch: ArchGraph) -> Candidate {
    let report = analyze(&arch).expect("candidate graphs are shape-inferred");
    Candidate { id, generation, genome, arch, report, metrics: None, feasible: false, score: None, failed: false }
}

/// Samples `n` candidates with ids `0..n`. Deterministic for a fixed state.
pub fn generate(state: &GeneratorState, n: usize) -> Result<Vec<Candidate>, GenesisError> {
    if n == 0 {
        return Err(GenesisError::Config("population must be at least 1".into()));
    }
    let decisions = state.space.decisions();
    if state.distributions.len() != decisions.len()
        || state.distributions.iter().zip(&decisions).any(|(p, d)| p.len() != d.options.len())
    {
        return Err(GenesisError::Genome);
    }
    let prototype = build_prototype(&state.space)?;
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let mut rng = candidate_rng(state, id);
        let mut picked = None;
        for _ in 0..SAMPLE_RETRIES {
            let genome: Vec<usize> = state.distributions.iter().map(|p| sample_categorical(p, &mut rng)).collect();
            if let Ok(arch) = state.space.decode(&genome) {
                picked = Some((Some(genome), arch));
                break;
            }
        }
        let (genome, arch) = picked.unwrap_or((None, prototype.clone()));
        out.push(unscored(id, Some(state.generation), genome, arch));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub arch: ArchGraph,
    pub feasible: bool,
    /// Width rescalings applied.
    pub rounds: usize,
}

fn round_width(c: usize, scale: f64) -> usize {
    (((c as f64 * scale) / 8.0).round() as usize * 8).max(8)
}

/// Moves a graph towards the FLOP budget by rescaling conv widths by
/// `sqrt(budget / flops)` (rounded to a multiple of 8, at least 8), for at
/// most [`REPAIR_ROUNDS`] rounds. Scales compound across rounds and are
/// always applied to the original widths, so small corrections are not lost
/// to rounding. Dense layers keep their width, which is the class count.
pub fn repair(arch: &ArchGraph, o: &ObjectiveParams) -> Result<RepairOutcome, GenesisError> {
    let mut current = arch.clone();
    let mut flops = count_flops(&current)?.0;
    let mut scale = 1.0;
    for round in 0..=REPAIR_ROUNDS {
        if indicator(flops, o) {
            return Ok(RepairOutcome { arch: current, feasible: true, rounds: round });
        }
        if round == REPAIR_ROUNDS {
            break;
        }
        scale *= (o.budget_flops as f64 / flops.max(1) as f64).sqrt();
        let next = arch.map_kinds(|_, kind| match kind {
            LayerKind::Conv { out_channels, geometry, bias, batch_norm, activation } => LayerKind::Conv {
                out_channels: round_width(*out_channels, scale),
                geometry: *geometry,
                bias: *bias,
                batch_norm: *batch_norm,
                activation: *activation,
            },
            other => other.clone(),
        });
        let Ok(next) = next.infer_shapes() else { break };
        flops = count_flops(&next)?.0;
        current = next;
    }
    Ok(RepairOutcome { arch: current, feasible: false, rounds: REPAIR_ROUNDS })
}

/// Proxy evaluation settings for the inquisitor.
#[derive(Debug, Clone)]
pub struct ProxyEval {
    pub split: DatasetSplit,
    pub train: TrainConfig,
}

/// Trains a feasible candidate on the proxy split and scores it. Divergence
/// or an undefined score marks it failed with score negative infinity.
pub fn inquire(c: &Candidate, eval: &ProxyEval, o: &ObjectiveParams) -> Result<Candidate, GenesisError> {
    if !c.feasible {
        return Err(GenesisError::Config(format!("candidate {} is infeasible and cannot be trained", c.id)));
    }
    let mut out = c.clone();
    let fitted = fit(&c.arch, &eval.split, &eval.train)?;
    let metrics = Metrics::from_counts(fitted.best_accuracy, c.report.params, c.report.flops);
    match netscore(&metrics, o) {
        Ok(score) if !fitted.diverged => {
            out.metrics = Some(metrics);
            out.score = Some(score);
            out.failed = false;
        }
        _ => {
            out.metrics = None;
            out.score = Some(f64::NEG_INFINITY);
            out.failed = true;
        }
    }
    Ok(out)
}

/// Sets entries below `floor` to `floor` and rescales the rest, repeating
/// until no rescaled entry drops under the floor.
fn apply_floor(p: &mut [f64], floor: f64) {
    let mut pinned = vec![false; p.len()];
    loop {
        let pinned_mass = floor * pinned.iter().filter(|x| **x).count() as f64;
        let free_mass: f64 = p.iter().zip(&pinned).filter(|(_, f)| !**f).map(|(x, _)| *x).sum();
        let target = 1.0 - pinned_mass;
        let free = pinned.iter().filter(|f| !**f).count().max(1) as f64;
        let mut changed = false;
        for (x, f) in p.iter_mut().zip(pinned.iter_mut()) {
            if *f {
                *x = floor;
                continue;
            }
            *x = if free_mass > 0.0 { *x * target / free_mass } else { target / free };
            if *x < floor {
                *f = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Cross-entropy update: each categorical moves `alpha` of the way towards
/// the option frequencies among the top `ceil(elite_frac * n)` candidates.
/// Only feasible, successfully scored, sampled candidates can be elites; if
/// there are none only the generation advances.
pub fn update(state: &GeneratorState, scored: &[Candidate], elite_frac: f64) -> Result<GeneratorState, GenesisError> {
    if scored.is_empty() {
        return Err(GenesisError::Config("update needs at least one candidate".into()));
    }
    if !(elite_frac > 0.0 && elite_frac <= 1.0) {
        return Err(GenesisError::Config(format!("elite_frac {elite_frac} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&state.alpha) || state.floor * state.distributions.iter().map(Vec::len).max().unwrap_or(0) as f64 > 1.0 {
        return Err(GenesisError::Config("alpha must be in [0, 1] and the floor must leave room".into()));
    }
    let mut next = state.clone();
    next.generation += 1;
    let eligible: Vec<(usize, f64, bool)> = scored
        .iter()
        .enumerate()
        .filter(|(_, c)| c.feasible && !c.failed && c.genome.is_some() && c.score.is_some_and(f64::is_finite))
        .map(|(i, c)| (i, c.rank_score(), true))
        .collect();
    let best = eligible.iter().map(|e| e.1).fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    next.history.push(best);
    if eligible.is_empty() {
        return Ok(next);
    }
    let k = ((elite_frac * scored.len() as f64).ceil() as usize).clamp(1, eligible.len());
    let elites: Vec<&[usize]> =
        rank_scores(&eligible).into_iter().take(k).map(|i| scored[i].genome.as_deref().unwrap()).collect();
    for (d, p) in next.distributions.iter_mut().enumerate() {
        let mut freq = vec![0.0; p.len()];
        for g in &elites {
            freq[g[d]] += 1.0 / k as f64;
        }
        for (x, f) in p.iter_mut().zip(&freq) {
            *x = (1.0 - state.alpha) * *x + state.alpha * f;
        }
        apply_floor(p, state.floor);
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub objective: ObjectiveParams,
    pub population: usize,
    pub generations: usize,
    pub elite_frac: f64,
    pub alpha: f64,
    pub floor: f64,
    pub master_seed: u64,
    pub eval: ProxyEval,
    /// Train candidates concurrently; results are still reduced in id order.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub generation: usize,
    /// Archive best after this generation.
    pub best_score: Option<f64>,
    pub feasible_count: usize,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Candidate,
    pub prototype: Candidate,
    /// Entry 0 is the prototype.
    pub history: Vec<HistoryEntry>,
    pub state: GeneratorState,
    pub evaluated: usize,
}

fn evaluate_all(cands: Vec<Candidate>, cfg: &SearchConfig) -> Result<Vec<Candidate>, GenesisError> {
    let one = |c: Candidate| if c.feasible { inquire(&c, &cfg.eval, &cfg.objective) } else { Ok(c) };
    if cfg.parallel {
        cands.into_par_iter().map(one).collect()
    } else {
        cands.into_iter().map(one).collect()
    }
}

fn repaired(mut c: Candidate, o: &ObjectiveParams) -> Result<Candidate, GenesisError> {
    let outcome = repair(&c.arch, o)?;
    c.report = analyze(&outcome.arch)?;
    c.arch = outcome.arch;
    c.feasible = outcome.feasible;
    Ok(c)
}

/// Runs generate, repair, budget filter, inquire and update for the
/// configured number of generations, keeping the best feasible candidate
/// seen (the prototype, repaired, included when feasible).
pub fn search(cfg: &SearchConfig) -> Result<SearchResult, GenesisError> {
    cfg.objective.validate()?;
    if cfg.population == 0 {
        return Err(GenesisError::Config("population must be at least 1".into()));
    }
    let mut state = GeneratorState::uniform(cfg.space.clone(), cfg.master_seed)?;
    state.alpha = cfg.alpha;
    state.floor = cfg.floor;

    // The prototype is trained even when repair cannot make it feasible, so
    // there is always a reference score. Only a feasible one is archived.
    let proto = repaired(unscored(0, None, None, build_prototype(&cfg.space)?), &cfg.objective)?;
    let feasible = proto.feasible;
    let mut proto = inquire(&Candidate { feasible: true, ..proto }, &cfg.eval, &cfg.objective)?;
    proto.feasible = feasible;
    let mut archive: Option<Candidate> = proto.feasible.then(|| proto.clone()).filter(|c| !c.failed);
    let mut evaluated = 1;
    let mut history =
        vec![HistoryEntry { generation: 0, best_score: archive.as_ref().map(Candidate::rank_score), feasible_count: usize::from(proto.feasible) }];

    for g in 1..=cfg.generations {
        let sampled = generate(&state, cfg.population)?;
        let fixed = sampled.into_iter().map(|c| repaired(c, &cfg.objective)).collect::<Result<Vec<_>, _>>()?;
        let scored = evaluate_all(fixed, cfg)?;
        let feasible_count = scored.iter().filter(|c| c.feasible).count();
        evaluated += feasible_count;
        for c in &scored {
            if c.feasible && !c.failed && archive.as_ref().map_or(true, |a| c.rank_score() > a.rank_score()) {
                archive = Some(c.clone());
            }
        }
        state = update(&state, &scored, cfg.elite_frac)?;
        history.push(HistoryEntry { generation: g, best_score: archive.as_ref().map(Candidate::rank_score), feasible_count });
    }
    let best = archive.ok_or(GenesisError::NoFeasible)?;
    Ok(SearchResult { best, prototype: proto, history, state, evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archdsl::{parse_arch, TensorShape};
    use crate::data::{synth, SynthConfig};
    use proptest::prelude::{prop_assert, prop_assume, proptest};

    fn space64() -> SearchSpace {
        SearchSpace::new(TensorShape::new(64, 64, 1))
    }

    #[test]
    fn generate_is_deterministic_with_sequential_ids() {
        let state = GeneratorState::uniform(space64(), 7).unwrap();
        let a = generate(&state, 8).unwrap();
        assert_eq!(a, generate(&state, 8).unwrap());
        assert_eq!(a.iter().map(|c| c.id).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert!(a.iter().all(|c| c.arch.is_inferred() && c.genome.is_some() && c.report.flops > 0));
        let distinct: std::collections::HashSet<_> = a.iter().map(|c| c.genome.clone()).collect();
        assert!(distinct.len() > 1);
        assert!(generate(&state, 0).is_err());
    }

    #[test]
    fn one_hot_distributions_decode_the_same_genome() {
        let mut state = GeneratorState::uniform(space64(), 1).unwrap();
        let genome = state.space.median_genome();
        for (p, &g) in state.distributions.iter_mut().zip(&genome) {
            p.iter_mut().enumerate().for_each(|(i, x)| *x = if i == g { 1.0 } else { 0.0 });
        }
        let expected = state.space.decode(&genome).unwrap();
        for c in generate(&state, 5).unwrap() {
            assert_eq!(c.arch, expected);
            assert_eq!(c.genome.as_deref(), Some(genome.as_slice()));
        }
    }

    fn scored(genomes: &[(Vec<usize>, f64)], space: &SearchSpace) -> Vec<Candidate> {
        genomes
            .iter()
            .enumerate()
            .map(|(id, (g, s))| {
                let mut c = unscored(id, Some(0), Some(g.clone()), space.decode(g).unwrap());
                c.feasible = true;
                c.score = Some(*s);
                c
            })
            .collect()
    }

    #[test]
    fn update_hand_example() {
        let space = space64();
        let mut state = GeneratorState::uniform(space.clone(), 0).unwrap();
        let mut g = space.median_genome();
        let d = space.decisions().iter().position(|d| d.name == "stem_channels").unwrap();
        assert_eq!(state.distributions[d], vec![0.25; 4]);
        g[d] = 2;
        let mut other = g.clone();
        other[d] = 0;
        let cands = scored(&[(other, 10.0), (g, 50.0)], &space);
        state = update(&state, &cands, 0.5).unwrap();
        let p = &state.distributions[d];
        for (x, e) in p.iter().zip([0.125, 0.125, 0.625, 0.125]) {
            assert!((x - e).abs() < 1e-12, "{p:?}");
        }
        assert_eq!(state.generation, 1);
        assert_eq!(state.history, vec![Some(50.0)]);
        assert!(state.is_valid());
    }

    #[test]
    fn update_alpha_zero_and_no_elites() {
        let space = space64();
        let mut state = GeneratorState::uniform(space.clone(), 0).unwrap();
        state.alpha = 0.0;
        let cands = scored(&[(space.median_genome(), 1.0)], &space);
        let next = update(&state, &cands, 1.0).unwrap();
        assert_eq!(next.distributions, state.distributions);
        let mut bad = cands.clone();
        bad[0].feasible = false;
        state.alpha = 0.5;
        let next = update(&state, &bad, 1.0).unwrap();
        assert_eq!(next.distributions, state.distributions);
        assert_eq!(next.generation, 1);
        assert_eq!(next.history, vec![None]);
        assert!(update(&state, &[], 0.5).is_err());
        assert!(update(&state, &cands, 0.0).is_err());
    }

    #[test]
    fn shared_elite_choice_gains_probability() {
        let space = space64();
        let state = GeneratorState::uniform(space.clone(), 0).unwrap();
        let k = space.decisions().iter().position(|d| d.name == "stage0.kernel").unwrap();
        let mut a = space.median_genome();
        a[k] = 1;
        let mut b = a.clone();
        b[k + 1] = 0;
        let mut loser = space.median_genome();
        loser[k] = 0;
        let next = update(&state, &scored(&[(a, 5.0), (b, 4.0), (loser, 1.0)], &space), 0.5).unwrap();
        assert!(next.distributions[k][1] > state.distributions[k][1]);
    }

    proptest! {
        #[test]
        fn floor_keeps_valid_probabilities(seed in 0u64..1000, rounds in 1usize..12, alpha in 0.0f64..=1.0) {
            let space = space64();
            let mut state = GeneratorState::uniform(space.clone(), seed).unwrap();
            state.alpha = alpha;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..rounds {
                let cands = generate(&state, 4).unwrap();
                let with_scores: Vec<(Vec<usize>, f64)> =
                    cands.iter().map(|c| (c.genome.clone().unwrap(), rng.gen_range(0.0..100.0))).collect();
                state = update(&state, &scored(&with_scores, &space), rng.gen_range(0.1..=1.0)).unwrap();
                prop_assert!(state.is_valid(), "{:?}", state.distributions);
            }
        }

        #[test]
        fn floor_projection(raw in proptest::collection::vec(0.0f64..1.0, 2..9)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            apply_floor(&mut p, 0.02);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.02 - 1e-12));
        }
    }

    #[test]
    fn repair_identity_at_budget() {
        let arch = build_prototype(&space64()).unwrap();
        let flops = count_flops(&arch).unwrap().0;
        let o = ObjectiveParams { budget_flops: flops, ..ObjectiveParams::default() };
        let out = repair(&arch, &o).unwrap();
        assert_eq!((out.feasible, out.rounds), (true, 0));
        assert_eq!(out.arch, arch);
    }

    #[test]
    fn repair_brings_150m_into_window() {
        let space = SearchSpace::new(TensorShape::new(128, 128, 1));
        let stages = [(32, 2), (56, 2), (72, 2)]
            .map(|(c, b)| super::super::StageSpec { channels: c, blocks: b, kernel: 3, block: super::super::BlockType::StandardResidual });
        let text = super::super::residual_net(space.input, 16, &stages, 6);
        let arch = parse_arch(&text).unwrap().infer_shapes().unwrap();
        let before = count_flops(&arch).unwrap().0;
        assert!((1.3e8..1.7e8).contains(&(before as f64)), "{before}");
        let o = ObjectiveParams::default();
        let out = repair(&arch, &o).unwrap();
        let after = count_flops(&out.arch).unwrap().0;
        assert!(out.feasible, "{after}");
        assert!((95_000_000..=105_000_000).contains(&after), "{after}");
        assert!(after.abs_diff(o.budget_flops) < before.abs_diff(o.budget_flops));
    }

    #[test]
    fn repair_marks_floor_bound_graph_infeasible() {
        let text = "input 64 64 1\nconv a k=3 f=8 bn=1\nconv b k=3 f=8 bn=1\ngap g\ndense d units=6\nsoftmax s\n";
        let arch = parse_arch(text).unwrap().infer_shapes().unwrap();
        let o = ObjectiveParams { budget_flops: 100_000, ..ObjectiveParams::default() };
        let out = repair(&arch, &o).unwrap();
        assert!(!out.feasible);
        assert_eq!(count_flops(&out.arch).unwrap().0, count_flops(&arch).unwrap().0);
    }

    fn tiny_eval(lr: f32) -> ProxyEval {
        ProxyEval {
            split: synth(&SynthConfig { per_class: 10, size: 32, seed: 3 }).unwrap(),
            train: TrainConfig { learning_rate: lr, epochs: 1, batch_size: 16, augment: false, ..TrainConfig::default() },
        }
    }

    fn tiny_space() -> SearchSpace {
        let mut s = SearchSpace::new(TensorShape::new(32, 32, 1));
        s.channel_choices = vec![8, 16];
        s.stem_channel_choices = vec![8];
        s.stages = (2, 3);
        s.blocks_per_stage = (1, 2);
        s
    }

    #[test]
    fn inquire_is_deterministic_and_zero_lr_is_finite() {
        let arch = build_prototype(&tiny_space()).unwrap();
        let mut c = unscored(0, None, None, arch);
        c.feasible = true;
        let o = ObjectiveParams::default();
        let eval = tiny_eval(0.05);
        let a = inquire(&c, &eval, &o).unwrap();
        assert_eq!(a, inquire(&c, &eval, &o).unwrap());
        let frozen = inquire(&c, &tiny_eval(0.0), &o).unwrap();
        assert!(frozen.score.unwrap().is_finite());
        let mut infeasible = c.clone();
        infeasible.feasible = false;
        assert!(inquire(&infeasible, &eval, &o).is_err());
    }

    fn tiny_search(generations: usize) -> SearchConfig {
        let space = tiny_space();
        let proto_flops = count_flops(&build_prototype(&space).unwrap()).unwrap().0;
        SearchConfig {
            space,
            objective: ObjectiveParams { budget_flops: proto_flops, tolerance: 0.25, ..ObjectiveParams::default() },
            population: 3,
            generations,
            elite_frac: 0.5,
            alpha: 0.5,
            floor: 0.02,
            master_seed: 11,
            eval: tiny_eval(0.05),
            parallel: false,
        }
    }

    #[test]
    fn search_zero_generations_returns_prototype() {
        let r = search(&tiny_search(0)).unwrap();
        assert_eq!(r.best, r.prototype);
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.history[0].feasible_count, 1);
    }

    #[test]
    fn search_is_deterministic_and_elitist() {
        let cfg = tiny_search(2);
        let a = search(&cfg).unwrap();
        let b = search(&cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert!(indicator(a.best.report.flops, &cfg.objective));
        let scores: Vec<f64> = a.history.iter().map(|h| h.best_score.unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[1] >= w[0]), "{scores:?}");
        assert!(a.best.rank_score() >= a.prototype.rank_score());
    }

    #[test]
    fn search_without_feasible_candidates_fails() {
        let mut cfg = tiny_search(1);
        cfg.objective.budget_flops = 1_000;
        assert!(matches!(search(&cfg), Err(GenesisError::NoFeasible)));
    }
}
