//! Decision-time benchmark: meta-heuristic searches against guided sampling.
//!
//! Every solver minimizes `|capacity(x) - target|` over the integer box and
//! stops at the first configuration in the target class or at the timeout.
//! Continuous methods round (and clip) before evaluating.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::daydream::{column_crossover, mutate, random_config, tournament, EvolutionParams};
use crate::diffusion::{sample, NoiseEstimator, NoiseSchedule, SampleRequest};
use crate::domain::{capacity, capacity_class, Bounds, CapacityClass, Codec, Configuration, SkillProfile};
use crate::error::{Error, Result};

/// Desk-scale search budget in seconds.
pub const DEFAULT_TIMEOUT: f64 = 30.0;
/// Configurations drawn per diffusion round.
pub const DIFFUSION_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchProblem {
    pub target: CapacityClass,
    pub skills: SkillProfile,
    pub bounds: Bounds,
    /// Seconds.
    pub timeout: f64,
}

impl SearchProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout > 0.0) {
            return Err(Error::invalid("timeout must be positive"));
        }
        if self.skills.rates.len() != self.bounds.asset_types {
            return Err(Error::invalid("skill profile does not cover every asset type"));
        }
        Ok(())
    }

    fn objective(&self, x: &Configuration) -> f64 {
        (capacity(x, &self.skills) as f64 - self.target.value() as f64).abs()
    }

    fn dims(&self) -> usize {
        self.bounds.asset_types * self.bounds.stations
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub algorithm: Algorithm,
    pub target: CapacityClass,
    pub elapsed: f64,
    pub success: bool,
    pub found: Option<Configuration>,
    pub evaluations: u64,
}

/// Counts evaluations, remembers the first hit and watches the clock.
struct Evaluator<'a> {
    problem: &'a SearchProblem,
    start: Instant,
    budget: Duration,
    evaluations: u64,
    found: Option<Configuration>,
    timed_out: bool,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a SearchProblem) -> Self {
        Evaluator {
            problem,
            start: Instant::now(),
            budget: Duration::from_secs_f64(problem.timeout),
            evaluations: 0,
            found: None,
            timed_out: false,
        }
    }

    fn eval(&mut self, x: &Configuration) -> f64 {
        self.evaluations += 1;
        let f = self.problem.objective(x);
        if f == 0.0 && self.found.is_none() {
            self.found = Some(x.clone());
        }
        if self.start.elapsed() >= self.budget {
            self.timed_out = true;
        }
        f
    }

    fn done(&self) -> bool {
        self.found.is_some() || self.timed_out
    }

    fn finish(self, algorithm: Algorithm) -> BenchResult {
        let success = self.found.is_some();
        let elapsed = if success {
            self.start.elapsed().as_secs_f64()
        } else {
            self.problem.timeout
        };
        if let Some(x) = &self.found {
            debug_assert_eq!(capacity_class(x, &self.problem.skills), self.problem.target);
        }
        BenchResult {
            algorithm,
            target: self.problem.target,
            elapsed,
            success,
            found: self.found,
            evaluations: self.evaluations,
        }
    }
}

fn to_config(v: &[f64], b: &Bounds) -> Configuration {
    let counts = v
        .iter()
        .map(|&x| x.round().clamp(0.0, b.max_count as f64) as u32)
        .collect();
    Configuration::from_counts(b.asset_types, b.stations, counts).expect("dimensions are consistent")
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.0..=hi)).collect()
}

pub const PSO_SWARM: usize = 30;
pub const PSO_INERTIA: f64 = 0.7;
pub const PSO_COGNITIVE: f64 = 1.5;
pub const PSO_SOCIAL: f64 = 1.5;

pub fn solve_pso(problem: &SearchProblem, seed: u64) -> Result<BenchResult> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(problem);
    let n = problem.dims();
    let hi = problem.bounds.max_count as f64;
    let vmax = hi;
    let mut pos: Vec<Vec<f64>> = (0..PSO_SWARM).map(|_| random_vector(&mut rng, n, hi)).collect();
    let mut vel: Vec<Vec<f64>> = (0..PSO_SWARM)
        .map(|_| (0..n).map(|_| rng.gen_range(-vmax..=vmax) * 0.1).collect())
        .collect();
    let mut best_pos = pos.clone();
    let mut best_val = vec![f64::INFINITY; PSO_SWARM];
    let mut g_pos = pos[0].clone();
    let mut g_val = f64::INFINITY;
    'outer: loop {
        for p in 0..PSO_SWARM {
            let f = ev.eval(&to_config(&pos[p], &problem.bounds));
            if f < best_val[p] {
                best_val[p] = f;
                best_pos[p] = pos[p].clone();
            }
            if f < g_val {
                g_val = f;
                g_pos = pos[p].clone();
            }
            if ev.done() {
                break 'outer;
            }
        }
        for p in 0..PSO_SWARM {
            for d in 0..n {
                let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                let v = PSO_INERTIA * vel[p][d]
                    + PSO_COGNITIVE * r1 * (best_pos[p][d] - pos[p][d])
                    + PSO_SOCIAL * r2 * (g_pos[d] - pos[p][d]);
                vel[p][d] = v.clamp(-vmax, vmax);
                pos[p][d] = (pos[p][d] + vel[p][d]).clamp(0.0, hi);
            }
        }
    }
    Ok(ev.finish(Algorithm::Pso))
}

/// Same operators and rates as the daydreaming GA.
pub fn solve_ga(problem: &SearchProblem, seed: u64) -> Result<BenchResult> {
    problem.validate()?;
    let params = EvolutionParams::default();
    let b = problem.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(problem);
    let mut pop: Vec<(Configuration, f64)> = Vec::with_capacity(params.population);
    for _ in 0..params.population {
        let c = random_config(&mut rng, b.asset_types, b.stations, b.max_count);
        let f = -ev.eval(&c);
        pop.push((c, f));
        if ev.done() {
            return Ok(ev.finish(Algorithm::Ga));
        }
    }
    loop {
        let elite = pop
            .iter()
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .cloned()
            .expect("population is non-empty");
        let mut next = vec![elite];
        while next.len() < params.population {
            let a = tournament(&mut rng, &pop, params.tournament_size);
            let mut child = if b.stations > 1 && rng.gen_bool(params.crossover_rate) {
                let other = tournament(&mut rng, &pop, params.tournament_size);
                column_crossover(a, other, rng.gen_range(1..b.stations))
            } else {
                a.clone()
            };
            mutate(&mut rng, &mut child, params.mutation_rate, b.max_count);
            let f = -ev.eval(&child);
            next.push((child, f));
            if ev.done() {
                return Ok(ev.finish(Algorithm::Ga));
            }
        }
        pop = next;
    }
}

pub const DE_POPULATION: usize = 40;
pub const DE_F: f64 = 0.5;
pub const DE_CR: f64 = 0.9;

/// DE/rand/1/bin.
pub fn solve_de(problem: &SearchProblem, seed: u64) -> Result<BenchResult> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(problem);
    let n = problem.dims();
    let hi = problem.bounds.max_count as f64;
    let mut pop: Vec<Vec<f64>> = (0..DE_POPULATION).map(|_| random_vector(&mut rng, n, hi)).collect();
    let mut vals = Vec::with_capacity(DE_POPULATION);
    for x in &pop {
        vals.push(ev.eval(&to_config(x, &problem.bounds)));
        if ev.done() {
            return Ok(ev.finish(Algorithm::De));
        }
    }
    let idx: Vec<usize> = (0..DE_POPULATION).collect();
    loop {
        for k in 0..DE_POPULATION {
            let others: Vec<usize> = idx
                .choose_multiple(&mut rng, 4)
                .copied()
                .filter(|&o| o != k)
                .take(3)
                .collect();
            let (a, b, c) = (&pop[others[0]], &pop[others[1]], &pop[others[2]]);
            let forced = rng.gen_range(0..n);
            let trial: Vec<f64> = (0..n)
                .map(|d| {
                    if d == forced || rng.gen_bool(DE_CR) {
                        (a[d] + DE_F * (b[d] - c[d])).clamp(0.0, hi)
                    } else {
                        pop[k][d]
                    }
                })
                .collect();
            let f = ev.eval(&to_config(&trial, &problem.bounds));
            if f <= vals[k] {
                pop[k] = trial;
                vals[k] = f;
            }
            if ev.done() {
                return Ok(ev.finish(Algorithm::De));
            }
        }
    }
}

pub const SA_T0: f64 = 100.0;
pub const SA_COOLING: f64 = 0.995;

/// Single-cell ±1 moves, geometric cooling per move.
pub fn solve_sa(problem: &SearchProblem, seed: u64) -> Result<BenchResult> {
    problem.validate()?;
    let b = problem.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(problem);
    let mut x = random_config(&mut rng, b.asset_types, b.stations, b.max_count);
    let mut fx = ev.eval(&x);
    let mut temp = SA_T0;
    while !ev.done() {
        let mut y = x.clone();
        let (i, j) = (rng.gen_range(0..b.asset_types), rng.gen_range(0..b.stations));
        let c = y.get(i, j);
        let next = if c == 0 || (c < b.max_count && rng.gen_bool(0.5)) {
            c + 1
        } else {
            c - 1
        };
        y.set(i, j, next.min(b.max_count));
        let fy = ev.eval(&y);
        if fy <= fx || rng.gen::<f64>() < (-(fy - fx) / temp).exp() {
            x = y;
            fx = fy;
        }
        temp = (temp * SA_COOLING).max(1e-12);
    }
    Ok(ev.finish(Algorithm::Sa))
}

pub const ICA_COUNTRIES: usize = 40;
pub const ICA_IMPERIALISTS: usize = 4;
/// Assimilation coefficient.
pub const ICA_BETA: f64 = 2.0;
pub const ICA_REVOLUTION: f64 = 0.1;
/// Weight of colonies in an empire's total cost.
pub const ICA_XI: f64 = 0.1;

struct Empire {
    imperialist: (Vec<f64>, f64),
    colonies: Vec<(Vec<f64>, f64)>,
}

impl Empire {
    fn total_cost(&self) -> f64 {
        let mean = if self.colonies.is_empty() {
            0.0
        } else {
            self.colonies.iter().map(|c| c.1).sum::<f64>() / self.colonies.len() as f64
        };
        self.imperialist.1 + ICA_XI * mean
    }
}

/// Imperialist competitive algorithm: assimilation, revolution, position
/// exchange and imperialistic competition.
pub fn solve_ica(problem: &SearchProblem, seed: u64) -> Result<BenchResult> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(problem);
    let n = problem.dims();
    let hi = problem.bounds.max_count as f64;
    let mut countries = Vec::with_capacity(ICA_COUNTRIES);
    for _ in 0..ICA_COUNTRIES {
        let x = random_vector(&mut rng, n, hi);
        let f = ev.eval(&to_config(&x, &problem.bounds));
        countries.push((x, f));
        if ev.done() {
            return Ok(ev.finish(Algorithm::Ica));
        }
    }
    countries.sort_by(|a, b| a.1.total_cmp(&b.1));
    let colonies = countries.split_off(ICA_IMPERIALISTS);
    let mut empires: Vec<Empire> = countries
        .into_iter()
        .map(|imp| Empire {
            imperialist: imp,
            colonies: Vec::new(),
        })
        .collect();
    // colonies are dealt round-robin, strongest empire first
    for (k, c) in colonies.into_iter().enumerate() {
        let e = k % empires.len();
        empires[e].colonies.push(c);
    }
    loop {
        for empire in &mut empires {
            for col in &mut empire.colonies {
                for d in 0..n {
                    let step = ICA_BETA * rng.gen::<f64>() * (empire.imperialist.0[d] - col.0[d]);
                    col.0[d] = (col.0[d] + step).clamp(0.0, hi);
                    if rng.gen_bool(ICA_REVOLUTION) {
                        col.0[d] = rng.gen_range(0.0..=hi);
                    }
                }
                col.1 = ev.eval(&to_config(&col.0, &problem.bounds));
                if ev.done() {
                    return Ok(ev.finish(Algorithm::Ica));
                }
            }
            if let Some(best) = empire.colonies.iter_mut().min_by(|a, b| a.1.total_cmp(&b.1)) {
                if best.1 < empire.imperialist.1 {
                    std::mem::swap(best, &mut empire.imperialist);
                }
            }
        }
        if empires.len() > 1 {
            // the weakest empire loses its weakest colony to an empire drawn
            // with probability proportional to normalized power
            let costs: Vec<f64> = empires.iter().map(Empire::total_cost).collect();
            let weakest = (0..empires.len())
                .max_by(|&a, &b| costs[a].total_cmp(&costs[b]))
                .expect("non-empty");
            let worst_cost = costs[weakest];
            let power: Vec<f64> = costs.iter().map(|c| worst_cost - c + 1e-9).collect();
            let total: f64 = power.iter().sum();
            let mut pick = rng.gen::<f64>() * total;
            let mut winner = 0;
            for (k, p) in power.iter().enumerate() {
                if pick <= *p {
                    winner = k;
                    break;
                }
                pick -= p;
            }
            let loser = &mut empires[weakest];
            let moved = if loser.colonies.is_empty() {
                None
            } else {
                let w = (0..loser.colonies.len())
                    .max_by(|&a, &b| loser.colonies[a].1.total_cmp(&loser.colonies[b].1))
                    .expect("non-empty");
                Some(loser.colonies.swap_remove(w))
            };
            if let Some(c) = moved {
                if winner != weakest {
                    empires[winner].colonies.push(c);
                } else {
                    empires[weakest].colonies.push(c);
                }
            }
            // an empire without colonies collapses into the winner
            if empires[weakest].colonies.is_empty() && winner != weakest {
                let fallen = empires.remove(weakest);
                let w = if winner > weakest { winner - 1 } else { winner };
                empires[w].colonies.push(fallen.imperialist);
            }
        }
    }
}

/// Trained sampler used by [`solve_diffusion`].
pub struct DiffusionSetup<'a> {
    pub model: &'a dyn NoiseEstimator,
    pub schedule: &'a NoiseSchedule,
    pub codec: Codec,
    pub w: f64,
}

/// Draw batches of [`DIFFUSION_BATCH`] until one sample lands in the target
/// class; every sample counts as one evaluation.
pub fn solve_diffusion(problem: &SearchProblem, setup: &DiffusionSetup<'_>, seed: u64) -> Result<BenchResult> {
    problem.validate()?;
    let start = Instant::now();
    let mut evaluations = 0u64;
    let mut round = 0u64;
    loop {
        let req = SampleRequest {
            class: problem.target,
            w: setup.w,
            count: DIFFUSION_BATCH,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(round),
            snapshot_steps: Vec::new(),
        };
        let out = sample(setup.model, setup.schedule, &req, &setup.codec, &problem.bounds)?;
        round += 1;
        for c in out.configs {
            evaluations += 1;
            if capacity_class(&c, &problem.skills) == problem.target {
                return Ok(BenchResult {
                    algorithm: Algorithm::Diffusion,
                    target: problem.target,
                    elapsed: start.elapsed().as_secs_f64(),
                    success: true,
                    found: Some(c),
                    evaluations,
                });
            }
        }
        if start.elapsed().as_secs_f64() >= problem.timeout {
            return Ok(BenchResult {
                algorithm: Algorithm::Diffusion,
                target: problem.target,
                elapsed: problem.timeout,
                success: false,
                found: None,
                evaluations,
            });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pso,
    Ga,
    De,
    Sa,
    Ica,
    Diffusion,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Pso,
        Algorithm::Ga,
        Algorithm::De,
        Algorithm::Sa,
        Algorithm::Ica,
        Algorithm::Diffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pso => "pso",
            Algorithm::Ga => "ga",
            Algorithm::De => "de",
            Algorithm::Sa => "sa",
            Algorithm::Ica => "ica",
            Algorithm::Diffusion => "diffusion",
        }
    }

    /// Row label of the results table.
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Pso => "Particle Swarm Optimization",
            Algorithm::Ga => "Genetic Algorithm",
            Algorithm::De => "Differential Evolution",
            Algorithm::Sa => "Simulated Annealing",
            Algorithm::Ica => "Imperial Competitive Algorithm",
            Algorithm::Diffusion => "Diffusion Model",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown algorithm {s:?}")))
    }
}

pub fn solve(
    algorithm: Algorithm,
    problem: &SearchProblem,
    diffusion: Option<&DiffusionSetup<'_>>,
    seed: u64,
) -> Result<BenchResult> {
    match algorithm {
        Algorithm::Pso => solve_pso(problem, seed),
        Algorithm::Ga => solve_ga(problem, seed),
        Algorithm::De => solve_de(problem, seed),
        Algorithm::Sa => solve_sa(problem, seed),
        Algorithm::Ica => solve_ica(problem, seed),
        Algorithm::Diffusion => {
            let setup = diffusion.ok_or_else(|| Error::invalid("the diffusion solver needs a trained model"))?;
            solve_diffusion(problem, setup, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub algorithm: Algorithm,
    pub target: CapacityClass,
    /// Mean elapsed seconds over repeats, failures counted at the timeout.
    pub mean_elapsed: f64,
    pub successes: usize,
    pub repeats: usize,
    pub mean_evaluations: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub targets: Vec<CapacityClass>,
    pub algorithms: Vec<Algorithm>,
    pub timeout: f64,
    pub cells: Vec<BenchCell>,
}

impl BenchTable {
    pub fn cell(&self, algorithm: Algorithm, target: CapacityClass) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.target == target)
    }

    /// Targets as columns, algorithms as rows; cells where every repeat
    /// timed out read `>T`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm");
        for t in &self.targets {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for &a in &self.algorithms {
            out.push_str(a.label());
            for &t in &self.targets {
                match self.cell(a, t) {
                    Some(c) if c.successes == 0 => out.push_str(&format!(",>{}", self.timeout)),
                    Some(c) => out.push_str(&format!(",{:.4}", c.mean_elapsed)),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Every (algorithm, target) pair `repeats` times; repeat `r` uses seed
/// `seed + r`.
pub fn run_bench(
    targets: &[CapacityClass],
    algorithms: &[Algorithm],
    repeats: usize,
    base: &SearchProblem,
    diffusion: Option<&DiffusionSetup<'_>>,
    seed: u64,
    mut on_result: impl FnMut(&BenchResult),
) -> Result<BenchTable> {
    if repeats < 1 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut cells = Vec::with_capacity(targets.len() * algorithms.len());
    for &algorithm in algorithms {
        for &target in targets {
            let problem = SearchProblem { target, ..base.clone() };
            let mut elapsed = 0.0;
            let mut evaluations = 0.0;
            let mut successes = 0;
            for r in 0..repeats {
                let res = solve(algorithm, &problem, diffusion, seed.wrapping_add(r as u64))?;
                on_result(&res);
                elapsed += res.elapsed;
                evaluations += res.evaluations as f64;
                successes += res.success as usize;
            }
            cells.push(BenchCell {
                algorithm,
                target,
                mean_elapsed: elapsed / repeats as f64,
                successes,
                repeats,
                mean_evaluations: evaluations / repeats as f64,
            });
        }
    }
    Ok(BenchTable {
        targets: targets.to_vec(),
        algorithms: algorithms.to_vec(),
        timeout: base.timeout,
        cells,
    })
}
