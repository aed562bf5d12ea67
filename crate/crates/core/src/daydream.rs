//! Training-data generation: randomized future scenarios explored with a
//! genetic algorithm whose every evaluated individual is archived.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    capacity, capacity_class, Bounds, CapacityClass, Configuration, SkillProfile, MACHINE_RATE, SKILL_RATES,
};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
/// Number of asset types (counted from the last) staffed by humans.
pub const DEFAULT_HUMAN_TYPES: usize = 2;

/// One imagined future: a skill profile the line has to live with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub skills: SkillProfile,
    pub seed: u64,
}

impl Scenario {
    /// Machines keep [`MACHINE_RATE`]; each human type draws high, moderate
    /// or low skill uniformly.
    pub fn random(id: u64, seed: u64, asset_types: usize, human_types: usize) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rates = vec![MACHINE_RATE; asset_types];
        let first_human = asset_types.saturating_sub(human_types);
        for r in &mut rates[first_human..] {
            *r = *SKILL_RATES.choose(&mut rng).expect("non-empty");
        }
        Scenario {
            id,
            skills: SkillProfile::new(rates),
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    /// Fitness cost per deployed asset.
    pub asset_penalty: f64,
}

impl Default for Objectives {
    fn default() -> Self {
        Objectives { asset_penalty: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionParams {
    pub generations: usize,
    pub population: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub objectives: Objectives,
    pub bounds: Bounds,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        EvolutionParams {
            generations: 25,
            population: 40,
            tournament_size: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.05,
            objectives: Objectives::default(),
            bounds: Bounds::default(),
        }
    }
}

impl EvolutionParams {
    pub fn validate(&self) -> Result<()> {
        if self.generations < 1 {
            return Err(Error::invalid("generations must be at least 1"));
        }
        if self.population < 2 {
            return Err(Error::invalid("population must be at least 2"));
        }
        if self.tournament_size < 1 {
            return Err(Error::invalid("tournament size must be at least 1"));
        }
        for (name, rate) in [("crossover", self.crossover_rate), ("mutation", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::invalid(format!("{name} rate {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaydreamRecord {
    pub config: Configuration,
    pub capacity_class: CapacityClass,
    pub scenario_id: u64,
    pub generation: usize,
}

/// Every cell independently uniform over `0..=max_count`.
pub fn random_config<R: Rng + ?Sized>(
    rng: &mut R,
    asset_types: usize,
    stations: usize,
    max_count: u32,
) -> Configuration {
    let counts = (0..asset_types * stations)
        .map(|_| rng.gen_range(0..=max_count))
        .collect();
    Configuration::from_counts(asset_types, stations, counts).expect("dimensions are consistent")
}

/// Capacity minus the weighted asset count.
pub fn fitness(config: &Configuration, scenario: &Scenario, objectives: &Objectives) -> f64 {
    capacity(config, &scenario.skills) as f64 - objectives.asset_penalty * config.total_assets() as f64
}

pub(crate) fn tournament<'a, R: Rng>(rng: &mut R, pop: &'a [(Configuration, f64)], k: usize) -> &'a Configuration {
    let mut best = &pop[rng.gen_range(0..pop.len())];
    for _ in 1..k {
        let challenger = &pop[rng.gen_range(0..pop.len())];
        if challenger.1 > best.1 {
            best = challenger;
        }
    }
    &best.0
}

/// Columns before the cut come from `a`, the rest from `b`.
pub(crate) fn column_crossover(a: &Configuration, b: &Configuration, cut: usize) -> Configuration {
    let mut child = a.clone();
    for i in 0..a.asset_types() {
        for j in cut..a.stations() {
            child.set(i, j, b.get(i, j));
        }
    }
    child
}

pub(crate) fn mutate<R: Rng>(rng: &mut R, config: &mut Configuration, rate: f64, max_count: u32) {
    for i in 0..config.asset_types() {
        for j in 0..config.stations() {
            if rng.gen_bool(rate) {
                let c = config.get(i, j);
                let next = if rng.gen_bool(0.5) {
                    c.saturating_sub(1)
                } else {
                    (c + 1).min(max_count)
                };
                config.set(i, j, next);
            }
        }
    }
}

/// Run the GA for a fixed number of generations and archive every
/// individual of every generation, `generations * population` records.
///
/// The initial population mixes densities: each individual draws its own
/// per-cell ceiling in `1..=max_count` before sampling cells, so the archive
/// spans sparse, low-capacity lines as well as saturated ones.
pub fn evolve(scenario: &Scenario, params: &EvolutionParams) -> Result<Vec<DaydreamRecord>> {
    params.validate()?;
    let b = params.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let evaluate = |c: Configuration| {
        let f = fitness(&c, scenario, &params.objectives);
        (c, f)
    };

    let mut pop: Vec<(Configuration, f64)> = (0..params.population)
        .map(|_| {
            let density = rng.gen_range(1..=b.max_count.max(1)).min(b.max_count);
            evaluate(random_config(&mut rng, b.asset_types, b.stations, density))
        })
        .collect();

    let mut records = Vec::with_capacity(params.generations * params.population);
    for generation in 0..params.generations {
        records.extend(pop.iter().map(|(c, _)| DaydreamRecord {
            config: c.clone(),
            capacity_class: capacity_class(c, &scenario.skills),
            scenario_id: scenario.id,
            generation,
        }));
        if generation + 1 == params.generations {
            break;
        }

        // elitism: the best individual survives unchanged
        let elite = pop
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, f)| (c.clone(), *f))
            .expect("population is non-empty");
        let mut next = Vec::with_capacity(params.population);
        next.push(elite);
        while next.len() < params.population {
            let a = tournament(&mut rng, &pop, params.tournament_size);
            let mut child = if b.stations > 1 && rng.gen_bool(params.crossover_rate) {
                let other = tournament(&mut rng, &pop, params.tournament_size);
                column_crossover(a, other, rng.gen_range(1..b.stations))
            } else {
                a.clone()
            };
            mutate(&mut rng, &mut child, params.mutation_rate, b.max_count);
            next.push(evaluate(child));
        }
        pop = next;
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    #[serde(rename = "I")]
    pub asset_types: usize,
    #[serde(rename = "J")]
    pub stations: usize,
    #[serde(rename = "C_max")]
    pub max_count: u32,
    pub seed: u64,
    #[serde(default)]
    pub human_types: usize,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaydreamDataset {
    pub header: DatasetHeader,
    pub records: Vec<DaydreamRecord>,
}

/// Record count per capacity class, in class order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassHistogram(pub BTreeMap<CapacityClass, usize>);

impl ClassHistogram {
    pub fn of(records: &[DaydreamRecord]) -> Self {
        let mut h = BTreeMap::new();
        for r in records {
            *h.entry(r.capacity_class).or_insert(0) += 1;
        }
        ClassHistogram(h)
    }

    /// Median over the classes that occur at least once.
    pub fn median(&self) -> usize {
        let mut counts: Vec<usize> = self.0.values().copied().collect();
        if counts.is_empty() {
            return 0;
        }
        counts.sort_unstable();
        counts[(counts.len() - 1) / 2]
    }

    pub fn render(&self) -> String {
        let total: usize = self.0.values().sum();
        let peak = self.0.values().copied().max().unwrap_or(1).max(1);
        let mut out = String::new();
        for (class, &n) in &self.0 {
            let bar = "#".repeat((n * 40).div_ceil(peak));
            out.push_str(&format!(
                "{:>4} {:>7} {:>5.1}% {}\n",
                class.value(),
                n,
                100.0 * n as f64 / total.max(1) as f64,
                bar
            ));
        }
        out
    }
}

impl DaydreamDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn histogram(&self) -> ClassHistogram {
        ClassHistogram::of(&self.records)
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            asset_types: self.header.asset_types,
            stations: self.header.stations,
            max_count: self.header.max_count,
        }
    }

    pub fn scenario(&self, id: u64) -> Option<&Scenario> {
        self.header.scenarios.iter().find(|s| s.id == id)
    }

    /// Subsample so no class holds more than `max_ratio` times the median
    /// class count. Surviving records keep their original order.
    pub fn balance(&mut self, max_ratio: f64, seed: u64) {
        let hist = self.histogram();
        let cap = (hist.median() as f64 * max_ratio).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = vec![true; self.records.len()];
        for (&class, &n) in &hist.0 {
            if n <= cap {
                continue;
            }
            let mut idx: Vec<usize> = self
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.capacity_class == class)
                .map(|(k, _)| k)
                .collect();
            idx.shuffle(&mut rng);
            for &k in &idx[cap..] {
                keep[k] = false;
            }
        }
        let mut k = 0;
        self.records.retain(|_| {
            k += 1;
            keep[k - 1]
        });
    }
}

/// Derives one scenario seed per run from the dataset seed.
pub fn scenario_seeds(seed: u64, runs: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..runs).map(|_| rng.gen()).collect()
}

/// Concatenate `evolve` over `runs` independent scenarios.
pub fn build_dataset(runs: usize, params: &EvolutionParams, seed: u64, human_types: usize) -> Result<DaydreamDataset> {
    if runs < 1 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    params.validate()?;
    let b = params.bounds;
    let scenarios: Vec<Scenario> = scenario_seeds(seed, runs)
        .into_iter()
        .enumerate()
        .map(|(id, s)| Scenario::random(id as u64, s, b.asset_types, human_types))
        .collect();
    let mut records = Vec::with_capacity(runs * params.generations * params.population);
    for scenario in &scenarios {
        records.extend(evolve(scenario, params)?);
    }
    Ok(DaydreamDataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            asset_types: b.asset_types,
            stations: b.stations,
            max_count: b.max_count,
            seed,
            human_types,
            scenarios,
        },
        records,
    })
}
