//! Turning raw samples into ranked, constraint-checked decisions.

use std::cmp::Ordering;

use gms_core::daydream::{fitness, Objectives, Scenario};
use gms_core::domain::{capacity, CapacityClass, Configuration, SkillProfile, MACHINE_RATE};
use gms_core::inquiry::{ConditionClass, SkillLevel};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Satisfies {
    /// Capacity under the reference profile lands in the requested class.
    pub capacity: bool,
    /// Total asset count within the ceiling.
    pub max_machines: bool,
    /// Staffed at the requested skill level the line still reaches the
    /// requested capacity.
    pub skill: bool,
}

impl Satisfies {
    pub fn feasible(&self) -> bool {
        self.max_machines && self.skill
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decision {
    pub id: u64,
    pub config: Configuration,
    pub capacity: u32,
    pub fitness: f64,
    pub total_assets: u32,
    pub satisfies: Satisfies,
}

/// Constraints a decision is checked against.
#[derive(Clone, Debug)]
pub struct Constraints {
    pub class: CapacityClass,
    pub max_machines: Option<u32>,
    pub skill: Option<SkillLevel>,
    /// Profile the model's classes refer to.
    pub reference: SkillProfile,
    pub human_types: usize,
    pub objectives: Objectives,
}

impl Constraints {
    pub fn new(
        triple: &ConditionClass,
        class: CapacityClass,
        reference: SkillProfile,
        human_types: usize,
        objectives: Objectives,
    ) -> Self {
        Constraints {
            class,
            max_machines: triple.max_machines,
            skill: triple.skill,
            reference,
            human_types,
            objectives,
        }
    }

    /// Machines at their fixed rate and every human type at `level`.
    fn staffed(&self, level: SkillLevel) -> SkillProfile {
        let n = self.reference.rates.len();
        let mut rates = vec![MACHINE_RATE; n];
        for r in rates.iter_mut().skip(n.saturating_sub(self.human_types)) {
            *r = level.rate();
        }
        SkillProfile::new(rates)
    }

    pub fn check(&self, config: &Configuration) -> Satisfies {
        let cap = capacity(config, &self.reference);
        Satisfies {
            capacity: cap == self.class.value(),
            max_machines: self.max_machines.is_none_or(|m| config.total_assets() <= m),
            skill: self
                .skill
                .is_none_or(|level| capacity(config, &self.staffed(level)) >= self.class.value()),
        }
    }

    pub fn decide(&self, id: u64, config: Configuration) -> Decision {
        let scenario = Scenario {
            id: 0,
            skills: self.reference.clone(),
            seed: 0,
        };
        Decision {
            id,
            capacity: capacity(&config, &self.reference),
            fitness: fitness(&config, &scenario, &self.objectives),
            total_assets: config.total_assets(),
            satisfies: self.check(&config),
            config,
        }
    }
}

/// Non-increasing fitness, then fewer assets, then smaller id.
pub fn rank(a: &Decision, b: &Decision) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.total_assets.cmp(&b.total_assets))
        .then(a.id.cmp(&b.id))
}

/// Keep feasible decisions, rank them and return the best `count`.
pub fn select(constraints: &Constraints, configs: Vec<Configuration>, count: usize) -> Vec<Decision> {
    let mut decisions: Vec<Decision> = configs
        .into_iter()
        .enumerate()
        .map(|(k, c)| constraints.decide(k as u64, c))
        .filter(|d| d.satisfies.feasible())
        .collect();
    decisions.sort_by(rank);
    decisions.truncate(count);
    decisions
}
