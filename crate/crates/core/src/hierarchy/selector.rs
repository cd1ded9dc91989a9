//! Subgoal selection strategies, looked up by name.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::manager::{compose_subgoal, select_subgoals, ManagerPolicy, Subgoal};
use crate::error::{Error, Result};
use crate::numerics::{CatMixture, Matrix};
use crate::skills::SkillBank;

pub trait GoalSelector: Send + Sync {
    fn name(&self) -> &'static str;

    fn select(
        &self,
        manager: &ManagerPolicy,
        bank: &SkillBank,
        states: &Matrix,
        rng: &mut dyn RngCore,
        greedy: bool,
    ) -> Result<Subgoal>;
}

/// The learned manager.
#[derive(Clone, Copy, Debug, Default)]
pub struct ManagerSelector;

impl GoalSelector for ManagerSelector {
    fn name(&self) -> &'static str {
        "mrs"
    }

    fn select(
        &self,
        manager: &ManagerPolicy,
        bank: &SkillBank,
        states: &Matrix,
        rng: &mut dyn RngCore,
        greedy: bool,
    ) -> Result<Subgoal> {
        select_subgoals(manager, bank, states, rng, greedy)
    }
}

/// Skills drawn from the uniform prior and a uniformly random head.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomSelector;

impl GoalSelector for RandomSelector {
    fn name(&self) -> &'static str {
        "random"
    }

    fn select(
        &self,
        _manager: &ManagerPolicy,
        bank: &SkillBank,
        states: &Matrix,
        rng: &mut dyn RngCore,
        _greedy: bool,
    ) -> Result<Subgoal> {
        let prior = CatMixture::uniform(bank.latent(), states.rows());
        let latents = (0..bank.len())
            .map(|_| prior.sample(rng).map(|s| s.onehot))
            .collect::<Result<Vec<_>>>()?;
        let choices = (0..states.rows()).map(|_| rng.random_range(0..bank.len())).collect();
        compose_subgoal(bank, states, latents, choices)
    }
}

pub struct SelectorRegistry {
    selectors: BTreeMap<&'static str, Box<dyn GoalSelector>>,
}

impl Default for SelectorRegistry {
    fn default() -> Self {
        let mut r = SelectorRegistry {
            selectors: BTreeMap::new(),
        };
        r.register(Box::new(ManagerSelector));
        r.register(Box::new(RandomSelector));
        r
    }
}

impl SelectorRegistry {
    pub fn register(&mut self, selector: Box<dyn GoalSelector>) {
        self.selectors.insert(selector.name(), selector);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.selectors.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<&dyn GoalSelector> {
        self.selectors.get(name).map(|s| s.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown goal selector {name:?}; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}
