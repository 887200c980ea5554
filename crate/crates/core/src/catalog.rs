//! Validated set of degradation configurations.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::degradation::{DegradationVector, Factor, Split, TaskConfig};
use crate::{Error, Result};

pub const EXPECTED_TOTAL: usize = 44;
pub const EXPECTED_SEEN: usize = 21;
pub const EXPECTED_UNSEEN: usize = 22;

/// Per-order config counts for one split (index = order).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OrderCounts(pub [usize; 5]);

impl OrderCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    configs: Vec<TaskConfig>,
}

impl Catalog {
    /// Validates the full set of constraints a benchmark catalog must meet.
    pub fn new(configs: Vec<TaskConfig>) -> Result<Self> {
        if configs.len() != EXPECTED_TOTAL {
            return Err(Error::Catalog(format!("count ≠ 44: catalog lists {} configs", configs.len())));
        }
        let mut names = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for c in &configs {
            c.check()?;
            if !names.insert(c.name.clone()) {
                return Err(Error::Catalog(format!("duplicate config name {}", c.name)));
            }
            if !labels.insert(c.label) {
                return Err(Error::Catalog(format!("config {} repeats factor set {}", c.name, c.label.bits())));
            }
        }
        let cat = Self { configs };
        let (clean, seen, unseen) = (cat.count(Split::Clean), cat.count(Split::Seen), cat.count(Split::Unseen));
        if (clean, seen, unseen) != (1, EXPECTED_SEEN, EXPECTED_UNSEEN) {
            return Err(Error::Catalog(format!(
                "expected 1 clean / {EXPECTED_SEEN} seen / {EXPECTED_UNSEEN} unseen, got {clean} / {seen} / {unseen}"
            )));
        }
        for f in Factor::ALL {
            let single = DegradationVector::from_factors(&[f]);
            if !cat.configs.iter().any(|c| c.label == single && c.split == Split::Seen) {
                return Err(Error::Catalog(format!("single-factor config for {} must be seen", f.name())));
            }
        }
        for c in &cat.configs {
            let ok = match c.split {
                Split::Clean => c.order == 0,
                Split::Seen => (1..=3).contains(&c.order),
                Split::Unseen => (2..=4).contains(&c.order),
            };
            if !ok {
                return Err(Error::Catalog(format!("config {} has order {} not allowed for {}", c.name, c.order, c.split.name())));
            }
        }
        for anchor in [[Factor::LowLight, Factor::Blur], [Factor::LowLight, Factor::Artifact]] {
            let v = DegradationVector::from_factors(&anchor);
            if !cat.configs.iter().any(|c| c.label == v && c.split == Split::Unseen) {
                return Err(Error::Catalog(format!("unseen set must contain {}+{}", anchor[0].name(), anchor[1].name())));
            }
        }
        Ok(cat)
    }

    pub fn configs(&self) -> &[TaskConfig] {
        &self.configs
    }

    pub fn count(&self, split: Split) -> usize {
        self.configs.iter().filter(|c| c.split == split).count()
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &TaskConfig> {
        self.configs.iter().filter(move |c| c.split == split)
    }

    pub fn get(&self, name: &str) -> Option<&TaskConfig> {
        self.configs.iter().find(|c| c.name == name)
    }

    pub fn clean(&self) -> &TaskConfig {
        self.by_split(Split::Clean).next().expect("validated catalog has a clean config")
    }

    /// The clean config followed by every seen config: the aligned training task set.
    pub fn training_tasks(&self) -> Vec<&TaskConfig> {
        let mut v = alloc::vec![self.clean()];
        v.extend(self.by_split(Split::Seen));
        v
    }

    pub fn degraded(&self) -> impl Iterator<Item = &TaskConfig> {
        self.configs.iter().filter(|c| c.split != Split::Clean)
    }

    pub fn order_counts(&self, split: Split) -> OrderCounts {
        let mut o = OrderCounts::default();
        for c in self.by_split(split) {
            o.0[c.order] += 1;
        }
        o
    }

    /// Checks declared per-order counts against the configs.
    pub fn check_declared(&self, split: Split, declared: OrderCounts) -> Result<()> {
        let actual = self.order_counts(split);
        if actual != declared {
            return Err(Error::Catalog(format!(
                "{} per-order counts {:?} differ from declared {:?}",
                split.name(),
                actual.0,
                declared.0
            )));
        }
        Ok(())
    }

    /// Names in catalog order.
    pub fn names(&self) -> Vec<String> {
        self.configs.iter().map(|c| c.name.clone()).collect()
    }
}
