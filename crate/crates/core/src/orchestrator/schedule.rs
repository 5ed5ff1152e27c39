use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{experiment_key, ExperimentConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePlan {
    /// Experiment keys in execution order.
    pub order: Vec<String>,
    /// Position of each scheduled experiment in the input list.
    pub indices: Vec<usize>,
    pub model_load_count: usize,
}

/// Number of maximal runs of consecutive identical models.
pub fn model_load_count<'a>(models: impl IntoIterator<Item = &'a str>) -> usize {
    let mut count = 0;
    let mut prev: Option<&str> = None;
    for m in models {
        if prev != Some(m) {
            count += 1;
            prev = Some(m);
        }
    }
    count
}

/// Batches up to this size are scheduled exactly when grouping alone
/// cannot respect every source-before-perturbation constraint.
const MAX_EXACT: usize = 16;

/// Orders experiments to minimise model loads while running every level-0
/// experiment before the perturbation runs of its outputs.
///
/// Experiments are grouped by the model that produces their outputs and
/// keep their input order inside a group, sources first. Groups are ordered
/// by first appearance, except that a group perturbing another group's
/// outputs is moved after it. When those dependencies form a cycle, small
/// batches are solved exactly by a search over subsets and larger ones fall
/// back to first-appearance order.
pub fn plan_schedule(configs: &[ExperimentConfig]) -> SchedulePlan {
    let identities: Vec<String> = configs.iter().map(|c| c.producing_model().identity()).collect();
    let prereqs = prerequisites(configs);
    let indices = grouped_order(&identities, configs, &prereqs)
        .or_else(|| (configs.len() <= MAX_EXACT).then(|| exact_order(&identities, &prereqs)))
        .unwrap_or_else(|| first_appearance_order(&identities, configs));
    let model_load_count = model_load_count(indices.iter().map(|&i| identities[i].as_str()));
    SchedulePlan { order: indices.iter().map(|&i| experiment_key(&configs[i])).collect(), indices, model_load_count }
}

/// For each experiment, the level-0 experiments in the batch whose outputs
/// it perturbs.
fn prerequisites(configs: &[ExperimentConfig]) -> Vec<Vec<usize>> {
    let keys: Vec<String> = configs.iter().map(experiment_key).collect();
    configs
        .iter()
        .map(|c| {
            if c.perturbation_level == 0 {
                return vec![];
            }
            let source = experiment_key(&c.source_config());
            (0..configs.len()).filter(|&j| configs[j].perturbation_level == 0 && keys[j] == source).collect()
        })
        .collect()
}

/// Producer groups in first-appearance order, members sources first.
fn groups(identities: &[String], configs: &[ExperimentConfig]) -> Vec<Vec<usize>> {
    let mut names: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, id) in identities.iter().enumerate() {
        match names.iter().position(|n| n == id) {
            Some(g) => groups[g].push(i),
            None => {
                names.push(id);
                groups.push(vec![i]);
            }
        }
    }
    for members in &mut groups {
        members.sort_by_key(|&i| configs[i].perturbation_level > 0);
    }
    groups
}

fn first_appearance_order(identities: &[String], configs: &[ExperimentConfig]) -> Vec<usize> {
    groups(identities, configs).concat()
}

/// One load per producing model, or `None` if the groups depend on each
/// other cyclically.
fn grouped_order(identities: &[String], configs: &[ExperimentConfig], prereqs: &[Vec<usize>]) -> Option<Vec<usize>> {
    let groups = groups(identities, configs);
    let mut group_of = vec![0; configs.len()];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            group_of[i] = g;
        }
    }
    let mut deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); groups.len()];
    for (i, sources) in prereqs.iter().enumerate() {
        for &j in sources {
            if group_of[j] != group_of[i] {
                deps[group_of[i]].insert(group_of[j]);
            }
        }
    }
    let mut placed = vec![false; groups.len()];
    let mut order = Vec::with_capacity(configs.len());
    for _ in 0..groups.len() {
        let next = (0..groups.len()).find(|&g| !placed[g] && deps[g].iter().all(|&d| placed[d]))?;
        placed[next] = true;
        order.extend(&groups[next]);
    }
    Some(order)
}

/// Minimum-load order over all orders that respect `prereqs`, by dynamic
/// programming over (set of scheduled experiments, current model).
/// Ties prefer lower input indices.
fn exact_order(identities: &[String], prereqs: &[Vec<usize>]) -> Vec<usize> {
    let n = identities.len();
    let mut names: Vec<&str> = Vec::new();
    let model: Vec<usize> = identities
        .iter()
        .map(|id| {
            names.iter().position(|m| m == id).unwrap_or_else(|| {
                names.push(id);
                names.len() - 1
            })
        })
        .collect();
    let need: Vec<u32> = prereqs.iter().map(|p| p.iter().fold(0, |m, &j| m | 1 << j)).collect();
    let full = (1u32 << n) - 1;
    // best[mask][m]: fewest loads to finish from `mask` with model m loaded
    // (m == names.len() means nothing loaded yet)
    let width = names.len() + 1;
    let mut best = vec![usize::MAX; (full as usize + 1) * width];
    for m in 0..width {
        best[full as usize * width + m] = 0;
    }
    for mask in (0..full).rev() {
        for m in 0..width {
            let mut b = usize::MAX;
            for e in 0..n {
                if mask & (1 << e) != 0 || need[e] & !mask != 0 {
                    continue;
                }
                let rest = best[(mask | 1 << e) as usize * width + model[e]];
                if rest != usize::MAX {
                    b = b.min(rest + usize::from(model[e] != m));
                }
            }
            best[mask as usize * width + m] = b;
        }
    }
    let (mut mask, mut m) = (0u32, names.len());
    let mut order = Vec::with_capacity(n);
    while mask != full {
        let target = best[mask as usize * width + m];
        let e = (0..n)
            .find(|&e| {
                mask & (1 << e) == 0
                    && need[e] & !mask == 0
                    && best[(mask | 1 << e) as usize * width + model[e]].saturating_add(usize::from(model[e] != m))
                        == target
            })
            .expect("a feasible order exists: prerequisites are level-0 experiments");
        order.push(e);
        mask |= 1 << e;
        m = model[e];
    }
    order
}
