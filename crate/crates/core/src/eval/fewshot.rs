use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::trainer::stream_rng;

use super::probe::{linear_probe, mean_std, ProbeConfig};

/// One n-way m-shot task. Indices refer to the feature rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotResult {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub fold_accuracies: Vec<f64>,
    pub episodes: Vec<Episode>,
}

impl FewShotResult {
    /// `fold,accuracy` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("fold,accuracy\n");
        for (i, a) in self.fold_accuracies.iter().enumerate() {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }
}

/// Draw the episode of `fold`: `way` classes among those with at least
/// `shot + query_per_class` members, then disjoint support and query rows
/// per class.
pub fn sample_episode(
    labels: &[usize],
    way: usize,
    shot: usize,
    query_per_class: usize,
    seed: u64,
    fold: usize,
) -> Result<Episode> {
    if way == 0 || shot == 0 || query_per_class == 0 {
        return Err(Error::arg("way, shot and query size must be positive"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let need = shot + query_per_class;
    let eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= need)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < way {
        return Err(Error::arg(format!(
            "{way}-way {shot}-shot with {query_per_class} queries needs {way} classes of {need} samples, found {}",
            eligible.len()
        )));
    }
    let mut rng = stream_rng(seed, "fewshot", fold as u64, 0);
    let mut classes: Vec<usize> = sample(&mut rng, eligible.len(), way).into_iter().map(|i| eligible[i]).collect();
    classes.sort_unstable();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * query_per_class);
    for c in &classes {
        let mut members = by_class[c].clone();
        members.shuffle(&mut rng);
        support.extend_from_slice(&members[..shot]);
        query.extend_from_slice(&members[shot..need]);
    }
    Ok(Episode {
        way,
        shot,
        classes,
        support,
        query,
    })
}

/// Mean and spread of the query accuracy over `n_folds` episodes, each
/// scored by a linear probe fit on its support set.
pub fn fewshot_eval(
    features: &[Vec<f64>],
    labels: &[usize],
    way: usize,
    shot: usize,
    n_folds: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<FewShotResult> {
    if features.len() != labels.len() {
        return Err(Error::arg("one label per feature row"));
    }
    if n_folds == 0 {
        return Err(Error::arg("need at least one fold"));
    }
    let mut fold_accuracies = Vec::with_capacity(n_folds);
    let mut episodes = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let ep = sample_episode(labels, way, shot, query_per_class, seed, fold)?;
        let acc = if way == 1 {
            1.0
        } else {
            let local = |rows: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
                rows.iter()
                    .map(|&i| {
                        let c = ep.classes.binary_search(&labels[i]).expect("episode class");
                        (features[i].clone(), c)
                    })
                    .unzip()
            };
            let (sx, sy) = local(&ep.support);
            let (qx, qy) = local(&ep.query);
            linear_probe(&sx, &sy, &qx, &qy, 1, &ProbeConfig::default())?.accuracy_mean
        };
        fold_accuracies.push(acc);
        episodes.push(ep);
    }
    let (accuracy_mean, accuracy_std) = mean_std(&fold_accuracies);
    Ok(FewShotResult {
        accuracy_mean,
        accuracy_std,
        fold_accuracies,
        episodes,
    })
}
