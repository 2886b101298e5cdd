use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Labels, TaskDefinition};
use crate::error::{Error, Result};
use crate::model::TaskId;
use crate::scalar::Scalar;

/// Builds one task per class subset.
///
/// Single-label data: each sample goes to the task owning its class and is
/// re-labelled by the class's position in the subset; samples of classes
/// outside every subset are dropped. Multi-label data: every task keeps
/// all samples and only its own label columns.
pub fn class_split<S: Scalar>(
    dataset: &Dataset<S>,
    partition: &[(TaskId, Vec<u32>)],
) -> Result<Vec<(TaskDefinition, Dataset<S>)>> {
    let multi = dataset.is_multi_label();
    let mut seen = BTreeSet::new();
    for (task, classes) in partition {
        if classes.is_empty() {
            return Err(Error::invalid(format!("task {task} has no classes")));
        }
        for c in classes {
            if !dataset.label_space().contains(c) {
                return Err(Error::invalid(format!(
                    "class {c} of task {task} is not in the label space"
                )));
            }
            if !seen.insert(*c) && !multi {
                return Err(Error::invalid(format!(
                    "class {c} appears in more than one task"
                )));
            }
        }
    }
    let local_of = |src: u32| {
        dataset
            .label_space()
            .iter()
            .position(|&c| c == src)
            .expect("validated")
    };
    let mut out = Vec::with_capacity(partition.len());
    for (task, classes) in partition {
        let def = TaskDefinition {
            id: task.clone(),
            classes: classes.clone(),
            multi_label: multi,
        };
        let cols: Vec<usize> = classes.iter().map(|&c| local_of(c)).collect();
        let ds = match dataset.labels() {
            Labels::Single(cls) => {
                let mut idx = Vec::new();
                let mut labels = Vec::new();
                for (i, &c) in cls.iter().enumerate() {
                    if let Some(k) = cols.iter().position(|&col| col == c) {
                        idx.push(i);
                        labels.push(k);
                    }
                }
                if idx.is_empty() {
                    return Err(Error::invalid(format!("task {task} has no samples")));
                }
                let inputs = dataset.inputs().select_rows(&idx)?;
                Dataset::new(
                    inputs,
                    dataset.sample_shape().to_vec(),
                    Labels::Single(labels),
                    classes.clone(),
                    dataset.split(),
                )?
            }
            Labels::Multi { flags, labels } => {
                let n = dataset.len();
                let mut f = Vec::with_capacity(n * cols.len());
                for i in 0..n {
                    f.extend(cols.iter().map(|&c| flags[i * labels + c]));
                }
                Dataset::new(
                    dataset.inputs().clone(),
                    dataset.sample_shape().to_vec(),
                    Labels::Multi {
                        flags: f,
                        labels: cols.len(),
                    },
                    classes.clone(),
                    dataset.split(),
                )?
            }
        };
        out.push((def, ds));
    }
    Ok(out)
}

/// Groups of row indices sampled jointly: one per class for single-label
/// data, a single group otherwise.
fn strata<S: Scalar>(dataset: &Dataset<S>) -> Vec<Vec<usize>> {
    match dataset.labels() {
        Labels::Single(cls) => {
            let mut groups = vec![Vec::new(); dataset.label_count()];
            for (i, &c) in cls.iter().enumerate() {
                groups[c].push(i);
            }
            groups.retain(|g| !g.is_empty());
            groups
        }
        Labels::Multi { .. } => vec![(0..dataset.len()).collect()],
    }
}

/// Stratified draw of `round(fraction·N)` rows: each stratum gets
/// `floor(fraction·size)` rows and the remaining rows go to the largest
/// remainders (ties to the earlier stratum). Returned indices are sorted.
fn stratified_indices<S: Scalar>(
    dataset: &Dataset<S>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let groups = strata(dataset);
    let total = (fraction * dataset.len() as f64).round() as usize;
    let exact: Vec<f64> = groups.iter().map(|g| fraction * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = quota.iter().sum();
    for &g in order.iter().take(total.saturating_sub(assigned)) {
        quota[g] += 1;
    }
    if let Some(g) = quota.iter().position(|&q| q == 0) {
        return Err(Error::invalid(format!(
            "fraction {fraction} leaves no sample for stratum {g} of {}",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(total);
    for (group, &q) in groups.iter().zip(&quota) {
        let mut g = group.clone();
        g.shuffle(&mut rng);
        picked.extend_from_slice(&g[..q]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Class-stratified sample without replacement, deterministic per seed.
pub fn subsample<S: Scalar>(dataset: &Dataset<S>, fraction: f64, seed: u64) -> Result<Dataset<S>> {
    let idx = stratified_indices(dataset, fraction, seed)?;
    dataset.subset(&idx)
}

/// Splits off a stratified `fraction` of the rows; returns
/// `(remaining, held_out)` with the held-out part tagged `split`.
pub fn stratified_holdout<S: Scalar>(
    dataset: &Dataset<S>,
    fraction: f64,
    seed: u64,
    split: super::Split,
) -> Result<(Dataset<S>, Dataset<S>)> {
    let held = stratified_indices(dataset, fraction, seed)?;
    if held.len() == dataset.len() {
        return Err(Error::invalid("holdout would leave no samples"));
    }
    let mut is_held = vec![false; dataset.len()];
    held.iter().for_each(|&i| is_held[i] = true);
    let rest: Vec<usize> = (0..dataset.len()).filter(|&i| !is_held[i]).collect();
    Ok((
        dataset.subset(&rest)?,
        dataset.subset(&held)?.with_split(split),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy;
    use super::super::Split;
    use super::*;

    #[test]
    fn split_routes_and_reindexes() {
        let d = toy(3, 10);
        let parts = class_split(
            &d,
            &[
                ("lo".into(), (0..5).collect()),
                ("hi".into(), (5..10).collect()),
            ],
        )
        .unwrap();
        assert_eq!(parts[0].1.len() + parts[1].1.len(), d.len());
        let hi = &parts[1].1;
        // original class 7 is local label 2
        let Labels::Single(orig) = d.labels() else {
            unreachable!()
        };
        let first7 = orig.iter().position(|&c| c == 7).unwrap();
        let row = d.inputs().row(first7);
        let k = (0..hi.len()).find(|&i| hi.inputs().row(i) == row).unwrap();
        let Labels::Single(local) = hi.labels() else {
            unreachable!()
        };
        assert_eq!(local[k], 2);
        assert_eq!(hi.label_space(), &[5, 6, 7, 8, 9]);
        assert!(class_split(&d, &[("a".into(), vec![1, 2]), ("b".into(), vec![2, 3])]).is_err());
        assert!(class_split(&d, &[("a".into(), vec![11])]).is_err());
    }

    #[test]
    fn subsample_is_stratified_and_deterministic() {
        let d = toy(100, 10);
        let s = subsample(&d, 0.1, 5).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.class_counts(), vec![10; 10]);
        assert_eq!(s, subsample(&d, 0.1, 5).unwrap());
        assert_ne!(s, subsample(&d, 0.1, 6).unwrap());
        assert_eq!(subsample(&d, 1.0, 1).unwrap(), d);
        assert!(subsample(&d, 0.001, 1).is_err());
        assert!(subsample(&d, 0.0, 1).is_err());
    }

    #[test]
    fn holdout_partitions_rows() {
        let d = toy(20, 5);
        let (rest, held) = stratified_holdout(&d, 0.1, 3, Split::Val).unwrap();
        assert_eq!(held.len(), 10);
        assert_eq!(rest.len(), 90);
        assert_eq!(held.split(), Split::Val);
        assert_eq!(held.class_counts(), vec![2; 5]);
    }
}
