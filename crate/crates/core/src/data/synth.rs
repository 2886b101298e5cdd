use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Labels, Split, TaskDefinition};
use crate::error::{Error, Result};
use crate::model::TaskId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gaussian-cluster classification tasks.
///
/// Class `c` of task `t` is centred at
/// `separation · (similarity · shared_c + (1 − similarity) · own_{t,c})`
/// with standard-normal centre draws and unit-variance noise, so
/// `similarity = 1` gives every task the same clusters and `0` gives
/// independent ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub separation: f64,
    pub similarity: f64,
    pub per_class: usize,
    pub seed: u64,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// One dataset per task; task `t` is named `s{t}` and owns source classes
/// `t·C .. (t+1)·C`. Samples cycle through the classes.
pub fn synth_tasks<S: Scalar>(spec: &SynthSpec) -> Result<Vec<(TaskDefinition, Dataset<S>)>> {
    if spec.dim < 1 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(Error::invalid("separation must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.similarity) {
        return Err(Error::invalid("similarity must be in [0, 1]"));
    }
    if spec.tasks == 0 || spec.classes_per_task == 0 || spec.per_class == 0 {
        return Err(Error::invalid("tasks, classes and sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared: Vec<Vec<f64>> = (0..spec.classes_per_task)
        .map(|_| normal_vec(&mut rng, spec.dim))
        .collect();
    let mut out = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let centres: Vec<Vec<f64>> = shared
            .iter()
            .map(|sh| {
                let own = normal_vec(&mut rng, spec.dim);
                sh.iter()
                    .zip(own)
                    .map(|(&a, b)| {
                        spec.separation * (spec.similarity * a + (1.0 - spec.similarity) * b)
                    })
                    .collect()
            })
            .collect();
        let n = spec.per_class * spec.classes_per_task;
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.classes_per_task;
            labels.push(c);
            data.extend(
                centres[c]
                    .iter()
                    .map(|&m| S::lit(m + rng.sample::<f64, _>(StandardNormal))),
            );
        }
        let first = (t * spec.classes_per_task) as u32;
        let classes: Vec<u32> = (first..first + spec.classes_per_task as u32).collect();
        let ds = Dataset::new(
            Tensor::new(vec![n, spec.dim], data)?,
            vec![spec.dim],
            Labels::Single(labels),
            classes.clone(),
            Split::Train,
        )?;
        out.push((
            TaskDefinition {
                id: TaskId::new(format!("s{t}")),
                classes,
                multi_label: false,
            },
            ds,
        ));
    }
    Ok(out)
}

/// Independent Bernoulli labels on Gaussian features: each positive label
/// adds `separation` times its own random unit direction to the sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelSpec {
    pub labels: usize,
    pub dim: usize,
    pub samples: usize,
    pub positive_rate: f64,
    pub separation: f64,
    pub seed: u64,
}

pub fn synth_multilabel<S: Scalar>(spec: &MultiLabelSpec) -> Result<Dataset<S>> {
    if spec.dim < 1 || spec.labels == 0 || spec.samples == 0 {
        return Err(Error::invalid(
            "labels, dimension and samples must be positive",
        ));
    }
    if !(0.0..=1.0).contains(&spec.positive_rate) {
        return Err(Error::invalid("positive rate must be in [0, 1]"));
    }
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(Error::invalid("separation must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs: Vec<Vec<f64>> = (0..spec.labels)
        .map(|_| {
            let v = normal_vec(&mut rng, spec.dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut flags = Vec::with_capacity(spec.samples * spec.labels);
    for _ in 0..spec.samples {
        let mut x = normal_vec(&mut rng, spec.dim);
        for d in &dirs {
            let on = rng.random_bool(spec.positive_rate);
            flags.push(on);
            if on {
                x.iter_mut()
                    .zip(d)
                    .for_each(|(a, &b)| *a += spec.separation * b);
            }
        }
        data.extend(x.into_iter().map(S::lit));
    }
    Dataset::new(
        Tensor::new(vec![spec.samples, spec.dim], data)?,
        vec![spec.dim],
        Labels::Multi {
            flags,
            labels: spec.labels,
        },
        (0..spec.labels as u32).collect(),
        Split::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::class_split;

    fn spec() -> SynthSpec {
        SynthSpec {
            tasks: 2,
            classes_per_task: 3,
            dim: 4,
            separation: 50.0,
            similarity: 0.0,
            per_class: 20,
            seed: 9,
        }
    }

    #[test]
    fn separable_limit_is_linearly_separable() {
        for (_, ds) in synth_tasks::<f64>(&spec()).unwrap() {
            // nearest class mean is a linear classifier
            let c = ds.label_count();
            let Labels::Single(lbl) = ds.labels() else {
                unreachable!()
            };
            let mut means = vec![vec![0.0; 4]; c];
            for i in 0..ds.len() {
                means[lbl[i]]
                    .iter_mut()
                    .zip(ds.inputs().row(i))
                    .for_each(|(m, &x)| *m += x / 20.0);
            }
            for (i, &want) in lbl.iter().enumerate() {
                let x = ds.inputs().row(i);
                let d = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..c)
                    .min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b])))
                    .unwrap();
                assert_eq!(best, want);
            }
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = synth_tasks::<f64>(&spec()).unwrap();
        let b = synth_tasks::<f64>(&spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].1.class_counts(), vec![20, 20, 20]);
        assert_eq!(a[1].0.classes, vec![3, 4, 5]);
        let mut bad = spec();
        bad.dim = 0;
        assert!(synth_tasks::<f64>(&bad).is_err());
        bad = spec();
        bad.separation = 0.0;
        assert!(synth_tasks::<f64>(&bad).is_err());
    }

    #[test]
    fn similarity_one_shares_clusters() {
        let mut s = spec();
        s.similarity = 1.0;
        let t = synth_tasks::<f64>(&s).unwrap();
        let mean =
            |d: &Dataset<f64>| d.inputs().data().iter().sum::<f64>() / d.inputs().len() as f64;
        assert!((mean(&t[0].1) - mean(&t[1].1)).abs() < 1.0);
    }

    #[test]
    fn multilabel_split_shares_images() {
        let d: Dataset<f64> = synth_multilabel(&MultiLabelSpec {
            labels: 6,
            dim: 5,
            samples: 40,
            positive_rate: 0.3,
            separation: 3.0,
            seed: 1,
        })
        .unwrap();
        let parts = class_split(
            &d,
            &[("a".into(), vec![0, 1, 2]), ("b".into(), vec![3, 4, 5])],
        )
        .unwrap();
        for (def, ds) in &parts {
            assert!(def.multi_label);
            assert_eq!(ds.len(), 40);
            assert_eq!(ds.inputs(), d.inputs());
            assert_eq!(ds.label_count(), 3);
        }
        let t = parts[1].1.targets(&[7]).unwrap();
        assert_eq!(t.data(), &d.targets(&[7]).unwrap().data()[3..]);
    }
}
