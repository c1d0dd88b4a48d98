//! N-k class-incremental scenarios and per-step label filtering.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// 1-based class identifier; 0 is reserved for background.
pub type ClassId = u32;

/// Partition of `{1..total_classes}` into a base step of `N` classes followed
/// by increments of `k` classes each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub total_classes: u32,
    pub base_count: u32,
    pub increment_count: u32,
    pub steps: Vec<Vec<ClassId>>,
}

/// Class groups used for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroups {
    pub base: Vec<ClassId>,
    pub intermediary: Vec<ClassId>,
    pub new: Vec<ClassId>,
    pub all: Vec<ClassId>,
}

pub fn build_scenario(total_classes: u32, base: u32, increment: u32) -> Result<ScenarioSpec> {
    if base == 0 || increment == 0 || total_classes == 0 {
        return Err(Error::invalid(format!(
            "scenario needs positive sizes (total={total_classes}, N={base}, k={increment})"
        )));
    }
    if base > total_classes || (total_classes - base) % increment != 0 {
        return Err(Error::invalid(format!(
            "cannot split total={total_classes} classes as N={base} base classes plus increments of k={increment}"
        )));
    }
    let mut steps = vec![(1..=base).collect::<Vec<_>>()];
    let mut next = base + 1;
    while next <= total_classes {
        steps.push((next..next + increment).collect());
        next += increment;
    }
    Ok(ScenarioSpec {
        total_classes,
        base_count: base,
        increment_count: increment,
        steps,
    })
}

impl ScenarioSpec {
    /// Parses the `N-k` shorthand, e.g. `"15-5"` with 20 classes.
    pub fn parse(name: &str, total_classes: u32) -> Result<Self> {
        let (n, k) = name
            .split_once('-')
            .ok_or_else(|| Error::invalid(format!("scenario `{name}` is not of the form N-k")))?;
        let n: u32 = n
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("scenario `{name}`: bad N")))?;
        let k: u32 = k
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("scenario `{name}`: bad k")))?;
        build_scenario(total_classes, n, k)
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.base_count, self.increment_count)
    }

    /// Index of the last step, `T`.
    pub fn last_step(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn step(&self, t: usize) -> Result<&[ClassId]> {
        self.steps.get(t).map(Vec::as_slice).ok_or_else(|| {
            Error::invalid(format!(
                "step {t} out of range for scenario {} with steps 0..={}",
                self.name(),
                self.last_step()
            ))
        })
    }

    /// Classes seen up to and including step `t`.
    pub fn seen_classes(&self, t: usize) -> Vec<ClassId> {
        self.steps.iter().take(t + 1).flatten().copied().collect()
    }

    /// The scenario as seen after step `t`: steps `0..=t` over the classes
    /// introduced so far.
    pub fn truncated(&self, t: usize) -> Result<ScenarioSpec> {
        self.step(t)?;
        Ok(ScenarioSpec {
            total_classes: self.seen_classes(t).len() as u32,
            base_count: self.base_count,
            increment_count: self.increment_count,
            steps: self.steps[..=t].to_vec(),
        })
    }

    pub fn step_of(&self, class: ClassId) -> Option<usize> {
        self.steps.iter().position(|s| s.contains(&class))
    }

    pub fn groups(&self) -> ClassGroups {
        let t = self.last_step();
        let base = self.steps[0].clone();
        let (intermediary, new) = if t == 0 {
            (Vec::new(), Vec::new())
        } else {
            (
                self.steps[1..t].iter().flatten().copied().collect(),
                self.steps[t].clone(),
            )
        };
        ClassGroups {
            base,
            intermediary,
            new,
            all: (1..=self.total_classes).collect(),
        }
    }

    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (t, s) in self.steps.iter().enumerate() {
            let expected = if t == 0 {
                self.base_count
            } else {
                self.increment_count
            };
            if s.len() as u32 != expected {
                return Err(Error::invalid(format!("step {t} has {} classes, expected {expected}", s.len())));
            }
            for &c in s {
                if c == 0 || !seen.insert(c) {
                    return Err(Error::invalid(format!("class {c} repeated or reserved")));
                }
            }
        }
        if seen != (1..=self.total_classes).collect() {
            return Err(Error::invalid("steps do not cover all classes"));
        }
        Ok(())
    }
}

/// Keeps the images holding at least one current-step object and strips
/// every annotation outside the current step.
pub fn filter_step(dataset: &Dataset, spec: &ScenarioSpec, t: usize) -> Result<Dataset> {
    let current: BTreeSet<ClassId> = spec.step(t)?.iter().copied().collect();
    let samples = dataset
        .samples
        .iter()
        .filter_map(|s| {
            let kept: Vec<_> = s
                .annotations
                .iter()
                .filter(|a| current.contains(&a.class_id))
                .cloned()
                .collect();
            (!kept.is_empty()).then(|| {
                let mut s = s.clone();
                s.annotations = kept;
                s
            })
        })
        .collect();
    Ok(Dataset {
        samples,
        class_catalog: dataset.class_catalog.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageSample, InstanceAnnotation};
    use crate::mask::BinaryMask;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn voc_scenarios() {
        let s = build_scenario(20, 15, 5).unwrap();
        assert_eq!(s.steps, vec![(1..=15).collect::<Vec<_>>(), (16..=20).collect()]);
        let s = build_scenario(20, 19, 1).unwrap();
        assert_eq!(s.steps, vec![(1..=19).collect::<Vec<_>>(), vec![20]]);
        let s = build_scenario(20, 15, 1).unwrap();
        assert_eq!(s.steps.len(), 6);
        assert_eq!(s.steps[1..], [vec![16], vec![17], vec![18], vec![19], vec![20]]);
        let g = s.groups();
        assert_eq!(g.intermediary, vec![16, 17, 18, 19]);
        assert_eq!(g.new, vec![20]);
    }

    #[test]
    fn indivisible_split_names_inputs() {
        let err = build_scenario(20, 15, 2).unwrap_err().to_string();
        assert!(err.contains("N=15") && err.contains("k=2") && err.contains("total=20"), "{err}");
    }

    #[test]
    fn parse_shorthand() {
        assert_eq!(ScenarioSpec::parse("3-1", 4).unwrap().steps, vec![vec![1, 2, 3], vec![4]]);
        assert!(ScenarioSpec::parse("3", 4).is_err());
    }

    fn sample(id: &str, classes: &[ClassId]) -> ImageSample {
        let annotations = classes
            .iter()
            .map(|&c| {
                let mut m = BinaryMask::zeros(8, 8);
                m.set(1, 1, true);
                InstanceAnnotation::new(c, m).unwrap()
            })
            .collect();
        ImageSample {
            image_id: id.into(),
            pixels: Array3::zeros((3, 8, 8)),
            annotations,
        }
    }

    fn dataset(samples: Vec<ImageSample>) -> Dataset {
        Dataset {
            samples,
            class_catalog: (1..=20).map(|c| (c, format!("c{c}"))).collect(),
        }
    }

    #[test]
    fn background_shift_filtering() {
        let spec = build_scenario(20, 15, 5).unwrap();
        let ds = dataset(vec![sample("a", &[3, 16]), sample("b", &[3])]);
        let f = filter_step(&ds, &spec, 1).unwrap();
        assert_eq!(f.samples.len(), 1);
        assert_eq!(f.samples[0].image_id, "a");
        assert_eq!(f.samples[0].annotations.len(), 1);
        assert_eq!(f.samples[0].annotations[0].class_id, 16);

        let only_new = dataset(vec![sample("c", &[16, 20]), sample("d", &[17])]);
        assert!(filter_step(&only_new, &spec, 0).unwrap().samples.is_empty());
        assert!(filter_step(&ds, &spec, 2).is_err());
    }

    proptest! {
        #[test]
        fn built_scenarios_partition(total in 1u32..40, base in 1u32..40, k in 1u32..10) {
            if let Ok(spec) = build_scenario(total, base, k) {
                prop_assert!(spec.validate().is_ok());
                prop_assert_eq!(base + spec.last_step() as u32 * k, total);
            } else {
                prop_assert!(base > total || (total - base) % k != 0);
            }
        }

        #[test]
        fn filtered_steps_only_hold_current_classes(
            images in proptest::collection::vec(proptest::collection::vec(1u32..=8, 0..5), 1..12),
            t in 0usize..3,
        ) {
            let spec = build_scenario(8, 4, 2).unwrap();
            let ds = dataset(images.iter().enumerate().map(|(i, c)| sample(&i.to_string(), c)).collect());
            let f = filter_step(&ds, &spec, t).unwrap();
            let cur = spec.step(t).unwrap();
            for s in &f.samples {
                prop_assert!(!s.annotations.is_empty());
                prop_assert!(s.annotations.iter().all(|a| cur.contains(&a.class_id)));
            }
            let expected = images.iter().filter(|c| c.iter().any(|x| cur.contains(x))).count();
            prop_assert_eq!(f.samples.len(), expected);
        }
    }
}
