use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{Sample, SplitTag};
use super::{substream, STREAM_SPLIT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub n_repeats: usize,
    #[serde(default)]
    pub group_by_reference: bool,
}

impl SplitPlan {
    fn preset(seed: u64, train: f64, val: f64, test: f64, n_repeats: usize) -> Self {
        Self {
            seed,
            fractions: SplitFractions { train, val, test },
            n_repeats,
            group_by_reference: false,
        }
    }

    /// 80/20 train/test with a tenth of the training part held out, ten times.
    pub fn iqa(seed: u64) -> Self {
        Self::preset(seed, 0.72, 0.08, 0.20, 10)
    }

    pub fn lamem(seed: u64) -> Self {
        Self::preset(seed, 0.75, 0.05, 0.20, 5)
    }

    pub fn emotion_roi(seed: u64) -> Self {
        Self::preset(seed, 0.75, 0.05, 0.20, 5)
    }

    pub fn emoset(seed: u64) -> Self {
        Self::preset(seed, 0.80, 0.05, 0.15, 1)
    }

    /// Standard protocol of a task kind.
    pub fn for_task(kind: crate::task::TaskKind, seed: u64) -> Self {
        match kind {
            crate::task::TaskKind::Iqa => Self::iqa(seed),
            crate::task::TaskKind::Memorability => Self::lamem(seed),
            crate::task::TaskKind::Emotion => Self::emoset(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions;
        if [f.train, f.val, f.test].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("split.fractions", "each fraction must lie in [0, 1]"));
        }
        if (f.train + f.val + f.test - 1.0).abs() > 1e-6 {
            return Err(Error::config("split.fractions", "fractions must sum to 1"));
        }
        if f.train <= 0.0 || f.test <= 0.0 {
            return Err(Error::config("split.fractions", "train and test must be non-empty"));
        }
        if self.n_repeats == 0 {
            return Err(Error::config("split.n_repeats", "must be at least 1"));
        }
        Ok(())
    }

    /// Test size is taken from the whole set; validation from what remains.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let f = self.fractions;
        let test = ((n as f64) * f.test).round() as usize;
        let rest = n - test.min(n);
        let val = if f.train + f.val > 0.0 {
            ((rest as f64) * f.val / (f.train + f.val)).round() as usize
        } else {
            0
        };
        (rest - val.min(rest), val.min(rest), test.min(n))
    }
}

/// Indices into the sample list for one repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub repeat: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn name(&self) -> String {
        format!("split_{}", self.repeat)
    }

    pub fn part(&self, tag: SplitTag) -> &[usize] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    /// Samples with `split_tag` set from this split's membership.
    pub fn tagged(&self, samples: &[Sample]) -> Vec<Sample> {
        let mut out = samples.to_vec();
        for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
            for &i in self.part(tag) {
                out[i].split_tag = Some(tag);
            }
        }
        out
    }

    fn sorted(mut self) -> Self {
        self.train.sort_unstable();
        self.val.sort_unstable();
        self.test.sort_unstable();
        self
    }
}

/// Partitions `samples` `n_repeats` times.
///
/// When every sample carries a `split_tag` the manifest split is returned
/// as-is, once. Otherwise each repeat draws its own seeded permutation.
pub fn make_splits(samples: &[Sample], plan: &SplitPlan) -> Result<Vec<Split>> {
    plan.validate()?;
    let tagged = samples.iter().filter(|s| s.split_tag.is_some()).count();
    if tagged == samples.len() && !samples.is_empty() {
        return external_split(samples).map(|s| vec![s]);
    }
    if tagged > 0 {
        return Err(Error::Data(format!(
            "{tagged} of {} samples carry a split tag; tag all or none",
            samples.len()
        )));
    }
    if plan.group_by_reference && samples.iter().any(|s| s.reference_id.is_none()) {
        return Err(Error::Data(
            "group_by_reference requested but reference_id is missing".into(),
        ));
    }

    let (n_train, n_val, n_test) = plan.counts(samples.len());
    if n_train == 0 || n_test == 0 || (plan.fractions.val > 0.0 && n_val == 0) {
        return Err(Error::Data(format!(
            "{} samples are too few for a {}/{}/{} split",
            samples.len(),
            plan.fractions.train,
            plan.fractions.val,
            plan.fractions.test
        )));
    }

    (0..plan.n_repeats)
        .map(|repeat| {
            let mut rng = substream(plan.seed, STREAM_SPLIT, repeat as u64);
            let split = if plan.group_by_reference {
                grouped(samples, n_val, n_test, &mut rng, repeat)
            } else {
                let mut order: Vec<usize> = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                Split {
                    repeat,
                    test: order[..n_test].to_vec(),
                    val: order[n_test..n_test + n_val].to_vec(),
                    train: order[n_test + n_val..].to_vec(),
                }
            };
            if split.train.is_empty() || split.test.is_empty() {
                return Err(Error::Data(format!(
                    "repeat {repeat}: too few reference groups for the requested split"
                )));
            }
            Ok(split.sorted())
        })
        .collect()
}

/// Whole reference groups are assigned to test, then val, then train, in a
/// seeded order, until each part reaches its target size.
fn grouped(
    samples: &[Sample],
    n_val: usize,
    n_test: usize,
    rng: &mut impl rand::Rng,
    repeat: usize,
) -> Split {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups
            .entry(s.reference_id.as_deref().unwrap_or_default())
            .or_default()
            .push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(rng);
    let mut split = Split {
        repeat,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for g in groups {
        if split.test.len() < n_test {
            split.test.extend(g);
        } else if split.val.len() < n_val {
            split.val.extend(g);
        } else {
            split.train.extend(g);
        }
    }
    split
}

fn external_split(samples: &[Sample]) -> Result<Split> {
    let mut split = Split {
        repeat: 0,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        match s.split_tag {
            Some(SplitTag::Train) => split.train.push(i),
            Some(SplitTag::Val) => split.val.push(i),
            Some(SplitTag::Test) => split.test.push(i),
            None => unreachable!("checked by caller"),
        }
    }
    if split.train.is_empty() {
        return Err(Error::Data("external split has no training samples".into()));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Label;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                image_path: format!("{i}.png").into(),
                label: Label::Score(i as f64),
                dataset_id: "d".into(),
                reference_id: Some(format!("ref{}", i / 4)),
                split_tag: None,
            })
            .collect()
    }

    fn assert_partition(split: &Split, n: usize) {
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn iqa_counts() {
        let splits = make_splits(&samples(100), &SplitPlan::iqa(7)).unwrap();
        assert_eq!(splits.len(), 10);
        for s in &splits {
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (72, 8, 20));
            assert_partition(s, 100);
        }
        assert_ne!(splits[0], splits[1]);
        assert_eq!(splits, make_splits(&samples(100), &SplitPlan::iqa(7)).unwrap());
        assert_ne!(splits, make_splits(&samples(100), &SplitPlan::iqa(8)).unwrap());
    }

    #[test]
    fn preset_counts() {
        assert_eq!(SplitPlan::emoset(0).counts(1000), (800, 50, 150));
        assert_eq!(SplitPlan::lamem(0).counts(1000), (750, 50, 200));
    }

    #[test]
    fn reference_groups_stay_together() {
        let s = samples(100);
        let plan = SplitPlan {
            group_by_reference: true,
            ..SplitPlan::iqa(3)
        };
        for split in make_splits(&s, &plan).unwrap() {
            assert_partition(&split, 100);
            let part_of = |i: usize| {
                if split.train.contains(&i) {
                    0
                } else if split.val.contains(&i) {
                    1
                } else {
                    2
                }
            };
            for g in 0..25 {
                let parts: HashSet<_> = (g * 4..g * 4 + 4).map(part_of).collect();
                assert_eq!(parts.len(), 1, "group {g} straddles splits");
            }
        }
    }

    #[test]
    fn grouping_without_references_fails() {
        let mut s = samples(10);
        s[3].reference_id = None;
        let plan = SplitPlan {
            group_by_reference: true,
            ..SplitPlan::iqa(0)
        };
        assert!(matches!(make_splits(&s, &plan), Err(Error::Data(_))));
    }

    #[test]
    fn external_tags_are_used_verbatim() {
        let mut s = samples(5);
        let tags = [SplitTag::Train, SplitTag::Test, SplitTag::Train, SplitTag::Val, SplitTag::Test];
        for (x, t) in s.iter_mut().zip(tags) {
            x.split_tag = Some(t);
        }
        let splits = make_splits(&s, &SplitPlan::iqa(0)).unwrap();
        assert_eq!(splits.len(), 1);
        assert_eq!(splits[0].train, vec![0, 2]);
        assert_eq!(splits[0].val, vec![3]);
        assert_eq!(splits[0].test, vec![1, 4]);
        s[0].split_tag = None;
        assert!(make_splits(&s, &SplitPlan::iqa(0)).is_err());
    }

    #[test]
    fn too_few_samples() {
        assert!(make_splits(&samples(2), &SplitPlan::iqa(0)).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition(n in 20usize..200, seed in any::<u64>(), grouped in any::<bool>()) {
            let plan = SplitPlan { group_by_reference: grouped, ..SplitPlan::lamem(seed) };
            let s = samples(n);
            for split in make_splits(&s, &plan).unwrap() {
                assert_partition(&split, n);
                if !grouped {
                    let (a, b, c) = plan.counts(n);
                    prop_assert_eq!((split.train.len(), split.val.len(), split.test.len()), (a, b, c));
                }
            }
        }
    }
}
