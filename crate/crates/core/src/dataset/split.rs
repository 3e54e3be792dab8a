use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitMode {
    /// Hold out a share of each instance's sketches; every instance keeps at
    /// least one training sketch.
    #[default]
    BySketch,
    /// Hold out whole instances.
    ByInstance,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::BySketch => "by_sketch",
            SplitMode::ByInstance => "by_instance",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_sketch" => Ok(SplitMode::BySketch),
            "by_instance" => Ok(SplitMode::ByInstance),
            other => Err(Error::invalid(
                "split",
                format!("unknown mode {other:?} (expected by_sketch or by_instance)"),
            )),
        }
    }
}

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Returns a copy of `manifest` with every sketch assigned to train or test.
///
/// `BySketch` moves `round(n · fraction)` of an instance's `n` sketches to
/// test, capped at `n - 1`. `ByInstance` moves `round(instances · fraction)`
/// whole instances. Deterministic given `seed`.
pub fn make_split(
    manifest: &DatasetManifest,
    mode: SplitMode,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(
            "split",
            format!("test fraction must be in (0, 1), got {test_fraction}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_instance: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.sketches().iter().enumerate() {
        by_instance
            .entry(s.instance_id.as_str())
            .or_default()
            .push(i);
    }
    let mut test: HashSet<usize> = HashSet::new();
    match mode {
        SplitMode::BySketch => {
            // iterate instances in manifest order for stable rng consumption
            for logo in manifest.logos() {
                let Some(idx) = by_instance.get(logo.instance_id.as_str()) else {
                    continue;
                };
                let n = idx.len();
                let take = ((n as f64 * test_fraction).round() as usize).min(n - 1);
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut rng);
                test.extend(shuffled.into_iter().take(take));
            }
        }
        SplitMode::ByInstance => {
            let mut ids: Vec<&str> = manifest
                .logos()
                .iter()
                .map(|l| l.instance_id.as_str())
                .filter(|id| by_instance.contains_key(id))
                .collect();
            let take = (ids.len() as f64 * test_fraction).round() as usize;
            ids.shuffle(&mut rng);
            for id in ids.into_iter().take(take) {
                test.extend(by_instance[id].iter().copied());
            }
        }
    }
    let n = manifest.sketches().len();
    if test.is_empty() || test.len() == n {
        return Err(Error::invalid(
            "split",
            format!(
                "fraction {test_fraction} with {mode} leaves {} of {n} sketches in test; both sides must be non-empty",
                test.len()
            ),
        ));
    }
    let sketches = manifest
        .sketches()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            s.split = Some(if test.contains(&i) {
                Split::Test
            } else {
                Split::Train
            });
            s
        })
        .collect();
    Ok(manifest.with_sketches(sketches))
}

/// Marks every sketch as training data.
pub fn all_train(manifest: &DatasetManifest) -> DatasetManifest {
    let sketches = manifest
        .sketches()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.split = Some(Split::Train);
            s
        })
        .collect();
    manifest.with_sketches(sketches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::manifest::{LogoRecord, SketchRecord, Subset};

    fn manifest(instances: usize, per: usize) -> DatasetManifest {
        let logos = (0..instances)
            .map(|i| LogoRecord {
                instance_id: format!("l{i}"),
                image_path: format!("images/l{i}.png").into(),
                text_label: None,
            })
            .collect();
        let sketches = (0..instances * per)
            .map(|j| SketchRecord {
                sketch_id: format!("s{j}"),
                instance_id: format!("l{}", j / per),
                path: format!("sketches/s{j}.png").into(),
                subset: Subset::ALL[j % 3],
                split: None,
            })
            .collect();
        DatasetManifest::new("/nowhere", logos, sketches).unwrap()
    }

    fn test_ids(m: &DatasetManifest) -> Vec<String> {
        m.sketches_in(Split::Test)
            .map(|s| s.sketch_id.clone())
            .collect()
    }

    #[test]
    fn by_sketch_takes_quarter_of_four() {
        let m = make_split(&manifest(5, 4), SplitMode::BySketch, 0.25, 1).unwrap();
        for i in 0..5 {
            let id = format!("l{i}");
            let t = m
                .sketches_in(Split::Test)
                .filter(|s| s.instance_id == id)
                .count();
            assert_eq!(t, 1);
        }
    }

    #[test]
    fn same_seed_same_split() {
        let base = manifest(10, 4);
        let a = make_split(&base, SplitMode::BySketch, 0.25, 9).unwrap();
        let b = make_split(&base, SplitMode::BySketch, 0.25, 9).unwrap();
        assert_eq!(test_ids(&a), test_ids(&b));
    }

    #[test]
    fn empty_side_rejected() {
        // one sketch per instance: nothing can move to test by sketch
        assert!(make_split(&manifest(4, 1), SplitMode::BySketch, 0.2, 0).is_err());
        assert!(make_split(&manifest(4, 2), SplitMode::ByInstance, 0.01, 0).is_err());
        assert!(make_split(&manifest(4, 2), SplitMode::BySketch, 1.0, 0).is_err());
    }
}
