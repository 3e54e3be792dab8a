use rand::Rng;

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor_sketch_id: String,
    pub positive_logo_id: String,
    pub negative_logo_id: String,
}

/// Uniform random triplets over one split.
///
/// The anchor is a uniformly drawn sketch of the split, the positive its own
/// logo, and the negative a uniformly drawn different instance among those
/// present in the split.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    anchors: Vec<(String, usize)>,
    instances: Vec<String>,
}

impl TripletSampler {
    pub fn new(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut instances: Vec<String> = Vec::new();
        let mut anchors = Vec::new();
        for s in manifest.sketches_in(split) {
            let idx = match instances.iter().position(|i| *i == s.instance_id) {
                Some(i) => i,
                None => {
                    instances.push(s.instance_id.clone());
                    instances.len() - 1
                }
            };
            anchors.push((s.sketch_id.clone(), idx));
        }
        if anchors.is_empty() {
            return Err(Error::invalid(
                "sample_triplets",
                format!("{split} split is empty"),
            ));
        }
        if instances.len() < 2 {
            return Err(Error::invalid(
                "sample_triplets",
                format!(
                    "{split} split has {} instance(s), need at least 2",
                    instances.len()
                ),
            ));
        }
        Ok(TripletSampler { anchors, instances })
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Triplet {
        let (sketch, pos) = &self.anchors[rng.random_range(0..self.anchors.len())];
        // draw from the other G - 1 instances without rejection
        let mut neg = rng.random_range(0..self.instances.len() - 1);
        if neg >= *pos {
            neg += 1;
        }
        Triplet {
            anchor_sketch_id: sketch.clone(),
            positive_logo_id: self.instances[*pos].clone(),
            negative_logo_id: self.instances[neg].clone(),
        }
    }

    /// Endless stream of triplets driven by `rng`.
    pub fn sample_triplets<'a, R: Rng>(
        &'a self,
        rng: &'a mut R,
    ) -> impl Iterator<Item = Triplet> + 'a {
        std::iter::repeat_with(move || self.sample(rng))
    }
}
