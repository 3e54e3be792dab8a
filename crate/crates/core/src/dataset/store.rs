use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;

use super::image::decode_image;
use super::manifest::DatasetManifest;
use crate::error::Result;
use crate::tensor::Tensor;

/// Every logo and sketch of a manifest decoded once, at the model's input
/// resolution.
#[derive(Clone, Debug)]
pub struct ImageStore {
    channels: usize,
    size: usize,
    logos: HashMap<String, Tensor>,
    sketches: HashMap<String, Tensor>,
}

impl ImageStore {
    pub fn load(manifest: &DatasetManifest, channels: usize, size: usize) -> Result<Self> {
        let decode_all = |items: Vec<(String, PathBuf)>| -> Result<HashMap<String, Tensor>> {
            items
                .into_par_iter()
                .map(|(id, path)| Ok((id, decode_image(&path, channels, size)?)))
                .collect()
        };
        let logos = decode_all(
            manifest
                .logos()
                .iter()
                .map(|l| (l.instance_id.clone(), manifest.logo_path(l)))
                .collect(),
        )?;
        let sketches = decode_all(
            manifest
                .sketches()
                .iter()
                .map(|s| (s.sketch_id.clone(), manifest.sketch_path(s)))
                .collect(),
        )?;
        Ok(ImageStore {
            channels,
            size,
            logos,
            sketches,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn logo(&self, instance_id: &str) -> Option<&Tensor> {
        self.logos.get(instance_id)
    }

    pub fn sketch(&self, sketch_id: &str) -> Option<&Tensor> {
        self.sketches.get(sketch_id)
    }
}
