//! Gallery embeddings, exhaustive Euclidean ranking and acc@k.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use crate::dataset::{decode_image, decode_image_bytes, LogoRecord};
use crate::error::{Error, Result};
use crate::model::LogoNetModel;
use crate::tensor::Tensor;

/// Immutable `[G, D]` embedding matrix with aligned instance ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    instance_ids: Vec<String>,
    embeddings: Tensor,
    fingerprint: String,
}

impl Gallery {
    pub fn new(
        instance_ids: Vec<String>,
        embeddings: Tensor,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let g = instance_ids.len();
        match embeddings.shape() {
            [rows, _] if *rows == g => {}
            other => return Err(Error::shape("gallery", other, &[g, 0])),
        }
        let mut seen = HashSet::new();
        for id in &instance_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(
                    "gallery",
                    format!("duplicate instance_id {id}"),
                ));
            }
        }
        Ok(Gallery {
            instance_ids,
            embeddings,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Fingerprint of the model that produced the embeddings.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn position(&self, instance_id: &str) -> Option<usize> {
        self.instance_ids.iter().position(|i| i == instance_id)
    }

    /// Warning text when `model` is not the one that built this gallery.
    pub fn fingerprint_mismatch(&self, model: &LogoNetModel) -> Option<String> {
        let fp = model.fingerprint();
        (fp != self.fingerprint).then(|| {
            format!(
                "gallery was built by model {} but the loaded model is {fp}",
                self.fingerprint
            )
        })
    }
}

/// Embeds a list of `[C, S, S]` images as one batch.
pub fn embed_images(model: &LogoNetModel, images: &[&Tensor]) -> Result<Tensor> {
    let batch = Tensor::stack(images)?;
    model.embed(&batch)
}

/// Decodes and embeds every logo; `root` is the dataset root the image
/// paths are relative to.
pub fn build_gallery(model: &LogoNetModel, logos: &[LogoRecord], root: &Path) -> Result<Gallery> {
    if logos.is_empty() {
        return Err(Error::invalid("build_gallery", "no logos"));
    }
    let ids: Vec<String> = logos.iter().map(|l| l.instance_id.clone()).collect();
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::invalid(
            "build_gallery",
            format!("duplicate instance_id {dup}"),
        ));
    }
    let cfg = model.config();
    let images = logos
        .iter()
        .map(|l| decode_image(root.join(&l.image_path), cfg.input_channels, cfg.input_size))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    Gallery::new(ids, embed_images(model, &refs)?, model.fingerprint())
}

/// Ranked gallery for one query, ascending by distance.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub entries: Vec<(String, f64)>,
    /// 1-based position of the ground-truth instance, when known.
    pub rank_of_truth: Option<usize>,
}

/// Euclidean distance to every gallery row, accumulated in f64.
pub fn distances(gallery: &Gallery, query: &[f32]) -> Result<Vec<f64>> {
    let d = gallery.dim();
    if query.len() != d {
        return Err(Error::shape("rank", &[query.len()], &[d]));
    }
    Ok(gallery
        .embeddings
        .data()
        .chunks_exact(d)
        .map(|row| {
            row.iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Exhaustive ranking; equal distances keep gallery order.
pub fn rank(gallery: &Gallery, query: &[f32]) -> Result<RankedResult> {
    let dist = distances(gallery, query)?;
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap_or(Ordering::Equal));
    Ok(RankedResult {
        entries: order
            .into_iter()
            .map(|i| (gallery.instance_ids[i].clone(), dist[i]))
            .collect(),
        rank_of_truth: None,
    })
}

/// [`rank`] with the truth position filled in.
pub fn rank_with_truth(gallery: &Gallery, query: &[f32], truth: &str) -> Result<RankedResult> {
    let mut r = rank(gallery, query)?;
    r.rank_of_truth = r
        .entries
        .iter()
        .position(|(id, _)| id == truth)
        .map(|p| p + 1);
    Ok(r)
}

/// Fraction of results whose truth is within the top `k`.
pub fn acc_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("acc_at_k", "k must be at least 1"));
    }
    if results.is_empty() {
        return Err(Error::invalid("acc_at_k", "no results"));
    }
    let mut hits = 0usize;
    for (i, r) in results.iter().enumerate() {
        let rank = r
            .rank_of_truth
            .ok_or_else(|| Error::invalid("acc_at_k", format!("result {i} has no ground truth")))?;
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Rounds to four decimals, the precision used in reports and responses.
pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Top-`k` matches for an encoded query image, preprocessed exactly as
/// at evaluation time.
pub fn query_image(
    model: &LogoNetModel,
    gallery: &Gallery,
    encoded: &[u8],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 || k > gallery.len() {
        return Err(Error::invalid(
            "query",
            format!("k must be in 1..={}, got {k}", gallery.len()),
        ));
    }
    let cfg = model.config();
    let image = decode_image_bytes(encoded, cfg.input_channels, cfg.input_size, "query")?;
    let emb = embed_images(model, &[&image])?;
    let mut ranked = rank(gallery, emb.data())?;
    ranked.entries.truncate(k);
    Ok(ranked.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(rows: &[[f32; 2]]) -> Gallery {
        let ids = (0..rows.len()).map(|i| format!("g{i}")).collect();
        let data = rows.iter().flatten().copied().collect();
        Gallery::new(ids, Tensor::new(vec![rows.len(), 2], data).unwrap(), "fp").unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let g = gallery(&[[0.0, 1.0], [3.0, 4.0], [1.0, 1.0]]);
        let r = rank_with_truth(&g, &[3.0, 4.0], "g1").unwrap();
        assert_eq!(r.entries[0], ("g1".to_string(), 0.0));
        assert_eq!(r.rank_of_truth, Some(1));
    }

    #[test]
    fn hand_computed_order() {
        // distances from origin: 1, 5, sqrt(2)
        let g = gallery(&[[0.0, 1.0], [3.0, 4.0], [1.0, 1.0]]);
        let r = rank(&g, &[0.0, 0.0]).unwrap();
        let ids: Vec<_> = r.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(ids, ["g0", "g2", "g1"]);
        assert_eq!(r.entries[2].1, 5.0);
    }

    #[test]
    fn ties_keep_insertion_order() {
        let g = gallery(&[[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0]]);
        let r = rank(&g, &[0.0, 0.0]).unwrap();
        let ids: Vec<_> = r.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(ids, ["g0", "g1", "g2"]);
    }

    #[test]
    fn counting() {
        let mk = |r| RankedResult {
            entries: vec![],
            rank_of_truth: Some(r),
        };
        let rs = [mk(1), mk(6), mk(11)];
        assert!((acc_at_k(&rs, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((acc_at_k(&rs, 5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((acc_at_k(&rs, 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let missing = [RankedResult {
            entries: vec![],
            rank_of_truth: None,
        }];
        assert!(acc_at_k(&missing, 1).is_err());
        assert!(acc_at_k(&rs, 0).is_err());
    }

    #[test]
    fn gallery_invariants() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        assert!(Gallery::new(vec!["a".into(), "a".into()], t.clone(), "f").is_err());
        assert!(Gallery::new(vec!["a".into()], t, "f").is_err());
        let g = gallery(&[[1.0, 0.0]]);
        assert!(rank(&g, &[1.0, 0.0, 0.0]).is_err());
    }
}
