//! Retrieval evaluation with the part-based distance: CMC and mAP.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DipError, Result};
use crate::losses::{part_distance, DiPSet};
use crate::model::DipModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::data::Dataset;

/// Images per inference chunk.
const EXTRACT_CHUNK: usize = 64;

/// Per-image parts and weightings with identity and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex<T> {
    pub sets: Vec<DiPSet<T>>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl<T: Scalar> GalleryIndex<T> {
    pub fn new(sets: Vec<DiPSet<T>>, labels: Vec<usize>, cameras: Vec<usize>) -> Result<Self> {
        if sets.len() != labels.len() || sets.len() != cameras.len() {
            return Err(DipError::shape(
                "GalleryIndex",
                format!("{} sets, {} labels, {} cameras", sets.len(), labels.len(), cameras.len()),
            ));
        }
        if let Some(first) = sets.first() {
            if sets.iter().any(|s| s.dips.shape() != first.dips.shape()) {
                return Err(DipError::shape("GalleryIndex", "entries differ in part count or width"));
            }
        }
        Ok(GalleryIndex { sets, labels, cameras })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Deterministic feature extraction without augmentation; positions are dropped.
pub fn extract<T: Scalar>(model: &DipModel<T>, data: &Dataset) -> Result<GalleryIndex<T>> {
    let (h, w) = data.extents()?;
    let cfg = model.patch_config();
    if (h, w, 3) != (cfg.height, cfg.width, cfg.channels) {
        return Err(DipError::ConfigMismatch(format!(
            "images are {h}x{w}x3 but the model expects {}x{}x{}",
            cfg.height, cfg.width, cfg.channels
        )));
    }
    let inf = model.infer(&data.all_tensor()?, EXTRACT_CHUNK)?;
    let (m, d) = (inf.parts.shape()[1], inf.parts.shape()[2]);
    let sets = (0..data.len())
        .map(|i| {
            let dips = Tensor::new(&[m, d], inf.parts.data()[i * m * d..(i + 1) * m * d].to_vec())?;
            DiPSet::new(dips, inf.weights.data()[i * m..(i + 1) * m].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    GalleryIndex::new(sets, data.labels(), data.cameras())
}

/// `Q x G` matrix of part distances.
pub fn distance_matrix<T: Scalar>(queries: &GalleryIndex<T>, gallery: &GalleryIndex<T>) -> Result<Tensor<T>> {
    let rows = queries
        .sets
        .par_iter()
        .map(|q| gallery.sets.iter().map(|g| part_distance(q, g)).collect::<Result<Vec<T>>>())
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[queries.len(), gallery.len()], rows.concat())
}

/// Query and gallery labels for [`cmc_map`].
#[derive(Clone, Copy, Debug)]
pub struct Protocol<'a> {
    pub query_labels: &'a [usize],
    pub query_cameras: &'a [usize],
    pub gallery_labels: &'a [usize],
    pub gallery_cameras: &'a [usize],
    /// Drop gallery entries that share both identity and camera with the query.
    pub camera_filter: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub rank1: f64,
    pub map: f64,
    /// `cmc[k]` is the fraction of queries with a match within the top `k + 1`.
    pub cmc: Vec<f64>,
    /// Filtered gallery order per query.
    #[serde(skip)]
    pub rankings: Vec<Vec<usize>>,
    #[serde(skip)]
    pub average_precision: Vec<f64>,
    #[serde(skip)]
    pub distances: Vec<Vec<f64>>,
}

/// Ranks the gallery per query (ties by gallery index) and scores CMC and mAP.
pub fn cmc_map<T: Scalar>(dist: &Tensor<T>, proto: &Protocol<'_>) -> Result<RankingResult> {
    let (nq, ng) = (proto.query_labels.len(), proto.gallery_labels.len());
    if dist.shape() != [nq, ng] || proto.query_cameras.len() != nq || proto.gallery_cameras.len() != ng {
        return Err(DipError::shape("cmc_map", format!("distances {:?} for {nq} queries and {ng} gallery", dist.shape())));
    }
    let mut cmc_hits = vec![0usize; ng];
    let mut rankings = Vec::with_capacity(nq);
    let mut aps = Vec::with_capacity(nq);
    let mut distances = Vec::with_capacity(nq);
    for q in 0..nq {
        let row: Vec<f64> = dist.data()[q * ng..(q + 1) * ng].iter().map(|v| v.as_f64()).collect();
        let mut order: Vec<usize> = (0..ng)
            .filter(|&g| {
                !(proto.camera_filter
                    && proto.gallery_labels[g] == proto.query_labels[q]
                    && proto.gallery_cameras[g] == proto.query_cameras[q])
            })
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let matches: Vec<bool> = order.iter().map(|&g| proto.gallery_labels[g] == proto.query_labels[q]).collect();
        let Some(first) = matches.iter().position(|&m| m) else {
            return Err(DipError::NoValidMatch { query: q });
        };
        for hit in &mut cmc_hits[first..] {
            *hit += 1;
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &m) in matches.iter().enumerate() {
            if m {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        aps.push(precision_sum / found as f64);
        rankings.push(order);
        distances.push(row);
    }
    let cmc: Vec<f64> = cmc_hits.iter().map(|&h| h as f64 / nq as f64).collect();
    let map = aps.iter().sum::<f64>() / nq as f64;
    Ok(RankingResult { rank1: cmc.first().copied().unwrap_or(0.0), map, cmc, rankings, average_precision: aps, distances })
}

impl RankingResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numbers serialize")
    }

    /// Distance matrix as CSV, one query per row.
    pub fn distances_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.distances {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// Extracts both sides and scores them.
pub fn evaluate<T: Scalar>(model: &DipModel<T>, query: &Dataset, gallery: &Dataset, camera_filter: bool) -> Result<RankingResult> {
    let q = extract(model, query)?;
    let g = extract(model, gallery)?;
    let dist = distance_matrix(&q, &g)?;
    cmc_map(
        &dist,
        &Protocol {
            query_labels: &q.labels,
            query_cameras: &q.cameras,
            gallery_labels: &g.labels,
            gallery_cameras: &g.cameras,
            camera_filter,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto<'a>(ql: &'a [usize], qc: &'a [usize], gl: &'a [usize], gc: &'a [usize], filter: bool) -> Protocol<'a> {
        Protocol { query_labels: ql, query_cameras: qc, gallery_labels: gl, gallery_cameras: gc, camera_filter: filter }
    }

    #[test]
    fn positives_at_ranks_one_and_three() {
        let dist = Tensor::<f64>::from_f64(&[1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = cmc_map(&dist, &proto(&[7], &[0], &[7, 1, 7, 2], &[1, 1, 1, 1], true)).unwrap();
        assert_eq!(r.map, (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(r.rank1, 1.0);
        assert_eq!(r.cmc, vec![1.0; 4]);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let dist = Tensor::<f64>::from_f64(&[2, 4], &[0.0, 0.1, 5.0, 6.0, 4.0, 3.0, 0.5, 0.2]).unwrap();
        let r = cmc_map(&dist, &proto(&[0, 1], &[0, 0], &[0, 0, 1, 1], &[1, 1, 1, 1], true)).unwrap();
        assert_eq!((r.rank1, r.map), (1.0, 1.0));
    }

    #[test]
    fn same_camera_clone_is_filtered() {
        let dist = Tensor::<f64>::from_f64(&[1, 3], &[0.0, 1.0, 2.0]).unwrap();
        let filtered = cmc_map(&dist, &proto(&[0], &[0], &[0, 1, 0], &[0, 1, 1], true)).unwrap();
        assert_eq!(filtered.rankings[0], vec![1, 2]);
        assert_eq!(filtered.rank1, 0.0);
        let open = cmc_map(&dist, &proto(&[0], &[0], &[0, 1, 0], &[0, 1, 1], false)).unwrap();
        assert_eq!(open.rank1, 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let dist = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 1.0, 1.0]).unwrap();
        let r = cmc_map(&dist, &proto(&[0], &[0], &[1, 0, 2], &[1, 1, 1], true)).unwrap();
        assert_eq!(r.rankings[0], vec![0, 1, 2]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn query_without_match_is_an_error() {
        let dist = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        assert!(matches!(
            cmc_map(&dist, &proto(&[3], &[0], &[3, 1], &[0, 1], true)),
            Err(DipError::NoValidMatch { query: 0 })
        ));
    }
}
