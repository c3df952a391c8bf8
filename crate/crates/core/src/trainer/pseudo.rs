//! Fusion of single-organ predictions into fully pseudo-annotated label maps.

use rayon::prelude::*;

use super::thread_pool;
use crate::error::{Error, Result};
use crate::phantom::{DatasetSplit, LabelMap, Sample};
use crate::segnet::{predict, ModelParams};

/// Fused hard labels, aligned with `split.train`: `fused[k - 1][i]` belongs to
/// training sample `i` of organ `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDataset {
    pub organs: usize,
    pub fused: Vec<Vec<LabelMap>>,
}

impl PseudoDataset {
    /// The split with every training mask replaced by its fused labels; the
    /// annotated-organ ids are kept so the source dataset stays identifiable.
    pub fn to_split(&self, trusted: &DatasetSplit) -> Result<DatasetSplit> {
        self.check_alignment(trusted)?;
        let train = trusted
            .train
            .iter()
            .zip(&self.fused)
            .map(|(part, fused)| {
                part.iter()
                    .zip(fused)
                    .map(|(s, f)| Sample {
                        image: s.image.clone(),
                        mask: f.clone(),
                        annotated_organ: s.annotated_organ,
                    })
                    .collect()
            })
            .collect();
        Ok(DatasetSplit {
            organs: trusted.organs,
            train,
            validation: trusted.validation.clone(),
            test: trusted.test.clone(),
        })
    }

    /// Inverse of [`PseudoDataset::to_split`]; the images must match the trusted split.
    pub fn from_split(pseudo: &DatasetSplit, trusted: &DatasetSplit) -> Result<Self> {
        let same_layout = pseudo.organs == trusted.organs
            && pseudo.train.len() == trusted.train.len()
            && pseudo
                .train
                .iter()
                .zip(&trusted.train)
                .all(|(a, b)| a.len() == b.len());
        if !same_layout {
            return Err(Error::Data(
                "pseudo-labeled and trusted datasets have different layouts".into(),
            ));
        }
        for (k, (a, b)) in pseudo.train.iter().zip(&trusted.train).enumerate() {
            if let Some(i) = a
                .iter()
                .zip(b)
                .position(|(p, t)| p.image != t.image || p.annotated_organ != t.annotated_organ)
            {
                return Err(Error::Data(format!(
                    "training sample {i} of organ {} differs between the pseudo-labeled and trusted datasets",
                    k + 1
                )));
            }
        }
        Ok(Self {
            organs: pseudo.organs,
            fused: pseudo
                .train
                .iter()
                .map(|part| part.iter().map(|s| s.mask.clone()).collect())
                .collect(),
        })
    }

    fn check_alignment(&self, trusted: &DatasetSplit) -> Result<()> {
        let aligned = self.organs == trusted.organs
            && self.fused.len() == trusted.train.len()
            && self
                .fused
                .iter()
                .zip(&trusted.train)
                .all(|(f, t)| f.len() == t.len());
        if aligned {
            Ok(())
        } else {
            Err(Error::Data(
                "pseudo labels are not aligned with the training set".into(),
            ))
        }
    }
}

/// Per-pixel fusion for a sample annotated for organ `k`: ground-truth organ
/// pixels keep `k`; elsewhere the organ with the highest foreground probability
/// wins if it reaches 0.5 (ties go to the lower id), otherwise background.
/// `foreground` lists `(organ, probability plane)` for every other organ.
pub fn fuse_labels(truth: &LabelMap, k: u8, foreground: &[(u8, &[f32])]) -> Result<LabelMap> {
    let n = truth.labels().len();
    if let Some((j, _)) = foreground.iter().find(|(_, p)| p.len() != n) {
        return Err(Error::Shape {
            op: "fuse_labels",
            detail: format!("probability plane of organ {j} does not match the mask"),
        });
    }
    let mut order: Vec<&(u8, &[f32])> = foreground.iter().collect();
    order.sort_by_key(|(j, _)| *j);
    let labels = truth
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            if t == k {
                return k;
            }
            let mut best: Option<(u8, f32)> = None;
            for (j, plane) in &order {
                let q = plane[p];
                if q >= 0.5 && best.is_none_or(|(_, b)| q > b) {
                    best = Some((*j, q));
                }
            }
            best.map_or(0, |(j, _)| j)
        })
        .collect();
    LabelMap::new(truth.height(), truth.width(), labels)
}

/// Runs every single-organ model `j ≠ k` on each sample of `D_k` and fuses the results.
pub fn generate_pseudo_dataset(
    models: &[ModelParams],
    split: &DatasetSplit,
) -> Result<PseudoDataset> {
    if models.len() != split.organs {
        return Err(Error::InvalidArgument(format!(
            "{} single-organ models for {} organs",
            models.len(),
            split.organs
        )));
    }
    if let Some(i) = models.iter().position(|m| m.arch().classes != 2) {
        return Err(Error::InvalidArgument(format!(
            "model {} has a {}-class head, expected 2",
            i + 1,
            models[i].arch().classes
        )));
    }
    let fused = split
        .train
        .iter()
        .enumerate()
        .map(|(ki, part)| {
            let k = ki as u8 + 1;
            thread_pool().install(|| {
                part.par_iter()
                    .map(|s| {
                        let maps = models
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != ki)
                            .map(|(j, m)| Ok((j as u8 + 1, predict(&s.image, m)?)))
                            .collect::<Result<Vec<_>>>()?;
                        let planes: Vec<(u8, &[f32])> =
                            maps.iter().map(|(j, p)| (*j, p.channel(1))).collect();
                        fuse_labels(&s.mask, k, &planes)
                    })
                    .collect::<Result<Vec<_>>>()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoDataset {
        organs: split.organs,
        fused,
    })
}
