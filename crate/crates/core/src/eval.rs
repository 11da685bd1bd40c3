//! Retrieval evaluation: distance matrices, mAP / CMC under the standard
//! same-id-same-camera exclusion protocol, the query/gallery split, and
//! embedding export.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::data::{Dataset, Spectrum};
use crate::model::{MissingFill, Model};
use crate::tensor::{ParamStore, Result, Scalar, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone)]
pub struct EvalEntry {
    pub feature: Vec<f64>,
    pub identity: u32,
    pub camera: u32,
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub query: Vec<EvalEntry>,
    pub gallery: Vec<EvalEntry>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub num_valid_queries: usize,
    pub missing_set: Vec<String>,
}

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Pairwise query-gallery distances. Cosine distance is `1 - cos`;
/// zero-norm features are a contract error naming the offending side.
pub fn distance_matrix(
    query: &[EvalEntry],
    gallery: &[EvalEntry],
    metric: Distance,
) -> Result<Vec<Vec<f64>>> {
    let check_norms = |entries: &[EvalEntry], side: &str| -> Result<Vec<f64>> {
        entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let n = e.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                if metric == Distance::Cosine && n == 0.0 {
                    return Err(TensorError::Contract(format!(
                        "distance_matrix: {side} sample {i} (identity {}) has a zero-norm feature",
                        e.identity
                    )));
                }
                Ok(n)
            })
            .collect()
    };
    let qn = check_norms(query, "query")?;
    let gn = check_norms(gallery, "gallery")?;
    let mut out = Vec::with_capacity(query.len());
    for (i, q) in query.iter().enumerate() {
        let mut row = Vec::with_capacity(gallery.len());
        for (j, g) in gallery.iter().enumerate() {
            if q.feature.len() != g.feature.len() {
                return Err(TensorError::Contract(format!(
                    "distance_matrix: feature dims differ ({} vs {})",
                    q.feature.len(),
                    g.feature.len()
                )));
            }
            let dot: f64 = q.feature.iter().zip(&g.feature).map(|(a, b)| a * b).sum();
            row.push(match metric {
                Distance::Cosine => 1.0 - dot / (qn[i] * gn[j]),
                Distance::Euclidean => {
                    let sq: f64 = q
                        .feature
                        .iter()
                        .zip(&g.feature)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    sq.sqrt()
                }
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// mAP and CMC under the standard protocol: per query, gallery entries with
/// the same identity AND same camera are excluded; AP is the mean of
/// precision at each true positive; ties break by gallery index.
pub fn compute_map_cmc(split: &EvalSplit, dist: &[Vec<f64>]) -> Result<EvalReport> {
    if dist.len() != split.query.len() {
        return Err(TensorError::Contract(format!(
            "compute_map_cmc: {} distance rows for {} queries",
            dist.len(),
            split.query.len()
        )));
    }
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut cmc_hits: BTreeMap<usize, usize> = CMC_RANKS.iter().map(|&k| (k, 0)).collect();
    for (qi, q) in split.query.iter().enumerate() {
        // keep gallery entries that survive the exclusion rule
        let kept: Vec<usize> = (0..split.gallery.len())
            .filter(|&j| {
                let g = &split.gallery[j];
                !(g.identity == q.identity && g.camera == q.camera)
            })
            .collect();
        let num_matches = kept
            .iter()
            .filter(|&&j| split.gallery[j].identity == q.identity)
            .count();
        if num_matches == 0 {
            continue; // query excluded, flagged via num_valid_queries
        }
        valid += 1;
        let mut order = kept.clone();
        order.sort_by(|&a, &b| {
            dist[qi][a]
                .partial_cmp(&dist[qi][b])
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let mut tp = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank, &j) in order.iter().enumerate() {
            if split.gallery[j].identity == q.identity {
                tp += 1;
                precision_sum += tp as f64 / (rank + 1) as f64;
                first_hit.get_or_insert(rank);
            }
        }
        ap_sum += precision_sum / num_matches as f64;
        let hit = first_hit.expect("num_matches > 0");
        for (&k, count) in cmc_hits.iter_mut() {
            if hit < k {
                *count += 1;
            }
        }
    }
    if valid == 0 {
        return Err(TensorError::Contract(
            "compute_map_cmc: no query has a valid gallery match".into(),
        ));
    }
    let cmc = cmc_hits
        .into_iter()
        .map(|(k, h)| (k, h as f64 / valid as f64))
        .collect();
    Ok(EvalReport {
        map: ap_sum / valid as f64,
        cmc,
        num_valid_queries: valid,
        missing_set: Vec::new(),
    })
}

/// Extract the ranking feature for every triple in `dataset`, applying the
/// missing-set to each sample.
pub fn extract_features<F: Scalar>(
    model: &Model,
    store: &ParamStore<F>,
    dataset: &Dataset,
    missing: &[Spectrum],
    fill: MissingFill,
) -> Result<Vec<EvalEntry>> {
    let mut out = Vec::with_capacity(dataset.triples.len());
    for triple in &dataset.triples {
        let mut tape: Tape<F> = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let f = model.forward_feature(&mut tape, &bind, triple, dataset, missing, fill)?;
        out.push(EvalEntry {
            feature: tape.value(f).data().iter().map(|&v| v.to_f64()).collect(),
            identity: triple.identity,
            camera: triple.camera,
        });
    }
    Ok(out)
}

/// Full evaluation: split the dataset into query and gallery (first half of
/// each identity-camera group to query), extract features with the given
/// missing-set on both sides, and score.
pub fn evaluate<F: Scalar>(
    model: &Model,
    store: &ParamStore<F>,
    dataset: &Dataset,
    missing: &[Spectrum],
    fill: MissingFill,
    metric: Distance,
) -> Result<EvalReport> {
    if missing.len() > 2 {
        return Err(TensorError::Contract(
            "evaluate: at most two spectra may be missing".into(),
        ));
    }
    let (query_ds, gallery_ds) = split_query_gallery(dataset);
    let split = EvalSplit {
        query: extract_features(model, store, &query_ds, missing, fill)?,
        gallery: extract_features(model, store, &gallery_ds, missing, fill)?,
    };
    let dist = distance_matrix(&split.query, &split.gallery, metric)?;
    let mut report = compute_map_cmc(&split, &dist)?;
    report.missing_set = missing.iter().map(|s| s.label().to_string()).collect();
    Ok(report)
}

/// First half of each (identity, camera) group becomes the query set, the
/// rest the gallery.
pub fn split_query_gallery(dataset: &Dataset) -> (Dataset, Dataset) {
    let mut sizes: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for t in &dataset.triples {
        *sizes.entry((t.identity, t.camera)).or_insert(0) += 1;
    }
    let mut taken: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for t in &dataset.triples {
        let key = (t.identity, t.camera);
        let c = taken.entry(key).or_insert(0);
        // singleton groups go to the gallery so queries always have a match
        if *c < sizes[&key] / 2 {
            query.push(t.clone());
        } else {
            gallery.push(t.clone());
        }
        *c += 1;
    }
    (dataset.with_triples(query), dataset.with_triples(gallery))
}

/// CSV export of ranking features: one row per sample with identity,
/// camera, per-spectrum presence flags, and the 3D feature values.
pub fn export_embeddings<F: Scalar, W: Write>(
    model: &Model,
    store: &ParamStore<F>,
    dataset: &Dataset,
    out: &mut W,
) -> Result<()> {
    let entries = extract_features(model, store, dataset, &[], MissingFill::Reconstruct)?;
    let dim = entries.first().map_or(0, |e| e.feature.len());
    let io = |e: std::io::Error| TensorError::Contract(format!("export: {e}"));
    let mut header = String::from("identity,camera,has_rgb,has_nir,has_tir");
    for i in 0..dim {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for (entry, triple) in entries.iter().zip(&dataset.triples) {
        let mut row = format!("{},{}", entry.identity, entry.camera);
        for s in Spectrum::ALL {
            row.push_str(if triple.images[s.index()].is_some() {
                ",1"
            } else {
                ",0"
            });
        }
        for v in &entry.feature {
            row.push_str(&format!(",{v:.6e}"));
        }
        writeln!(out, "{row}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn entry(feature: Vec<f64>, identity: u32, camera: u32) -> EvalEntry {
        EvalEntry {
            feature,
            identity,
            camera,
        }
    }

    #[test]
    fn distance_matrix_basic_cases() {
        let q = [entry(vec![1.0, 0.0], 0, 0)];
        let g = [
            entry(vec![2.0, 0.0], 0, 1), // parallel: cosine distance 0
            entry(vec![0.0, 3.0], 1, 1), // orthogonal: cosine distance 1
        ];
        let d = distance_matrix(&q, &g, Distance::Cosine).unwrap();
        assert!(d[0][0].abs() < 1e-12);
        assert!((d[0][1] - 1.0).abs() < 1e-12);

        let e = distance_matrix(&q, &g, Distance::Euclidean).unwrap();
        assert!((e[0][0] - 1.0).abs() < 1e-12);
        assert!((e[0][1] - 10.0f64.sqrt()).abs() < 1e-12);

        let zero = [entry(vec![0.0, 0.0], 7, 0)];
        let err = distance_matrix(&zero, &g, Distance::Cosine).unwrap_err();
        assert!(err.to_string().contains("identity 7"));
        // Euclidean allows zero-norm features
        assert!(distance_matrix(&zero, &g, Distance::Euclidean).is_ok());
    }

    #[test]
    fn hand_case_ap_five_sixths() {
        // query matches at ranks 1 and 3 of a 5-entry gallery
        let split = EvalSplit {
            query: vec![entry(vec![1.0, 0.0], 0, 0)],
            gallery: vec![
                entry(vec![0.0; 2], 0, 1),
                entry(vec![0.0; 2], 1, 1),
                entry(vec![0.0; 2], 0, 1),
                entry(vec![0.0; 2], 2, 1),
                entry(vec![0.0; 2], 3, 1),
            ],
        };
        let dist = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5]];
        let rep = compute_map_cmc(&split, &dist).unwrap();
        assert!((rep.map - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(rep.cmc[&1], 1.0);
        assert_eq!(rep.num_valid_queries, 1);
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        let split = EvalSplit {
            query: vec![entry(vec![1.0], 0, 0), entry(vec![1.0], 1, 0)],
            gallery: vec![
                entry(vec![1.0], 0, 0), // same id, same cam: excluded
                entry(vec![1.0], 1, 1),
            ],
        };
        let dist = vec![vec![0.0, 0.1], vec![0.0, 0.1]];
        let rep = compute_map_cmc(&split, &dist).unwrap();
        // query 0 has no valid match left and is dropped; query 1's match
        // ranks behind the id-0 distractor, so AP = 1/2
        assert_eq!(rep.num_valid_queries, 1);
        assert_eq!(rep.map, 0.5);
        assert_eq!(rep.cmc[&1], 0.0);
        assert_eq!(rep.cmc[&5], 1.0);

        // all queries excluded -> error
        let bad = EvalSplit {
            query: vec![entry(vec![1.0], 0, 0)],
            gallery: vec![entry(vec![1.0], 0, 0)],
        };
        assert!(compute_map_cmc(&bad, &vec![vec![0.0]]).is_err());
    }

    /// Exhaustive oracle: sort explicitly, walk the ranking, accumulate
    /// precision at every true positive and the first-hit rank.
    fn brute_force(split: &EvalSplit, dist: &[Vec<f64>]) -> Option<(f64, BTreeMap<usize, f64>, usize)> {
        let mut aps = Vec::new();
        let mut hits: BTreeMap<usize, usize> = CMC_RANKS.iter().map(|&k| (k, 0)).collect();
        for (qi, q) in split.query.iter().enumerate() {
            let mut rows: Vec<(f64, usize)> = split
                .gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| !(g.identity == q.identity && g.camera == q.camera))
                .map(|(j, _)| (dist[qi][j], j))
                .collect();
            rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let flags: Vec<bool> = rows
                .iter()
                .map(|&(_, j)| split.gallery[j].identity == q.identity)
                .collect();
            let total = flags.iter().filter(|&&f| f).count();
            if total == 0 {
                continue;
            }
            let mut tp = 0;
            let mut ps = 0.0;
            for (r, &f) in flags.iter().enumerate() {
                if f {
                    tp += 1;
                    ps += tp as f64 / (r + 1) as f64;
                }
            }
            aps.push(ps / total as f64);
            let first = flags.iter().position(|&f| f).unwrap();
            for (&k, c) in hits.iter_mut() {
                if first < k {
                    *c += 1;
                }
            }
        }
        if aps.is_empty() {
            return None;
        }
        let n = aps.len();
        Some((
            aps.iter().sum::<f64>() / n as f64,
            hits.into_iter().map(|(k, h)| (k, h as f64 / n as f64)).collect(),
            n,
        ))
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 200 {
            let nq = rng.gen_range(1..=4);
            let ng = rng.gen_range(2..=10);
            let mk = |rng: &mut ChaCha8Rng| EvalEntry {
                feature: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                identity: rng.gen_range(0..4),
                camera: rng.gen_range(0..3),
            };
            let split = EvalSplit {
                query: (0..nq).map(|_| mk(&mut rng)).collect(),
                gallery: (0..ng).map(|_| mk(&mut rng)).collect(),
            };
            let dist: Vec<Vec<f64>> = (0..nq)
                .map(|_| (0..ng).map(|_| rng.gen_range(0.0..2.0)).collect())
                .collect();
            let Some((map, cmc, valid)) = brute_force(&split, &dist) else {
                continue; // degenerate instance; only count scoreable ones
            };
            let rep = compute_map_cmc(&split, &dist).unwrap();
            assert!((rep.map - map).abs() < 1e-12);
            assert_eq!(rep.num_valid_queries, valid);
            for k in CMC_RANKS {
                assert!((rep.cmc[&k] - cmc[&k]).abs() < 1e-12);
            }
            // monotone CMC on every report
            assert!(rep.cmc[&1] <= rep.cmc[&5] && rep.cmc[&5] <= rep.cmc[&10]);
            checked += 1;
        }
    }

    #[test]
    fn tie_break_is_by_gallery_index() {
        let split = EvalSplit {
            query: vec![entry(vec![1.0], 0, 0)],
            gallery: vec![entry(vec![1.0], 1, 1), entry(vec![1.0], 0, 1)],
        };
        // identical distances: the wrong-id entry at index 0 ranks first
        let rep = compute_map_cmc(&split, &vec![vec![0.5, 0.5]]).unwrap();
        assert!((rep.map - 0.5).abs() < 1e-12);
        assert_eq!(rep.cmc[&1], 0.0);
    }

    #[test]
    fn query_gallery_split_halves_each_group() {
        let ds = crate::data::synth_dataset(3, 2, 4, 32, 32, 1);
        let (q, g) = split_query_gallery(&ds);
        assert_eq!(q.triples.len(), 3 * 2 * 2);
        assert_eq!(g.triples.len(), 3 * 2 * 2);
        // every query identity appears in the gallery
        for t in &q.triples {
            assert!(g.triples.iter().any(|x| x.identity == t.identity));
        }
    }
}
