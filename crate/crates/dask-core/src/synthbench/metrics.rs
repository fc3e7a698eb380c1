//! Retrieval metrics: per-query average precision, Rank@1, and model
//! evaluation over seen and unseen domains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reid::{extract_features, FeatureBatch, ReidModel};
use crate::synthbench::{DomainDataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgMetrics {
    pub map: f64,
    pub rank1: f64,
}

impl AvgMetrics {
    pub fn over(domains: &[DomainMetrics]) -> AvgMetrics {
        let n = domains.len() as f64;
        AvgMetrics {
            map: domains.iter().map(|d| d.map).sum::<f64>() / n,
            rank1: domains.iter().map(|d| d.rank1).sum::<f64>() / n,
        }
    }
}

/// Evaluation of one model over seen and unseen domains.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub seen: Vec<DomainMetrics>,
    pub unseen: Vec<DomainMetrics>,
    pub seen_avg: AvgMetrics,
    pub unseen_avg: AvgMetrics,
}

/// Per-step snapshot kept in the lifelong history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub seen: Vec<DomainMetrics>,
    pub seen_avg: AvgMetrics,
}

/// The full report a lifelong run emits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub variant: String,
    pub seen: Vec<DomainMetrics>,
    pub unseen: Vec<DomainMetrics>,
    pub seen_avg: AvgMetrics,
    pub unseen_avg: AvgMetrics,
    pub steps: Vec<StepMetrics>,
    pub config: serde_json::Value,
}

/// Ranks the gallery per query by descending cosine similarity (ties broken
/// by gallery index) and returns (mAP, Rank@1). Every query identity must
/// appear in the gallery.
pub fn compute_map_rank1(query: &FeatureBatch, gallery: &FeatureBatch) -> Result<(f64, f64)> {
    if query.dim() != gallery.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    for (qi, &qid) in query.labels().iter().enumerate() {
        if !gallery.labels().contains(&qid) {
            return Err(Error::InvalidArgument(format!(
                "query {qi} identity {qid} absent from gallery"
            )));
        }
    }

    let norms = |fb: &FeatureBatch| -> Result<Vec<f64>> {
        (0..fb.len())
            .map(|i| {
                let n = fb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    Err(Error::InvalidArgument(format!("zero-norm feature row {i}")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let qn = norms(query)?;
    let gn = norms(gallery)?;

    let mut ap_total = 0.0;
    let mut rank1_hits = 0usize;
    for qi in 0..query.len() {
        let qrow = query.row(qi);
        let qid = query.labels()[qi];
        let mut scored: Vec<(usize, f64)> = (0..gallery.len())
            .map(|gi| {
                let dot: f64 = qrow.iter().zip(gallery.row(gi)).map(|(a, b)| a * b).sum();
                (gi, dot / (qn[qi] * gn[gi]))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let total_relevant = gallery.labels().iter().filter(|&&l| l == qid).count();
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, (gi, _)) in scored.iter().enumerate() {
            if gallery.labels()[*gi] == qid {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_total += precision_sum / total_relevant as f64;
        if gallery.labels()[scored[0].0] == qid {
            rank1_hits += 1;
        }
    }
    Ok((
        ap_total / query.len() as f64,
        rank1_hits as f64 / query.len() as f64,
    ))
}

fn domain_metrics(model: &ReidModel, ds: &DomainDataset) -> Result<DomainMetrics> {
    let (q_imgs, q_labels) = ds.images_of(Split::Query);
    let (g_imgs, g_labels) = ds.images_of(Split::Gallery);
    let qf = extract_features(model, &q_imgs, &q_labels)?;
    let gf = extract_features(model, &g_imgs, &g_labels)?;
    let (map, rank1) = compute_map_rank1(&qf, &gf)?;
    Ok(DomainMetrics {
        domain: ds.domain_id,
        map,
        rank1,
    })
}

/// Evaluates the model on every seen test split and every unseen domain.
pub fn evaluate_model(
    model: &ReidModel,
    seen: &[DomainDataset],
    unseen: &[DomainDataset],
) -> Result<Evaluation> {
    if seen.is_empty() {
        return Err(Error::EmptyInput("no seen domains to evaluate".into()));
    }
    let seen_metrics: Vec<DomainMetrics> = seen
        .iter()
        .map(|ds| domain_metrics(model, ds))
        .collect::<Result<_>>()?;
    let unseen_metrics: Vec<DomainMetrics> = unseen
        .iter()
        .map(|ds| domain_metrics(model, ds))
        .collect::<Result<_>>()?;
    let seen_avg = AvgMetrics::over(&seen_metrics);
    let unseen_avg = if unseen_metrics.is_empty() {
        AvgMetrics { map: 0.0, rank1: 0.0 }
    } else {
        AvgMetrics::over(&unseen_metrics)
    };
    Ok(Evaluation {
        seen: seen_metrics,
        unseen: unseen_metrics,
        seen_avg,
        unseen_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fb(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> FeatureBatch {
        FeatureBatch::new(features, dim, labels).unwrap()
    }

    #[test]
    fn ap_hand_case() {
        // Gallery of 4; relevant items land at ranks 1 and 3.
        // Query (1,0); gallery sims: 1.0, 0.8, 0.6, 0.4 by construction.
        let query = fb(vec![1.0, 0.0], 2, vec![7]);
        let gallery = fb(
            vec![
                1.0, 0.0, // id 7, rank 1
                0.8, 0.6, // id 3, rank 2
                0.6, 0.8, // id 7, rank 3
                0.4, 0.9, // id 3, rank 4
            ],
            2,
            vec![7, 3, 7, 3],
        );
        let (map, rank1) = compute_map_rank1(&query, &gallery).unwrap();
        let want = (1.0 / 1.0 + 2.0 / 3.0) / 2.0;
        assert!((map - want).abs() < 1e-12, "{map} vs {want}");
        assert_eq!(rank1, 1.0);
    }

    #[test]
    fn perfect_ranking_gives_unit_metrics() {
        let query = fb(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1]);
        let gallery = fb(
            vec![0.9, 0.1, 0.95, 0.05, 0.1, 0.9],
            2,
            vec![0, 0, 1],
        );
        let (map, rank1) = compute_map_rank1(&query, &gallery).unwrap();
        assert_eq!(map, 1.0);
        assert_eq!(rank1, 1.0);
    }

    #[test]
    fn missing_query_identity_is_rejected() {
        let query = fb(vec![1.0, 0.0], 2, vec![9]);
        let gallery = fb(vec![1.0, 0.0], 2, vec![1]);
        assert!(compute_map_rank1(&query, &gallery).is_err());
    }

    #[test]
    fn map_matches_exhaustive_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(71, "ap-oracle", 0);
        for _ in 0..10 {
            let d = 6;
            let nq = 8;
            let ng = 20;
            let g_labels: Vec<usize> = (0..ng).map(|i| i % 5).collect();
            let q_labels: Vec<usize> = (0..nq).map(|_| rng.random_range(0..5)).collect();
            let qf: Vec<f64> = (0..nq * d).map(|_| rng.random::<f64>() - 0.5).collect();
            let gf: Vec<f64> = (0..ng * d).map(|_| rng.random::<f64>() - 0.5).collect();
            let query = fb(qf.clone(), d, q_labels.clone());
            let gallery = fb(gf.clone(), d, g_labels.clone());
            let (map, rank1) = compute_map_rank1(&query, &gallery).unwrap();

            // Exhaustive oracle.
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let mut ap_sum = 0.0;
            let mut r1 = 0;
            for qi in 0..nq {
                let sims: Vec<(usize, f64)> = (0..ng)
                    .map(|gi| (gi, cos(&qf[qi * d..(qi + 1) * d], &gf[gi * d..(gi + 1) * d])))
                    .collect();
                let mut order: Vec<usize> = (0..ng).collect();
                order.sort_by(|&a, &b| {
                    sims[b].1.partial_cmp(&sims[a].1).unwrap().then(a.cmp(&b))
                });
                let rel = |gi: usize| g_labels[gi] == q_labels[qi];
                let total: usize = (0..ng).filter(|&gi| rel(gi)).count();
                let mut hits = 0;
                let mut psum = 0.0;
                for (rank, &gi) in order.iter().enumerate() {
                    if rel(gi) {
                        hits += 1;
                        psum += hits as f64 / (rank + 1) as f64;
                    }
                }
                ap_sum += psum / total as f64;
                if rel(order[0]) {
                    r1 += 1;
                }
            }
            assert!((map - ap_sum / nq as f64).abs() < 1e-12);
            assert!((rank1 - r1 as f64 / nq as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_feature_rescaling() {
        use rand::Rng;
        let mut rng = crate::rng::stream(72, "ap-scale", 0);
        let d = 5;
        let qf: Vec<f64> = (0..4 * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let gf: Vec<f64> = (0..12 * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let q_labels = vec![0, 1, 2, 3];
        let g_labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let base = compute_map_rank1(
            &fb(qf.clone(), d, q_labels.clone()),
            &fb(gf.clone(), d, g_labels.clone()),
        )
        .unwrap();
        let scaled = compute_map_rank1(
            &fb(qf.iter().map(|v| v * 41.0).collect(), d, q_labels),
            &fb(gf.iter().map(|v| v * 0.003).collect(), d, g_labels),
        )
        .unwrap();
        assert!((base.0 - scaled.0).abs() < 1e-12);
        assert!((base.1 - scaled.1).abs() < 1e-12);
    }

    #[test]
    fn averages_recompute_exactly() {
        let domains = vec![
            DomainMetrics { domain: 0, map: 0.5, rank1: 0.25 },
            DomainMetrics { domain: 1, map: 0.7, rank1: 0.75 },
            DomainMetrics { domain: 2, map: 0.2, rank1: 0.5 },
        ];
        let avg = AvgMetrics::over(&domains);
        let map_mean = domains.iter().map(|d| d.map).sum::<f64>() / 3.0;
        assert_eq!(avg.map, map_mean);
    }
}
