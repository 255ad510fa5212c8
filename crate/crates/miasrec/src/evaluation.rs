//! Next-item ranking metrics under the iterative revealing protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Mode, ModelConfig, ModelParameters};
use crate::sessions::{expand_prefixes, PrefixExample, SessionCorpus};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

/// Session-length buckets: inclusive ranges, `None` meaning unbounded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthBuckets(pub Vec<(usize, Option<usize>)>);

impl Default for LengthBuckets {
    fn default() -> Self {
        LengthBuckets(vec![
            (1, Some(1)),
            (2, Some(2)),
            (3, Some(4)),
            (5, Some(6)),
            (7, Some(9)),
            (10, None),
        ])
    }
}

impl LengthBuckets {
    pub fn label(lo: usize, hi: Option<usize>) -> String {
        match hi {
            Some(h) if h == lo => format!("{lo}"),
            Some(h) => format!("{lo}-{h}"),
            None => format!(">={lo}"),
        }
    }

    fn bucket_of(&self, len: usize) -> Option<usize> {
        self.0
            .iter()
            .position(|&(lo, hi)| len >= lo && hi.map_or(true, |h| len <= h))
    }
}

/// 1 + count of strictly better scores + count of equal scores at a smaller
/// item index. `target` is 1-based.
pub fn rank_target(scores: &[f64], target: u32) -> usize {
    let t = target as usize - 1;
    let ts = scores[t];
    let mut rank = 1;
    for (j, &v) in scores.iter().enumerate() {
        if v > ts || (v == ts && j < t) {
            rank += 1;
        }
    }
    rank
}

pub fn recall_at(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn mrr_at(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let sum: f64 = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / r as f64 } else { 0.0 })
        .sum();
    Ok(sum / ranks.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BucketMetrics {
    pub label: String,
    pub example_count: usize,
    pub metrics: Vec<CutoffMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerSeedMetrics {
    pub seed: u64,
    pub overall: Vec<CutoffMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub format_version: u32,
    pub cutoffs: Vec<usize>,
    pub example_count: usize,
    pub overall: Vec<CutoffMetrics>,
    pub buckets: Vec<BucketMetrics>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<PerSeedMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_overall: Option<Vec<CutoffMetrics>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_fingerprint: Option<String>,
}

fn metrics_for(ranks: &[usize], cutoffs: &[usize]) -> Result<Vec<CutoffMetrics>> {
    cutoffs
        .iter()
        .map(|&k| {
            Ok(CutoffMetrics {
                k,
                recall: recall_at(ranks, k)?,
                mrr: mrr_at(ranks, k)?,
            })
        })
        .collect()
}

/// Rank the target of every example in eval mode; returns (rank, prefix_len)
/// pairs in input order.
pub fn score_examples(
    params: &ModelParameters,
    config: &ModelConfig,
    examples: &[PrefixExample],
) -> Result<Vec<(usize, usize)>> {
    examples
        .par_iter()
        .map(|ex| {
            let (scores, _) = forward(ex, params, config, Mode::Eval, None)?;
            Ok((rank_target(&scores, ex.target), ex.prefix.len()))
        })
        .collect()
}

pub fn report_from_ranks(
    ranked: &[(usize, usize)],
    cutoffs: &[usize],
    buckets: &LengthBuckets,
    seed: Option<u64>,
) -> Result<MetricsReport> {
    if ranked.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let ranks: Vec<usize> = ranked.iter().map(|&(r, _)| r).collect();
    let overall = metrics_for(&ranks, cutoffs)?;

    let mut per_bucket: Vec<Vec<usize>> = vec![Vec::new(); buckets.0.len()];
    for &(rank, len) in ranked {
        if let Some(b) = buckets.bucket_of(len) {
            per_bucket[b].push(rank);
        }
    }
    let bucket_metrics = buckets
        .0
        .iter()
        .zip(&per_bucket)
        .map(|(&(lo, hi), ranks)| {
            let metrics = if ranks.is_empty() {
                cutoffs
                    .iter()
                    .map(|&k| CutoffMetrics {
                        k,
                        recall: 0.0,
                        mrr: 0.0,
                    })
                    .collect()
            } else {
                metrics_for(ranks, cutoffs)?
            };
            Ok(BucketMetrics {
                label: LengthBuckets::label(lo, hi),
                example_count: ranks.len(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricsReport {
        format_version: REPORT_FORMAT_VERSION,
        cutoffs: cutoffs.to_vec(),
        example_count: ranked.len(),
        overall,
        buckets: bucket_metrics,
        seeds: seed.into_iter().collect(),
        per_seed: Vec::new(),
        std_overall: None,
        config_echo: None,
        corpus_fingerprint: None,
    })
}

/// Iterative revealing evaluation over a prefix-expanded test corpus.
pub fn evaluate(
    params: &ModelParameters,
    config: &ModelConfig,
    test_corpus: &SessionCorpus,
    cutoffs: &[usize],
    buckets: &LengthBuckets,
) -> Result<MetricsReport> {
    let examples = expand_prefixes(test_corpus, config.max_len);
    let ranked = score_examples(params, config, &examples)?;
    report_from_ranks(&ranked, cutoffs, buckets, None)
}

/// Validation MRR@20 and R@20, used by the training stopping rule.
pub fn validation_mrr_r20(
    params: &ModelParameters,
    config: &ModelConfig,
    examples: &[PrefixExample],
) -> Result<(f64, f64)> {
    let ranked = score_examples(params, config, examples)?;
    let ranks: Vec<usize> = ranked.into_iter().map(|(r, _)| r).collect();
    Ok((mrr_at(&ranks, 20)?, recall_at(&ranks, 20)?))
}

/// Fixed score vector proportional to training occurrence counts, rescaled
/// into [-1, 1] so it is range-comparable with cosine scores.
pub fn popularity_baseline(train_corpus: &SessionCorpus) -> Vec<f64> {
    let n = train_corpus.item_count();
    let mut counts = vec![0usize; n];
    for s in &train_corpus.sessions {
        for &it in &s.items {
            counts[it as usize - 1] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let min = counts.iter().copied().min().unwrap_or(0) as f64;
    if max == min {
        return vec![0.0; n];
    }
    counts
        .into_iter()
        .map(|c| -1.0 + 2.0 * (c as f64 - min) / (max - min))
        .collect()
}

/// Evaluate a fixed score vector (e.g. the popularity baseline) under the
/// same protocol.
pub fn evaluate_fixed_scores(
    scores: &[f64],
    test_corpus: &SessionCorpus,
    max_len: usize,
    cutoffs: &[usize],
    buckets: &LengthBuckets,
) -> Result<MetricsReport> {
    let examples = expand_prefixes(test_corpus, max_len);
    let ranked: Vec<(usize, usize)> = examples
        .iter()
        .map(|ex| (rank_target(scores, ex.target), ex.prefix.len()))
        .collect();
    report_from_ranks(&ranked, cutoffs, buckets, None)
}

/// Arithmetic mean across per-seed reports; per-seed values and standard
/// deviations are retained.
pub fn aggregate_seeds(reports: &[(u64, MetricsReport)]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let first = &reports[0].1;
    for (_, r) in reports.iter().skip(1) {
        if r.cutoffs != first.cutoffs
            || r.buckets.len() != first.buckets.len()
            || r.buckets
                .iter()
                .zip(&first.buckets)
                .any(|(a, b)| a.label != b.label)
        {
            return Err(Error::Config(
                "cannot aggregate reports with mismatched cutoffs or buckets".into(),
            ));
        }
    }
    let count = reports.len() as f64;

    let mean_metrics = |get: &dyn Fn(&MetricsReport) -> &Vec<CutoffMetrics>| -> Vec<CutoffMetrics> {
        first
            .cutoffs
            .iter()
            .enumerate()
            .map(|(i, &k)| CutoffMetrics {
                k,
                recall: reports.iter().map(|(_, r)| get(r)[i].recall).sum::<f64>() / count,
                mrr: reports.iter().map(|(_, r)| get(r)[i].mrr).sum::<f64>() / count,
            })
            .collect()
    };

    let overall = mean_metrics(&|r| &r.overall);
    let std_overall = first
        .cutoffs
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let std = |vals: Vec<f64>| {
                let mean = vals.iter().sum::<f64>() / count;
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count).sqrt()
            };
            CutoffMetrics {
                k,
                recall: std(reports.iter().map(|(_, r)| r.overall[i].recall).collect()),
                mrr: std(reports.iter().map(|(_, r)| r.overall[i].mrr).collect()),
            }
        })
        .collect();

    let buckets = first
        .buckets
        .iter()
        .enumerate()
        .map(|(b, bucket)| BucketMetrics {
            label: bucket.label.clone(),
            example_count: bucket.example_count,
            metrics: first
                .cutoffs
                .iter()
                .enumerate()
                .map(|(i, &k)| CutoffMetrics {
                    k,
                    recall: reports
                        .iter()
                        .map(|(_, r)| r.buckets[b].metrics[i].recall)
                        .sum::<f64>()
                        / count,
                    mrr: reports
                        .iter()
                        .map(|(_, r)| r.buckets[b].metrics[i].mrr)
                        .sum::<f64>()
                        / count,
                })
                .collect(),
        })
        .collect();

    Ok(MetricsReport {
        format_version: REPORT_FORMAT_VERSION,
        cutoffs: first.cutoffs.clone(),
        example_count: first.example_count,
        overall,
        buckets,
        seeds: reports.iter().map(|&(s, _)| s).collect(),
        per_seed: reports
            .iter()
            .map(|(s, r)| PerSeedMetrics {
                seed: *s,
                overall: r.overall.clone(),
            })
            .collect(),
        std_overall: Some(std_overall),
        config_echo: first.config_echo.clone(),
        corpus_fingerprint: first.corpus_fingerprint.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_unique_maximum() {
        assert_eq!(rank_target(&[0.1, 0.9, 0.3], 2), 1);
    }

    #[test]
    fn rank_tie_break_by_index() {
        let scores = vec![0.5; 4];
        assert_eq!(rank_target(&scores, 1), 1);
        assert_eq!(rank_target(&scores, 4), 4);
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = rng.gen_range(1..=20u32);
            // full sort with the same (score desc, index asc) tie-break
            let mut order: Vec<usize> = (0..20).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            let oracle = order.iter().position(|&i| i == target as usize - 1).unwrap() + 1;
            assert_eq!(rank_target(&scores, target), oracle);
        }
    }

    #[test]
    fn recall_and_mrr_definitions() {
        assert_eq!(recall_at(&[1, 25, 3], 20).unwrap(), 2.0 / 3.0);
        let mrr = mrr_at(&[1, 25, 4], 20).unwrap();
        assert!((mrr - (1.0 + 0.0 + 0.25) / 3.0).abs() < 1e-12);
        assert!(recall_at(&[], 20).is_err());
        assert!(mrr_at(&[], 20).is_err());
    }

    #[test]
    fn metrics_match_brute_force_on_random_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ranks: Vec<usize> = (0..1000).map(|_| rng.gen_range(1..100)).collect();
        for k in [5, 10, 20] {
            let mut hits = 0.0;
            let mut rr = 0.0;
            for &r in &ranks {
                if r <= k {
                    hits += 1.0;
                    rr += 1.0 / r as f64;
                }
            }
            assert!((recall_at(&ranks, k).unwrap() - hits / 1000.0).abs() < 1e-12);
            assert!((mrr_at(&ranks, k).unwrap() - rr / 1000.0).abs() < 1e-12);
            // mrr <= recall, monotone in k
            assert!(mrr_at(&ranks, k).unwrap() <= recall_at(&ranks, k).unwrap());
        }
        assert!(recall_at(&ranks, 5).unwrap() <= recall_at(&ranks, 10).unwrap());
        assert!(mrr_at(&ranks, 10).unwrap() <= mrr_at(&ranks, 20).unwrap());
    }

    #[test]
    fn bucket_counts_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ranked: Vec<(usize, usize)> = (0..500)
            .map(|_| (rng.gen_range(1..50), rng.gen_range(1..15)))
            .collect();
        let buckets = LengthBuckets::default();
        let report = report_from_ranks(&ranked, &DEFAULT_CUTOFFS, &buckets, None).unwrap();
        let total: usize = report.buckets.iter().map(|b| b.example_count).sum();
        assert_eq!(total, 500);
        // independent recount per bucket
        for (i, &(lo, hi)) in buckets.0.iter().enumerate() {
            let count = ranked
                .iter()
                .filter(|&&(_, l)| l >= lo && hi.map_or(true, |h| l <= h))
                .count();
            assert_eq!(report.buckets[i].example_count, count);
        }
    }

    #[test]
    fn evaluation_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ranked: Vec<(usize, usize)> = (0..300)
            .map(|_| (rng.gen_range(1..40), rng.gen_range(1..12)))
            .collect();
        let a = report_from_ranks(&ranked, &DEFAULT_CUTOFFS, &LengthBuckets::default(), None)
            .unwrap();
        ranked.shuffle(&mut rng);
        let b = report_from_ranks(&ranked, &DEFAULT_CUTOFFS, &LengthBuckets::default(), None)
            .unwrap();
        // float sums run in a different order after the shuffle, so allow
        // rounding-level slack
        for (ma, mb) in a.overall.iter().zip(&b.overall) {
            assert_eq!(ma.k, mb.k);
            assert!((ma.recall - mb.recall).abs() < 1e-12);
            assert!((ma.mrr - mb.mrr).abs() < 1e-12);
        }
        for (ba, bb) in a.buckets.iter().zip(&b.buckets) {
            assert_eq!(ba.example_count, bb.example_count);
            for (ma, mb) in ba.metrics.iter().zip(&bb.metrics) {
                assert!((ma.recall - mb.recall).abs() < 1e-12);
                assert!((ma.mrr - mb.mrr).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn popularity_is_monotone_in_count() {
        use crate::sessions::{Session, SessionCorpus, CORPUS_FORMAT_VERSION};
        let corpus = SessionCorpus {
            format_version: CORPUS_FORMAT_VERSION,
            vocabulary: vec!["a".into(), "b".into()],
            config_echo: None,
            sessions: (0..5)
                .map(|i| Session {
                    id: format!("s{i}"),
                    items: if i < 4 { vec![1, 1, 2] } else { vec![1, 1] },
                    end_time: i,
                })
                .collect(),
        };
        let scores = popularity_baseline(&corpus);
        assert!(scores[0] > scores[1]);
        assert_eq!(scores[0], 1.0);
        assert_eq!(scores[1], -1.0);
        assert_eq!(rank_target(&scores, 1), 1);
    }

    #[test]
    fn popularity_matches_count_and_sort_oracle() {
        use crate::sessions::{Session, SessionCorpus, CORPUS_FORMAT_VERSION};
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 100usize;
        let sessions: Vec<Session> = (0..50)
            .map(|i| Session {
                id: format!("s{i}"),
                items: (0..rng.gen_range(2..8))
                    .map(|_| rng.gen_range(1..=n as u32))
                    .collect(),
                end_time: i,
            })
            .collect();
        let corpus = SessionCorpus {
            format_version: CORPUS_FORMAT_VERSION,
            vocabulary: (0..n).map(|i| format!("i{i}")).collect(),
            sessions,
            config_echo: None,
        };
        let scores = popularity_baseline(&corpus);
        let mut counts = vec![0usize; n];
        for s in &corpus.sessions {
            for &it in &s.items {
                counts[it as usize - 1] += 1;
            }
        }
        let mut by_score: Vec<usize> = (0..n).collect();
        by_score.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut by_count: Vec<usize> = (0..n).collect();
        by_count.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        assert_eq!(by_score, by_count);
    }

    fn toy_report(vals: [f64; 2]) -> MetricsReport {
        MetricsReport {
            format_version: REPORT_FORMAT_VERSION,
            cutoffs: vec![20],
            example_count: 10,
            overall: vec![CutoffMetrics {
                k: 20,
                recall: vals[0],
                mrr: vals[1],
            }],
            buckets: vec![],
            seeds: vec![],
            per_seed: vec![],
            std_overall: None,
            config_echo: None,
            corpus_fingerprint: None,
        }
    }

    #[test]
    fn aggregate_mean_of_one_is_identity() {
        let r = toy_report([0.5, 0.2]);
        let agg = aggregate_seeds(&[(1, r.clone())]).unwrap();
        assert_eq!(agg.overall, r.overall);
        assert_eq!(agg.seeds, vec![1]);
    }

    #[test]
    fn aggregate_three_seeds_is_arithmetic_mean() {
        let reports = vec![
            (1, toy_report([0.50, 0.20])),
            (2, toy_report([0.52, 0.22])),
            (3, toy_report([0.54, 0.24])),
        ];
        let agg = aggregate_seeds(&reports).unwrap();
        assert!((agg.overall[0].recall - 0.52).abs() < 1e-12);
        assert!((agg.overall[0].mrr - 0.22).abs() < 1e-12);
        assert_eq!(agg.per_seed.len(), 3);
        assert!(agg.std_overall.is_some());
    }

    #[test]
    fn aggregate_rejects_mismatched_shapes() {
        let mut other = toy_report([0.5, 0.2]);
        other.cutoffs = vec![10];
        other.overall[0].k = 10;
        assert!(aggregate_seeds(&[(1, toy_report([0.5, 0.2])), (2, other)]).is_err());
    }
}
