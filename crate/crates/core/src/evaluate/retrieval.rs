use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fixed6;
use crate::contrastive::Modality;
use crate::error::{Error, Result};
use crate::signal::AnchorMap;

pub const POOL_FLAG_LT_50: &str = "pool_lt_50";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked_pool_ids: Vec<String>,
    /// 1-based.
    pub gold_rank: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pool indices sorted by inner product with `query`, descending; equal
/// scores are ordered by ascending id.
fn ranking(query: &[f64], pool: &[(String, Vec<f64>)]) -> Result<Vec<(usize, f64)>> {
    if let Some((id, v)) = pool.iter().find(|(_, v)| v.len() != query.len()) {
        return Err(Error::DimensionMismatch {
            expected: query.len(),
            found: v.len(),
            context: format!("pool vector {id}"),
        });
    }
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie under `total_cmp`.
    let mut scored: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, (_, v))| (i, dot(query, v) + 0.0))
        .collect();
    scored.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => pool[a.0].0.cmp(&pool[b.0].0),
        o => o,
    });
    Ok(scored)
}

/// Ranks the pool for one query whose correct answer is `gold_id`.
pub fn rank_pool(query: &[f64], pool: &[(String, Vec<f64>)], gold_id: &str) -> Result<RetrievalResult> {
    let order = ranking(query, pool)?;
    let ranked_pool_ids: Vec<String> = order.iter().map(|&(i, _)| pool[i].0.clone()).collect();
    let gold_rank = ranked_pool_ids
        .iter()
        .position(|id| id == gold_id)
        .ok_or_else(|| Error::MissingIds {
            what: "gold item in retrieval pool".into(),
            ids: vec![gold_id.to_string()],
        })?
        + 1;
    Ok(RetrievalResult {
        query_id: gold_id.to_string(),
        ranked_pool_ids,
        gold_rank,
    })
}

/// The `k` best pool items with their scores, best first.
pub fn top_k(query: &[f64], pool: &[(String, Vec<f64>)], k: usize) -> Result<Vec<(String, f64)>> {
    Ok(ranking(query, pool)?
        .into_iter()
        .take(k)
        .map(|(i, s)| (pool[i].0.clone(), s))
        .collect())
}

fn non_empty(results: &[RetrievalResult], op: &'static str) -> Result<()> {
    if results.is_empty() {
        return Err(Error::invalid(op, "no retrieval results"));
    }
    Ok(())
}

/// Fraction of queries whose gold item ranks within the top `k`.
pub fn recall_at_k(results: &[RetrievalResult], k: usize) -> Result<f64> {
    non_empty(results, "recall_at_k")?;
    if k == 0 {
        return Err(Error::invalid("recall_at_k", "k must be at least 1"));
    }
    Ok(results.iter().filter(|r| r.gold_rank <= k).count() as f64 / results.len() as f64)
}

/// Mean reciprocal gold rank.
pub fn mrr(results: &[RetrievalResult]) -> Result<f64> {
    non_empty(results, "mrr")?;
    Ok(results.iter().map(|r| 1.0 / r.gold_rank as f64).sum::<f64>() / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum RetrievalDirection {
    /// Text anchors query a pool of IMU embeddings.
    #[serde(rename = "text2imu")]
    #[value(name = "text2imu")]
    TextToImu,
    #[serde(rename = "imu2video")]
    #[value(name = "imu2video")]
    ImuToVideo,
    #[serde(rename = "video2imu")]
    #[value(name = "video2imu")]
    VideoToImu,
    #[serde(rename = "imu2text")]
    #[value(name = "imu2text")]
    ImuToText,
}

impl RetrievalDirection {
    pub fn anchor_modality(self) -> Modality {
        match self {
            RetrievalDirection::TextToImu | RetrievalDirection::ImuToText => Modality::Text,
            RetrievalDirection::ImuToVideo | RetrievalDirection::VideoToImu => Modality::Video,
        }
    }

    /// The command-line and JSON name, e.g. `text2imu`.
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalDirection::TextToImu => "text2imu",
            RetrievalDirection::ImuToVideo => "imu2video",
            RetrievalDirection::VideoToImu => "video2imu",
            RetrievalDirection::ImuToText => "imu2text",
        }
    }

    pub fn imu_queries(self) -> bool {
        matches!(self, RetrievalDirection::ImuToVideo | RetrievalDirection::ImuToText)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub task: String,
    pub direction: RetrievalDirection,
    #[serde(rename = "R@1", serialize_with = "fixed6")]
    pub r_at_1: f64,
    #[serde(rename = "R@10", serialize_with = "fixed6")]
    pub r_at_10: f64,
    #[serde(rename = "R@50", serialize_with = "fixed6")]
    pub r_at_50: f64,
    #[serde(rename = "MRR", serialize_with = "fixed6")]
    pub mrr: f64,
    pub pool_size: usize,
    pub n_queries: usize,
    pub flags: Vec<String>,
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Imu => "imu",
        Modality::Video => "video",
        Modality::Text => "text",
    }
}

/// Full-pool retrieval between IMU embeddings (keyed by window id) and the
/// anchors of the same windows. Anchors for windows outside `imu` are
/// ignored; IMU windows without an anchor are a coverage error.
pub fn eval_retrieval(
    imu: &[(String, Vec<f64>)],
    anchors: &AnchorMap,
    direction: RetrievalDirection,
) -> Result<RetrievalMetrics> {
    if imu.is_empty() {
        return Err(Error::invalid("eval_retrieval", "no IMU embeddings"));
    }
    let want = direction.anchor_modality();
    if let Some(a) = anchors.values().find(|a| a.modality != want) {
        return Err(Error::Config(format!(
            "direction {} needs {} anchors, found a {} anchor for {}",
            direction.as_str(),
            modality_name(want),
            modality_name(a.modality),
            a.window_id
        )));
    }
    let missing: Vec<String> = imu
        .iter()
        .filter(|(id, _)| !anchors.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds {
            what: format!("{} anchor", modality_name(want)),
            ids: missing,
        });
    }
    let paired: Vec<(String, Vec<f64>)> = imu
        .iter()
        .map(|(id, _)| (id.clone(), anchors[id].vector.clone()))
        .collect();
    let (queries, pool) = if direction.imu_queries() {
        (imu, paired.as_slice())
    } else {
        (paired.as_slice(), imu)
    };
    let results = queries
        .par_iter()
        .map(|(id, q)| rank_pool(q, pool, id))
        .collect::<Result<Vec<_>>>()?;
    let mut flags = Vec::new();
    if pool.len() < 50 {
        flags.push(POOL_FLAG_LT_50.to_string());
    }
    Ok(RetrievalMetrics {
        task: "retrieval".into(),
        direction,
        r_at_1: recall_at_k(&results, 1)?,
        r_at_10: recall_at_k(&results, 10)?,
        r_at_50: recall_at_k(&results, 50)?,
        mrr: mrr(&results)?,
        pool_size: pool.len(),
        n_queries: results.len(),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::AnchorEmbedding;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, v: &[f64]) -> (String, Vec<f64>) {
        (id.to_string(), v.to_vec())
    }

    fn result(rank: usize) -> RetrievalResult {
        RetrievalResult {
            query_id: "q".into(),
            ranked_pool_ids: vec![],
            gold_rank: rank,
        }
    }

    #[test]
    fn rank_pool_examples() {
        let pool = vec![item("gold", &[1.0, 0.0]), item("other", &[0.0, 1.0])];
        assert_eq!(rank_pool(&[1.0, 0.0], &pool, "gold").unwrap().gold_rank, 1);

        let same = vec![item("c", &[1.0, 0.0]), item("a", &[1.0, 0.0]), item("b", &[1.0, 0.0])];
        let r = rank_pool(&[1.0, 0.0], &same, "b").unwrap();
        assert_eq!(r.ranked_pool_ids, vec!["a", "b", "c"]);
        assert_eq!(r.gold_rank, 2);

        let pool = vec![item("a", &[0.9, 0.436]), item("b", &[0.5, 0.866])];
        assert_eq!(rank_pool(&[1.0, 0.0], &pool, "b").unwrap().gold_rank, 2);

        assert!(matches!(rank_pool(&[1.0, 0.0], &pool, "zz"), Err(Error::MissingIds { .. })));
        assert!(matches!(
            rank_pool(&[1.0], &pool, "a"),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn recall_and_mrr_hand_values() {
        let ones: Vec<_> = (0..5).map(|_| result(1)).collect();
        assert_eq!(recall_at_k(&ones, 1).unwrap(), 1.0);
        assert_eq!(mrr(&ones).unwrap(), 1.0);
        let r: Vec<_> = [1, 3, 7].into_iter().map(result).collect();
        assert!((recall_at_k(&r, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&r, 100).unwrap(), 1.0);
        let r: Vec<_> = [1, 2, 4].into_iter().map(result).collect();
        assert!((mrr(&r).unwrap() - 0.583333).abs() < 1e-6);
        assert_eq!(mrr(&[result(2)]).unwrap(), 0.5);
        assert!(mrr(&[]).is_err());
        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&r, 0).is_err());
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn anchor_map(items: &[(String, Vec<f64>)], modality: Modality) -> AnchorMap {
        items
            .iter()
            .map(|(id, v)| {
                (
                    id.clone(),
                    AnchorEmbedding {
                        window_id: id.clone(),
                        modality,
                        vector: v.clone(),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn self_retrieval_is_perfect_and_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imu: Vec<_> = (0..20).map(|i| (format!("w{i:02}"), random_unit(&mut rng, 8))).collect();
        let anchors = anchor_map(&imu, Modality::Video);
        for dir in [RetrievalDirection::ImuToVideo, RetrievalDirection::VideoToImu] {
            let m = eval_retrieval(&imu, &anchors, dir).unwrap();
            assert_eq!((m.r_at_1, m.r_at_10, m.r_at_50, m.mrr), (1.0, 1.0, 1.0, 1.0));
            assert_eq!(m.flags, vec![POOL_FLAG_LT_50.to_string()]);
            assert_eq!((m.pool_size, m.n_queries), (20, 20));
        }
        assert!(matches!(
            eval_retrieval(&imu, &anchors, RetrievalDirection::TextToImu),
            Err(Error::Config(_))
        ));
        let partial = anchor_map(&imu[..19], Modality::Video);
        match eval_retrieval(&imu, &partial, RetrievalDirection::ImuToVideo) {
            Err(Error::MissingIds { ids, .. }) => assert_eq!(ids, vec!["w19".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn symmetric_set_gives_equal_directions() {
        // Identical vectors on both sides make the similarity matrix symmetric.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imu: Vec<_> = (0..60).map(|i| (format!("w{i:02}"), random_unit(&mut rng, 3))).collect();
        let anchors = anchor_map(&imu, Modality::Video);
        let a = eval_retrieval(&imu, &anchors, RetrievalDirection::ImuToVideo).unwrap();
        let b = eval_retrieval(&imu, &anchors, RetrievalDirection::VideoToImu).unwrap();
        assert_eq!((a.r_at_1, a.mrr), (b.r_at_1, b.mrr));
        assert!(a.flags.is_empty());
    }

    #[test]
    fn random_embeddings_give_chance_mrr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chance = (1..=100).map(|r| 1.0 / r as f64).sum::<f64>() / 100.0;
        let mut total = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let pool: Vec<_> = (0..100).map(|i| (format!("p{i:03}"), random_unit(&mut rng, 16))).collect();
            let q = random_unit(&mut rng, 16);
            let gold = format!("p{:03}", rng.gen_range(0..100));
            total += 1.0 / rank_pool(&q, &pool, &gold).unwrap().gold_rank as f64;
        }
        let m = total / trials as f64;
        assert!((m - chance).abs() < 0.01, "{m} vs {chance}");
    }

    #[test]
    fn metrics_json_uses_six_decimals() {
        let m = RetrievalMetrics {
            task: "retrieval".into(),
            direction: RetrievalDirection::TextToImu,
            r_at_1: 1.0,
            r_at_10: 0.5,
            r_at_50: 1.0 / 3.0,
            mrr: 0.25,
            pool_size: 3,
            n_queries: 3,
            flags: vec![],
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"R@1\":1.000000"), "{s}");
        assert!(s.contains("\"R@50\":0.333333"), "{s}");
        assert!(s.contains("\"direction\":\"text2imu\""), "{s}");
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force(seed in 0u64..10_000, n in 1usize..64, dim in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse values so ties actually occur.
            let pool: Vec<_> = (0..n)
                .map(|i| (format!("{:02}", (i * 7) % 64), (0..dim).map(|_| rng.gen_range(-2i32..=2) as f64).collect::<Vec<f64>>()))
                .collect();
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
            let gold = pool[rng.gen_range(0..n)].0.clone();
            let r = rank_pool(&q, &pool, &gold).unwrap();
            let mut brute: Vec<(f64, String)> = pool.iter().map(|(id, v)| (dot(&q, v), id.clone())).collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            let ids: Vec<String> = brute.into_iter().map(|(_, id)| id).collect();
            prop_assert_eq!(&r.ranked_pool_ids, &ids);
            prop_assert_eq!(r.gold_rank, ids.iter().position(|i| *i == gold).unwrap() + 1);
        }

        #[test]
        fn metric_bounds(ranks in prop::collection::vec(1usize..100, 1..50)) {
            let rs: Vec<_> = ranks.iter().map(|&r| result(r)).collect();
            let m = mrr(&rs).unwrap();
            let mut last = 0.0;
            for k in [1, 5, 10, 50, 100] {
                let r = recall_at_k(&rs, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r) && r >= last);
                last = r;
            }
            prop_assert!(m >= recall_at_k(&rs, 1).unwrap() && m <= 1.0);
        }
    }
}
