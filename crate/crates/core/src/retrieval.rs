//! Multi-granularity similarity scoring, gallery ranking and Recall@K.
//!
//! The similarity of an image-text pair is the unweighted sum of the cosine
//! similarities of corresponding embedding slots: global, each of the D
//! coarse slots, and each of the P fine slots. A query hit is identity-level:
//! any gallery image with the query's identity inside the top K counts.

use std::collections::BTreeMap;
use std::path::Path;

use crate::embedding::{
    read_embedding_file, write_embedding_file, EmbeddingRecord, EmbeddingSet,
};
use crate::error::{Error, Result};
use crate::loss::cosine_value;

/// Immutable gallery of image embedding sets with identity labels.
#[derive(Clone, Debug)]
pub struct GalleryIndex {
    d: usize,
    num_coarse: usize,
    num_fine: usize,
    records: Vec<EmbeddingRecord>,
}

impl GalleryIndex {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Config("empty gallery".to_string()))?;
        let (d, dd, pp) = (
            first.set.dim(),
            first.set.num_coarse(),
            first.set.num_fine(),
        );
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if r.set.dim() != d || r.set.num_coarse() != dd || r.set.num_fine() != pp {
                return Err(Error::ShapeMismatch {
                    context: "gallery record".to_string(),
                    expected: vec![d, dd, pp],
                    got: vec![r.set.dim(), r.set.num_coarse(), r.set.num_fine()],
                });
            }
            if !seen.insert(r.id) {
                return Err(Error::Config(format!("duplicate gallery id {}", r.id)));
            }
        }
        Ok(GalleryIndex {
            d,
            num_coarse: dd,
            num_fine: pp,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.num_coarse, self.num_fine)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_embedding_file(path, self.d, self.num_coarse, self.num_fine, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, records) = read_embedding_file(path)?;
        GalleryIndex::new(records)
    }
}

/// Per-granularity cosine terms of one pair score.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SimilarityBreakdown {
    pub global: f64,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

impl SimilarityBreakdown {
    pub fn total(&self) -> f64 {
        self.global + self.coarse.iter().sum::<f64>() + self.fine.iter().sum::<f64>()
    }
}

/// Summed cosine similarity across all corresponding slots; range is
/// [-(1+D+P), 1+D+P].
pub fn pair_similarity(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
) -> Result<(f64, SimilarityBreakdown)> {
    if a.dim() != b.dim() || a.num_coarse() != b.num_coarse() || a.num_fine() != b.num_fine() {
        return Err(Error::ShapeMismatch {
            context: "pair_similarity".to_string(),
            expected: vec![a.dim(), a.num_coarse(), a.num_fine()],
            got: vec![b.dim(), b.num_coarse(), b.num_fine()],
        });
    }
    let global = cosine_value(&a.global, &b.global)?;
    let coarse = a
        .coarse
        .iter()
        .zip(&b.coarse)
        .map(|(x, y)| cosine_value(x, y))
        .collect::<Result<Vec<f64>>>()?;
    let fine = a
        .fine
        .iter()
        .zip(&b.fine)
        .map(|(x, y)| cosine_value(x, y))
        .collect::<Result<Vec<f64>>>()?;
    let bd = SimilarityBreakdown {
        global,
        coarse,
        fine,
    };
    Ok((bd.total(), bd))
}

/// Ranked gallery for one query. Scores are non-increasing; equal scores
/// order by ascending image id.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub query_id: u32,
    pub ranked_ids: Vec<u32>,
    pub identities: Vec<u32>,
    pub scores: Vec<f64>,
    pub breakdowns: Option<Vec<SimilarityBreakdown>>,
}

/// Rank every gallery image against a text query embedding set by
/// descending total similarity, optionally truncated to the top k.
pub fn rank_gallery(
    query_id: u32,
    query: &EmbeddingSet,
    index: &GalleryIndex,
    top_k: Option<usize>,
    with_breakdown: bool,
) -> Result<RetrievalResult> {
    rank_gallery_with(query_id, query, index, top_k, with_breakdown, |a, b| {
        pair_similarity(a, b)
    })
}

/// [`rank_gallery`] with a custom scorer (used for per-granularity
/// diagnostics).
pub fn rank_gallery_with<F>(
    query_id: u32,
    query: &EmbeddingSet,
    index: &GalleryIndex,
    top_k: Option<usize>,
    with_breakdown: bool,
    scorer: F,
) -> Result<RetrievalResult>
where
    F: Fn(&EmbeddingSet, &EmbeddingSet) -> Result<(f64, SimilarityBreakdown)>,
{
    let mut scored: Vec<(u32, u32, f64, SimilarityBreakdown)> = index
        .records()
        .iter()
        .map(|r| {
            let (total, bd) = scorer(&r.set, query)?;
            Ok((r.id, r.identity, total, bd))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("similarity scores are finite")
            .then(a.0.cmp(&b.0))
    });
    if let Some(k) = top_k {
        scored.truncate(k);
    }
    let breakdowns = with_breakdown.then(|| scored.iter().map(|s| s.3.clone()).collect());
    Ok(RetrievalResult {
        query_id,
        ranked_ids: scored.iter().map(|s| s.0).collect(),
        identities: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.2).collect(),
        breakdowns,
    })
}

/// A text query with its target identity.
pub struct Query {
    pub id: u32,
    pub identity: u32,
    pub set: EmbeddingSet,
}

/// Fraction of queries with at least one same-identity image in the top K,
/// for each requested K.
pub fn recall_at_k(
    queries: &[Query],
    index: &GalleryIndex,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    recall_at_k_with(queries, index, ks, pair_similarity)
}

/// [`recall_at_k`] with a custom scorer.
pub fn recall_at_k_with<F>(
    queries: &[Query],
    index: &GalleryIndex,
    ks: &[usize],
    scorer: F,
) -> Result<BTreeMap<usize, f64>>
where
    F: Fn(&EmbeddingSet, &EmbeddingSet) -> Result<(f64, SimilarityBreakdown)> + Sync,
{
    if queries.is_empty() {
        return Err(Error::Config("no queries for recall".to_string()));
    }
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for q in queries {
        let result = rank_gallery_with(q.id, &q.set, index, Some(max_k), false, &scorer)?;
        let first_hit = result
            .identities
            .iter()
            .position(|&ident| ident == q.identity);
        if let Some(pos) = first_hit {
            for (&k, count) in hits.iter_mut() {
                if pos < k {
                    *count += 1;
                }
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(k, c)| (k, c as f64 / queries.len() as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Modality;
    use crate::tensor::{seeded_rng, Tensor};

    fn random_set(modality: Modality, d: usize, dd: usize, pp: usize, seed: u64) -> EmbeddingSet {
        let mut rng = seeded_rng(seed);
        EmbeddingSet {
            modality,
            global: Tensor::randn(vec![d], 1.0, &mut rng).into_data(),
            coarse: (0..dd)
                .map(|_| Tensor::randn(vec![d], 1.0, &mut rng).into_data())
                .collect(),
            fine: (0..pp)
                .map(|_| Tensor::randn(vec![d], 1.0, &mut rng).into_data())
                .collect(),
        }
    }

    #[test]
    fn identical_sets_score_one_plus_d_plus_p() {
        let s = random_set(Modality::Image, 6, 4, 4, 1);
        let mut t = s.clone();
        t.modality = Modality::Text;
        let (total, bd) = pair_similarity(&s, &t).unwrap();
        assert!((total - 9.0).abs() < 1e-12);
        assert!((bd.global - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_sets_score_zero() {
        let mk = |axis: usize| {
            let mut v = vec![0.0; 4];
            v[axis] = 1.0;
            v
        };
        let a = EmbeddingSet {
            modality: Modality::Image,
            global: mk(0),
            coarse: vec![mk(1), mk(2)],
            fine: vec![mk(3)],
        };
        let b = EmbeddingSet {
            modality: Modality::Text,
            global: mk(1),
            coarse: vec![mk(2), mk(3)],
            fine: vec![mk(0)],
        };
        let (total, _) = pair_similarity(&a, &b).unwrap();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn pair_similarity_matches_flat_loop_oracle() {
        let a = random_set(Modality::Image, 5, 2, 2, 2);
        let b = random_set(Modality::Text, 5, 2, 2, 3);
        let (total, bd) = pair_similarity(&a, &b).unwrap();

        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let mut expect = cos(&a.global, &b.global);
        for i in 0..2 {
            expect += cos(&a.coarse[i], &b.coarse[i]);
        }
        for j in 0..2 {
            expect += cos(&a.fine[j], &b.fine[j]);
        }
        assert!((total - expect).abs() < 1e-12);
        assert!((bd.total() - total).abs() < 1e-15);
    }

    #[test]
    fn pair_similarity_is_symmetric() {
        let a = random_set(Modality::Image, 5, 3, 2, 4);
        let b = random_set(Modality::Text, 5, 3, 2, 5);
        let (ab, _) = pair_similarity(&a, &b).unwrap();
        let (ba, _) = pair_similarity(&b, &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn zero_norm_component_errors() {
        let mut a = random_set(Modality::Image, 4, 1, 0, 6);
        a.coarse[0] = vec![0.0; 4];
        let b = random_set(Modality::Text, 4, 1, 0, 7);
        assert!(matches!(
            pair_similarity(&a, &b),
            Err(Error::ZeroNorm(_))
        ));
    }

    fn gallery(n: usize, d: usize, dd: usize, pp: usize, seed: u64) -> GalleryIndex {
        let records = (0..n)
            .map(|i| EmbeddingRecord {
                id: i as u32,
                identity: i as u32,
                set: random_set(Modality::Image, d, dd, pp, seed + i as u64),
            })
            .collect();
        GalleryIndex::new(records).unwrap()
    }

    #[test]
    fn gallery_of_one_ranks_that_image_first() {
        let index = gallery(1, 4, 2, 2, 10);
        let q = random_set(Modality::Text, 4, 2, 2, 20);
        let r = rank_gallery(0, &q, &index, None, false).unwrap();
        assert_eq!(r.ranked_ids, vec![0]);
    }

    #[test]
    fn duplicate_of_query_pair_ranks_first_with_max_score() {
        let mut index_records: Vec<EmbeddingRecord> = (0..5)
            .map(|i| EmbeddingRecord {
                id: i as u32,
                identity: i as u32,
                set: random_set(Modality::Image, 4, 4, 4, 30 + i as u64),
            })
            .collect();
        let q = random_set(Modality::Text, 4, 4, 4, 99);
        let mut dup = q.clone();
        dup.modality = Modality::Image;
        index_records.push(EmbeddingRecord {
            id: 5,
            identity: 5,
            set: dup,
        });
        let index = GalleryIndex::new(index_records).unwrap();
        let r = rank_gallery(0, &q, &index, None, false).unwrap();
        assert_eq!(r.ranked_ids[0], 5);
        assert!((r.scores[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_matches_full_sort_oracle() {
        let index = gallery(10, 5, 2, 2, 40);
        let q = random_set(Modality::Text, 5, 2, 2, 77);
        let r = rank_gallery(0, &q, &index, None, false).unwrap();
        let mut expect: Vec<(u32, f64)> = index
            .records()
            .iter()
            .map(|rec| (rec.id, pair_similarity(&rec.set, &q).unwrap().0))
            .collect();
        expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(
            r.ranked_ids,
            expect.iter().map(|e| e.0).collect::<Vec<u32>>()
        );
        for w in r.scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn rank_stability_under_low_scoring_insertion() {
        let index = gallery(8, 4, 1, 1, 50);
        let q = random_set(Modality::Text, 4, 1, 1, 60);
        let r_before = rank_gallery(0, &q, &index, Some(3), false).unwrap();
        let kth_score = r_before.scores[2];

        // insert an image scoring strictly below the current rank-3 score
        let mut neg = q.clone();
        neg.modality = Modality::Image;
        for v in neg
            .global
            .iter_mut()
            .chain(neg.coarse[0].iter_mut())
            .chain(neg.fine[0].iter_mut())
        {
            *v = -*v;
        }
        let mut records = index.records().to_vec();
        records.push(EmbeddingRecord {
            id: 100,
            identity: 100,
            set: neg.clone(),
        });
        let (worst, _) = pair_similarity(&neg, &q).unwrap();
        assert!(worst < kth_score);
        let bigger = GalleryIndex::new(records).unwrap();
        let r_after = rank_gallery(0, &q, &bigger, Some(3), false).unwrap();
        assert_eq!(r_before.ranked_ids, r_after.ranked_ids);
    }

    #[test]
    fn rescaling_embeddings_preserves_ranking() {
        let index = gallery(10, 4, 2, 2, 70);
        let q = random_set(Modality::Text, 4, 2, 2, 80);
        let base = rank_gallery(0, &q, &index, None, false).unwrap();

        let scaled_records: Vec<EmbeddingRecord> = index
            .records()
            .iter()
            .map(|r| {
                let mut s = r.set.clone();
                for v in s.global.iter_mut() {
                    *v *= 3.7;
                }
                for c in s.coarse.iter_mut() {
                    for v in c.iter_mut() {
                        *v *= 0.01;
                    }
                }
                EmbeddingRecord {
                    id: r.id,
                    identity: r.identity,
                    set: s,
                }
            })
            .collect();
        let scaled = GalleryIndex::new(scaled_records).unwrap();
        let got = rank_gallery(0, &q, &scaled, None, false).unwrap();
        assert_eq!(base.ranked_ids, got.ranked_ids);
    }

    #[test]
    fn recall_trivial_and_adversarial_cases() {
        // every query's target first
        let index = gallery(5, 4, 1, 1, 90);
        let queries: Vec<Query> = index
            .records()
            .iter()
            .map(|r| {
                let mut s = r.set.clone();
                s.modality = Modality::Text;
                Query {
                    id: r.id,
                    identity: r.identity,
                    set: s,
                }
            })
            .collect();
        let rec = recall_at_k(&queries, &index, &[1, 5, 10]).unwrap();
        assert_eq!(rec[&1], 1.0);
        assert_eq!(rec[&5], 1.0);
        assert_eq!(rec[&10], 1.0);

        // adversarial: target always at rank 6
        let d = 8;
        let mut records = Vec::new();
        for i in 0..5u32 {
            let mut g = vec![0.0; d];
            g[i as usize] = 1.0;
            records.push(EmbeddingRecord {
                id: i,
                identity: 99, // non-target identities
                set: EmbeddingSet {
                    modality: Modality::Image,
                    global: g,
                    coarse: vec![],
                    fine: vec![],
                },
            });
        }
        // target at id 5: orthogonal-ish, lowest score
        let mut tg = vec![0.0; d];
        tg[6] = 1.0;
        records.push(EmbeddingRecord {
            id: 5,
            identity: 7,
            set: EmbeddingSet {
                modality: Modality::Image,
                global: tg,
                coarse: vec![],
                fine: vec![],
            },
        });
        let index = GalleryIndex::new(records).unwrap();
        let mut qg = vec![0.1; d];
        qg[6] = -1.0; // anti-aligned with the target, mildly aligned with others
        let queries = vec![Query {
            id: 0,
            identity: 7,
            set: EmbeddingSet {
                modality: Modality::Text,
                global: qg,
                coarse: vec![],
                fine: vec![],
            },
        }];
        let rec = recall_at_k(&queries, &index, &[1, 5, 10]).unwrap();
        assert_eq!(rec[&1], 0.0);
        assert_eq!(rec[&5], 0.0);
        assert_eq!(rec[&10], 1.0);
    }

    #[test]
    fn recall_matches_brute_force_counting() {
        let mut rng = seeded_rng(123);
        use rand::Rng;
        let index_records: Vec<EmbeddingRecord> = (0..12)
            .map(|i| EmbeddingRecord {
                id: i as u32,
                identity: rng.gen_range(0..4),
                set: random_set(Modality::Image, 4, 1, 1, 500 + i as u64),
            })
            .collect();
        let index = GalleryIndex::new(index_records).unwrap();
        let queries: Vec<Query> = (0..6)
            .map(|i| Query {
                id: i as u32,
                identity: rng.gen_range(0..4),
                set: random_set(Modality::Text, 4, 1, 1, 900 + i as u64),
            })
            .collect();
        let ks = [1usize, 3, 5];
        let got = recall_at_k(&queries, &index, &ks).unwrap();

        for &k in &ks {
            let mut hits = 0;
            for q in &queries {
                let r = rank_gallery(q.id, &q.set, &index, None, false).unwrap();
                if r.identities.iter().take(k).any(|&i| i == q.identity) {
                    hits += 1;
                }
            }
            assert_eq!(got[&k], hits as f64 / queries.len() as f64);
        }
        // monotone in k
        assert!(got[&1] <= got[&3] && got[&3] <= got[&5]);
    }

    #[test]
    fn index_io_roundtrip_preserves_ranking() {
        let index = gallery(6, 4, 2, 1, 321);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.emb");
        index.save(&path).unwrap();
        let loaded = GalleryIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.dims(), (4, 2, 1));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let records = vec![
            EmbeddingRecord {
                id: 3,
                identity: 0,
                set: random_set(Modality::Image, 4, 0, 0, 1),
            },
            EmbeddingRecord {
                id: 3,
                identity: 1,
                set: random_set(Modality::Image, 4, 0, 0, 2),
            },
        ];
        assert!(GalleryIndex::new(records).is_err());
    }
}
