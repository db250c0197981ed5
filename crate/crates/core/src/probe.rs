//! Importance scores from probe rows and the keep/drop partition they induce.

use std::ops::Range;

use crate::backbone::{AttentionRecord, KvCache, LayerCache};
use crate::error::{Error, Result};
use crate::numerics::top_k_indices;

/// One score per prompt position and layer. Every layer's row sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    pub per_layer: Vec<Vec<f64>>,
}

impl ImportanceScores {
    pub fn prompt_len(&self) -> usize {
        self.per_layer.first().map_or(0, Vec::len)
    }

    /// Mean over `layers` (all layers when empty).
    pub fn mean_over(&self, layers: &[usize]) -> Vec<f64> {
        let all: Vec<usize> = (0..self.per_layer.len()).collect();
        let layers = if layers.is_empty() { &all[..] } else { layers };
        let mut out = vec![0.0; self.prompt_len()];
        for &l in layers {
            out.iter_mut().zip(&self.per_layer[l]).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / layers.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// Attention of query `rows` restricted to the first `l` columns and
/// renormalized, averaged over rows and heads, per layer.
pub fn scores_from_rows(record: &AttentionRecord, rows: Range<usize>, l: usize) -> Result<ImportanceScores> {
    if rows.is_empty() {
        return Err(Error::Contract("no probe rows".into()));
    }
    if rows.end > record.n_rows() {
        return Err(Error::Contract(format!(
            "probe rows {}..{} missing from an attention record of {} rows",
            rows.start,
            rows.end,
            record.n_rows()
        )));
    }
    let mut per_layer = Vec::with_capacity(record.n_layers());
    for heads in &record.probs {
        let mut acc = vec![0.0; l];
        for p in heads {
            if p.cols() < l {
                return Err(Error::Contract(format!("record has {} columns, prompt needs {l}", p.cols())));
            }
            for i in rows.clone() {
                let r = &p.row(i)[..l];
                let z: f64 = r.iter().sum();
                if z <= 0.0 {
                    return Err(Error::Contract(format!("probe row {i} puts no mass on the prompt")));
                }
                acc.iter_mut().zip(r).for_each(|(a, v)| *a += v / z);
            }
        }
        let inv = 1.0 / (heads.len() * rows.len()) as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        per_layer.push(acc);
    }
    Ok(ImportanceScores { per_layer })
}

/// Scores from the `k` soft-token rows that follow an `l`-token prompt in a
/// prefill record.
pub fn probe_scores(record: &AttentionRecord, l: usize, k: usize) -> Result<ImportanceScores> {
    if k == 0 {
        return Err(Error::Contract("probe needs at least one soft token".into()));
    }
    scores_from_rows(record, l..l + k, l)
}

/// Kept and dropped cache rows of one layer (row indices into the
/// uncompressed cache, ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPartition {
    pub keep: Vec<usize>,
    pub drop: Vec<usize>,
    pub kept: LayerCache,
    pub dropped: LayerCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionResult {
    pub layers: Vec<LayerPartition>,
    pub next_position: usize,
}

impl PartitionResult {
    /// The kept rows alone, as a cache (hard eviction).
    pub fn kept_cache(&self) -> KvCache {
        KvCache { layers: self.layers.iter().map(|p| p.kept.clone()).collect(), next_position: self.next_position }
    }
}

/// Split every layer of `cache` into the given keep sets (any order, no
/// duplicates) and their complements.
pub fn partition_with(cache: &KvCache, keep: &[Vec<usize>]) -> Result<PartitionResult> {
    if keep.len() != cache.layers.len() {
        return Err(Error::Shape(format!("{} keep sets for {} layers", keep.len(), cache.layers.len())));
    }
    let mut layers = Vec::with_capacity(keep.len());
    for (lc, ks) in cache.layers.iter().zip(keep) {
        let n = lc.len();
        let mut mask = vec![false; n];
        for &i in ks {
            if i >= n || mask[i] {
                return Err(Error::Parameter(format!("keep index {i} out of range or repeated (cache has {n} rows)")));
            }
            mask[i] = true;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let drop: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
        layers.push(LayerPartition { kept: lc.select(&keep), dropped: lc.select(&drop), keep, drop });
    }
    Ok(PartitionResult { layers, next_position: cache.next_position })
}

/// Per-layer top-`budget` partition by score. The last `force_recent` rows
/// are kept regardless and the rest of the budget goes by score.
pub fn partition_recent(cache: &KvCache, scores: &ImportanceScores, budget: usize, force_recent: usize) -> Result<PartitionResult> {
    if budget < 1 {
        return Err(Error::Parameter("budget must be at least 1".into()));
    }
    if force_recent > budget {
        return Err(Error::Parameter(format!("force_recent {force_recent} exceeds budget {budget}")));
    }
    if scores.per_layer.len() != cache.layers.len() {
        return Err(Error::Shape(format!("scores for {} layers, cache has {}", scores.per_layer.len(), cache.layers.len())));
    }
    let mut keep = Vec::with_capacity(cache.layers.len());
    for (lc, s) in cache.layers.iter().zip(&scores.per_layer) {
        let n = lc.len();
        if s.len() != n {
            return Err(Error::Shape(format!("{} scores for {n} cache rows", s.len())));
        }
        if budget >= n {
            keep.push((0..n).collect());
            continue;
        }
        let recent = n - force_recent;
        let mut ks: Vec<usize> = (recent..n).collect();
        ks.extend(top_k_indices(&s[..recent], budget - force_recent));
        keep.push(ks);
    }
    partition_with(cache, &keep)
}

pub fn partition(cache: &KvCache, scores: &ImportanceScores, budget: usize) -> Result<PartitionResult> {
    partition_recent(cache, scores, budget, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{prefill, BackboneConfig, BackboneWeights};
    use crate::numerics::{Matrix, Rng};
    use proptest::prelude::*;

    struct Fixture {
        w: BackboneWeights,
        p: crate::backbone::Prefill,
        toks: Vec<u32>,
        soft: Matrix,
    }

    fn fixture_full(l: usize, k: usize) -> Fixture {
        let cfg = BackboneConfig::new(256, 16, 2, 2, 64).unwrap();
        let w = BackboneWeights::init(&cfg, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(6);
        let toks: Vec<u32> = (0..l).map(|_| 144 + rng.below(100) as u32).collect();
        let soft = Matrix::gaussian(k, 16, 1.0, &mut rng);
        let p = prefill(&w, &toks, Some(&soft)).unwrap();
        Fixture { w, p, toks, soft }
    }

    fn fixture(l: usize, k: usize) -> (BackboneWeights, crate::backbone::Prefill) {
        let f = fixture_full(l, k);
        (f.w, f.p)
    }

    #[test]
    fn scores_are_distributions() {
        let (_, p) = fixture(12, 3);
        let s = probe_scores(&p.record, 12, 3).unwrap();
        for layer in &s.per_layer {
            assert_eq!(layer.len(), 12);
            assert!((layer.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(layer.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_zero_matches_raw_query_key_oracle() {
        let (l, k) = (10, 2);
        let Fixture { w, p, toks, soft } = fixture_full(l, k);
        let cfg = &w.config;
        let x = w.embed(&toks, 0).unwrap().vstack(&w.position_rows(&soft, l).unwrap()).unwrap();
        let lw = &w.layers[0];
        let (z, _) = crate::backbone::rms_norm(&x, &lw.attn_norm);
        let q = crate::numerics::matmul(&z, &lw.wq).unwrap();
        let kk = crate::numerics::matmul(&z, &lw.wk).unwrap();
        let dh = cfg.d_head;
        let mut want = vec![0.0; l];
        for h in 0..cfg.n_heads {
            for i in l..l + k {
                // softmax over prompt columns only
                let logits: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|c| q[(i, h * dh + c)] * kk[(j, h * dh + c)]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                for j in 0..l {
                    want[j] += (logits[j] - m).exp() / z / (cfg.n_heads * k) as f64;
                }
            }
        }
        let got = &probe_scores(&p.record, l, k).unwrap().per_layer[0];
        for j in 0..l {
            assert!((got[j] - want[j]).abs() < 1e-12, "col {j}: {} vs {}", got[j], want[j]);
        }
    }

    #[test]
    fn missing_soft_rows_is_a_contract_error() {
        let (_, p) = fixture(8, 2);
        assert!(matches!(probe_scores(&p.record, 8, 3), Err(Error::Contract(_))));
        assert!(matches!(probe_scores(&p.record, 8, 0), Err(Error::Contract(_))));
    }

    fn scores_one_layer(cache: &KvCache, s: Vec<f64>) -> ImportanceScores {
        ImportanceScores { per_layer: vec![s; cache.layers.len()] }
    }

    #[test]
    fn partition_examples() {
        let (_, p) = fixture(4, 1);
        let s = scores_one_layer(&p.cache, vec![0.1, 0.4, 0.2, 0.3]);
        let r = partition(&p.cache, &s, 2).unwrap();
        assert_eq!(r.layers[0].keep, vec![1, 3]);
        assert_eq!(r.layers[0].drop, vec![0, 2]);
        let all = partition(&p.cache, &s, 8).unwrap();
        assert_eq!(all.layers[1].keep, vec![0, 1, 2, 3]);
        assert!(all.layers[1].drop.is_empty());
        let tie = scores_one_layer(&p.cache, vec![0.25; 4]);
        assert_eq!(partition(&p.cache, &tie, 2).unwrap().layers[0].keep, vec![0, 1]);
        assert!(matches!(partition(&p.cache, &s, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn forced_recent_rows_are_kept() {
        let (_, p) = fixture(6, 1);
        let s = scores_one_layer(&p.cache, vec![0.5, 0.3, 0.1, 0.05, 0.03, 0.02]);
        let r = partition_recent(&p.cache, &s, 3, 1).unwrap();
        assert_eq!(r.layers[0].keep, vec![0, 1, 5]);
    }

    #[test]
    fn kept_rows_carry_positions_and_values() {
        let (_, p) = fixture(6, 1);
        let s = scores_one_layer(&p.cache, vec![0.0, 0.3, 0.1, 0.05, 0.5, 0.02]);
        let r = partition(&p.cache, &s, 2).unwrap();
        let lp = &r.layers[1];
        assert_eq!(lp.kept.positions, vec![1, 4]);
        assert_eq!(lp.dropped.positions, vec![0, 2, 3, 5]);
        assert_eq!(lp.kept.heads[1].values.row(1), p.cache.layers[1].heads[1].values.row(4));
        assert_eq!(r.kept_cache().next_position, 6);
    }

    proptest! {
        #[test]
        fn partition_invariant_under_monotone_maps(raw in proptest::collection::vec(0.0f64..1.0, 6)) {
            let (_, p) = fixture(6, 1);
            let a = partition(&p.cache, &scores_one_layer(&p.cache, raw.clone()), 3).unwrap();
            let mapped: Vec<f64> = raw.iter().map(|v| (3.0 * v).exp() + 2.0).collect();
            let b = partition(&p.cache, &scores_one_layer(&p.cache, mapped), 3).unwrap();
            prop_assert_eq!(&a.layers[0].keep, &b.layers[0].keep);
            prop_assert_eq!(a.layers[0].keep.len() + a.layers[0].drop.len(), 6);
        }

        #[test]
        fn partition_ignores_values(raw in proptest::collection::vec(0.0f64..1.0, 6), seed in 0u64..1000) {
            let (_, p) = fixture(6, 1);
            let mut shuffled = p.cache.clone();
            let mut rng = Rng::new(seed);
            for layer in &mut shuffled.layers {
                for h in &mut layer.heads {
                    h.values = Matrix::gaussian(h.values.rows(), h.values.cols(), 3.0, &mut rng);
                }
            }
            let s = scores_one_layer(&p.cache, raw);
            prop_assert_eq!(
                partition(&p.cache, &s, 2).unwrap().layers[0].keep.clone(),
                partition(&shuffled, &s, 2).unwrap().layers[0].keep.clone()
            );
        }

        #[test]
        fn permuting_rows_permutes_the_keep_set(raw in proptest::collection::vec(0.0f64..1.0, 6).prop_filter("distinct", |v| v.iter().enumerate().all(|(i, a)| v[..i].iter().all(|b| b != a))), seed in 0u64..1000) {
            let (_, p) = fixture(6, 1);
            let mut perm: Vec<usize> = (0..6).collect();
            Rng::new(seed).shuffle(&mut perm);
            let mut permuted = p.cache.clone();
            for (lp, lc) in permuted.layers.iter_mut().zip(&p.cache.layers) {
                for (hp, hc) in lp.heads.iter_mut().zip(&lc.heads) {
                    hp.keys = hc.keys.select_rows(&perm);
                    hp.values = hc.values.select_rows(&perm);
                }
            }
            let permuted_scores: Vec<f64> = perm.iter().map(|&i| raw[i]).collect();
            let a = partition(&p.cache, &scores_one_layer(&p.cache, raw), 3).unwrap();
            let b = partition(&permuted, &scores_one_layer(&permuted, permuted_scores.clone()), 3).unwrap();
            let mut mapped: Vec<usize> = b.layers[0].keep.iter().map(|&i| perm[i]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(&a.layers[0].keep, &mapped);
        }
    }
}
