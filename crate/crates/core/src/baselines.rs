//! Comparator compression policies.
//!
//! Every policy sees the uncompressed prompt cache and the prefill attention
//! record (prompt rows first, then any soft-token rows) and returns a cache
//! of `min(B, L)` rows per layer in position order, plus the importance
//! vector it ranked by (a distribution over prompt positions).

use std::collections::BTreeMap;
use std::fmt;

use crate::backbone::{AttentionRecord, HeadCache, KvCache, LayerCache};
use crate::consolidate::similarity;
use crate::error::{Error, Result};
use crate::numerics::{top_k_indices, Matrix, Rng};
use crate::probe::{partition, partition_with, probe_scores, PartitionResult};

/// A compressed cache and the scores that chose it.
#[derive(Clone, Debug, PartialEq)]
pub struct Compressed {
    pub cache: KvCache,
    pub importance: Vec<f64>,
}

/// Policy name plus its parameters, written `name` or
/// `name:key=value,key=value` (for example `streaming:sink=4`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Policy {
    pub name: String,
    pub params: BTreeMap<String, String>,
}

pub const POLICY_NAMES: [&str; 7] = ["full", "meta-soft", "h2o", "streaming", "snapkv", "random", "mean-merge"];

impl Policy {
    pub fn parse(text: &str) -> Result<Self> {
        let (name, rest) = text.split_once(':').unwrap_or((text, ""));
        let name = name.trim();
        if !POLICY_NAMES.contains(&name) {
            return Err(Error::Config(format!("unknown policy `{name}`")));
        }
        let mut params = BTreeMap::new();
        for kv in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("policy parameter `{kv}` lacks `=`")))?;
            params.insert(k.trim().to_string(), v.trim().to_string());
        }
        let allowed: &[&str] = match name {
            "streaming" => &["sink"],
            "snapkv" => &["window", "pool"],
            "random" => &["seed"],
            "meta-soft" => &["gamma"],
            _ => &[],
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!("policy `{name}` has no parameter `{bad}`")));
        }
        let p = Self { name: name.to_string(), params };
        // surface bad numbers at parse time
        for key in p.params.keys() {
            if key == "gamma" {
                p.param_f64(key, 0.0)?;
            } else {
                p.param_usize(key, 0)?;
            }
        }
        Ok(p)
    }

    pub fn param_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.params.get(key).map_or(Ok(default), |v| {
            v.parse().map_err(|_| Error::Config(format!("policy `{}`: `{key}={v}` is not a count", self.name)))
        })
    }

    pub fn param_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.params.get(key).map_or(Ok(default), |v| {
            v.parse().map_err(|_| Error::Config(format!("policy `{}`: `{key}={v}` is not a number", self.name)))
        })
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            write!(f, "{}{k}={v}", if i == 0 { ':' } else { ',' })?;
        }
        Ok(())
    }
}

pub const DEFAULT_SINK: usize = 4;
pub const DEFAULT_SNAP_WINDOW: usize = 32;
pub const DEFAULT_SNAP_POOL: usize = 5;

fn prompt_len(cache: &KvCache) -> Result<usize> {
    let lens = cache.lens();
    match lens.first() {
        Some(&l) if lens.iter().all(|&x| x == l) => Ok(l),
        _ => Err(Error::Contract("policies expect an uncompressed cache".into())),
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let z: f64 = v.iter().sum();
    if z > 0.0 {
        v.iter().map(|x| x / z).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

fn indicator(l: usize, keep: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; l];
    keep.iter().for_each(|&i| v[i] = 1.0);
    normalized(&v)
}

fn same_for_all_layers(cache: &KvCache, keep: Vec<usize>) -> Result<KvCache> {
    let sets = vec![keep; cache.layers.len()];
    Ok(partition_with(cache, &sets)?.kept_cache())
}

fn top_budget(scores: &[f64], budget: usize) -> Vec<usize> {
    top_k_indices(scores, budget.min(scores.len()))
}

/// Head- and layer-averaged attention each prompt column receives from
/// prompt `rows`.
fn column_mass(record: &AttentionRecord, rows: std::ops::Range<usize>, l: usize) -> Result<Vec<f64>> {
    if record.n_rows() < l {
        return Err(Error::Contract(format!("attention record has {} rows for a prompt of {l}", record.n_rows())));
    }
    let mut s = vec![0.0; l];
    for heads in &record.probs {
        for p in heads {
            for i in rows.clone() {
                s.iter_mut().zip(&p.row(i)[..l]).for_each(|(a, v)| *a += v);
            }
        }
    }
    let n = (record.n_layers() * record.n_heads()) as f64;
    s.iter_mut().for_each(|a| *a /= n);
    Ok(s)
}

/// Cumulative attention (heavy hitters).
pub fn h2o_policy(cache: &KvCache, record: &AttentionRecord, budget: usize) -> Result<Compressed> {
    let l = prompt_len(cache)?;
    let s = column_mass(record, 0..l, l)?;
    let keep = top_budget(&s, budget);
    Ok(Compressed { cache: same_for_all_layers(cache, keep)?, importance: normalized(&s) })
}

/// First `sink` positions plus the most recent `budget - sink`.
pub fn streaming_policy(cache: &KvCache, budget: usize, sink: usize) -> Result<Compressed> {
    if sink >= budget {
        return Err(Error::Parameter(format!("sink {sink} must be below the budget {budget}")));
    }
    let l = prompt_len(cache)?;
    let keep: Vec<usize> = if budget >= l {
        (0..l).collect()
    } else {
        (0..sink).chain(l - (budget - sink)..l).collect()
    };
    Ok(Compressed { cache: same_for_all_layers(cache, keep.clone())?, importance: indicator(l, &keep) })
}

/// Attention from the last `window` prompt rows, max-pooled over `pool`
/// neighbouring columns.
pub fn snapkv_policy(cache: &KvCache, record: &AttentionRecord, budget: usize, window: usize, pool: usize) -> Result<Compressed> {
    let l = prompt_len(cache)?;
    if window == 0 || window > l {
        return Err(Error::Parameter(format!("snapkv window {window} must lie in 1..={l}")));
    }
    if pool == 0 {
        return Err(Error::Parameter("snapkv pool width must be at least 1".into()));
    }
    let raw = column_mass(record, l - window..l, l)?;
    let half = pool / 2;
    let pooled: Vec<f64> = (0..l)
        .map(|j| raw[j.saturating_sub(half)..(j + pool - half).min(l)].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let keep = top_budget(&pooled, budget);
    Ok(Compressed { cache: same_for_all_layers(cache, keep)?, importance: normalized(&pooled) })
}

/// Uniformly random subset.
pub fn random_policy(cache: &KvCache, budget: usize, rng: &mut Rng) -> Result<Compressed> {
    let l = prompt_len(cache)?;
    let keep = rng.subset(l, budget.min(l));
    Ok(Compressed { cache: same_for_all_layers(cache, keep.clone())?, importance: indicator(l, &keep) })
}

/// Merge every dropped row's value into the kept row with the most similar
/// key, as a plain mean. Keys and positions stay put.
pub fn mean_merge(partition: &PartitionResult) -> Result<KvCache> {
    let mut layers = Vec::with_capacity(partition.layers.len());
    for lp in &partition.layers {
        let mut heads = Vec::with_capacity(lp.kept.heads.len());
        for (kh, dh) in lp.kept.heads.iter().zip(&lp.dropped.heads) {
            let mut values = kh.values.clone();
            if dh.keys.rows() > 0 {
                let sim = similarity(&dh.keys, &kh.keys, kh.keys.cols())?;
                let mut sums = kh.values.clone();
                let mut counts = vec![1usize; kh.keys.rows()];
                for i in 0..sim.rows() {
                    let j = top_k_indices(sim.row(i), 1)[0];
                    counts[j] += 1;
                    sums.row_mut(j).iter_mut().zip(dh.values.row(i)).for_each(|(a, b)| *a += b);
                }
                for (j, &c) in counts.iter().enumerate() {
                    if c > 1 {
                        let inv = 1.0 / c as f64;
                        values.row_mut(j).iter_mut().zip(sums.row(j)).for_each(|(a, b)| *a = b * inv);
                    }
                }
            }
            heads.push(HeadCache { keys: kh.keys.clone(), values });
        }
        layers.push(LayerCache { heads, positions: lp.kept.positions.clone() });
    }
    Ok(KvCache { layers, next_position: partition.next_position })
}

/// Probe top-`budget` per layer, then [`mean_merge`]. Needs the `k`
/// soft-token rows in `record`.
pub fn mean_merge_policy(cache: &KvCache, record: &AttentionRecord, budget: usize, k: usize) -> Result<Compressed> {
    let l = prompt_len(cache)?;
    let scores = probe_scores(record, l, k)?;
    let part = partition(cache, &scores, budget)?;
    Ok(Compressed { cache: mean_merge(&part)?, importance: scores.mean_over(&[]) })
}

/// Row-wise L2 distance between two value matrices at row `j`.
pub fn value_displacement(before: &Matrix, after: &Matrix, j: usize) -> f64 {
    before.row(j).iter().zip(after.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{prefill, BackboneConfig, BackboneWeights};
    use crate::consolidate::{consolidate, FlowConfig};

    fn fixture(l: usize) -> (KvCache, AttentionRecord) {
        let cfg = BackboneConfig::new(256, 16, 2, 2, 64).unwrap();
        let w = BackboneWeights::init(&cfg, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(6);
        let toks: Vec<u32> = (0..l).map(|_| 144 + rng.below(100) as u32).collect();
        let soft = Matrix::gaussian(2, 16, 1.0, &mut rng);
        let p = prefill(&w, &toks, Some(&soft)).unwrap();
        (p.cache, p.record)
    }

    fn uniform_record(l: usize, layers: usize, heads: usize) -> AttentionRecord {
        let mut m = Matrix::zeros(l, l);
        for i in 0..l {
            for j in 0..=i {
                m[(i, j)] = 1.0 / (i + 1) as f64;
            }
        }
        AttentionRecord { probs: vec![vec![m; heads]; layers] }
    }

    #[test]
    fn every_policy_hits_the_budget_in_position_order() {
        let (cache, rec) = fixture(20);
        for b in [1, 5, 19, 20, 30] {
            let outs = [
                h2o_policy(&cache, &rec, b).unwrap(),
                snapkv_policy(&cache, &rec, b, 8, 5).unwrap(),
                random_policy(&cache, b, &mut Rng::new(1)).unwrap(),
                mean_merge_policy(&cache, &rec, b, 2).unwrap(),
            ];
            for c in outs.iter().chain(if b > 2 { Some(streaming_policy(&cache, b, 2).unwrap()) } else { None }.iter()) {
                for layer in &c.cache.layers {
                    assert_eq!(layer.len(), b.min(20));
                    assert!(layer.positions.windows(2).all(|w| w[0] < w[1]));
                }
                assert!((c.importance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn h2o_under_uniform_attention_keeps_the_earliest() {
        let (cache, _) = fixture(10);
        let rec = uniform_record(10, 2, 2);
        let c = h2o_policy(&cache, &rec, 4).unwrap();
        assert_eq!(c.cache.layers[0].positions, vec![0, 1, 2, 3]);
        assert_eq!(h2o_policy(&cache, &rec, 10).unwrap().cache, cache);
    }

    #[test]
    fn h2o_keeps_a_dominant_column() {
        let (cache, _) = fixture(8);
        let mut rec = uniform_record(8, 2, 2);
        for heads in &mut rec.probs {
            for p in heads {
                for i in 4..8 {
                    p.row_mut(i).fill(0.0);
                    p[(i, 4)] = 1.0;
                }
            }
        }
        assert_eq!(h2o_policy(&cache, &rec, 1).unwrap().cache.layers[1].positions, vec![4]);
    }

    #[test]
    fn streaming_examples() {
        let (cache, _) = fixture(10);
        assert_eq!(streaming_policy(&cache, 4, 2).unwrap().cache.layers[0].positions, vec![0, 1, 8, 9]);
        assert_eq!(streaming_policy(&cache, 3, 0).unwrap().cache.layers[0].positions, vec![7, 8, 9]);
        assert_eq!(streaming_policy(&cache, 12, 2).unwrap().cache, cache);
        assert!(matches!(streaming_policy(&cache, 4, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn snapkv_full_window_without_pooling_is_h2o() {
        let (cache, rec) = fixture(12);
        let a = snapkv_policy(&cache, &rec, 5, 12, 1).unwrap();
        let b = h2o_policy(&cache, &rec, 5).unwrap();
        assert_eq!(a.cache, b.cache);
        assert_eq!(snapkv_policy(&cache, &rec, 12, 4, 5).unwrap().cache, cache);
    }

    #[test]
    fn snapkv_pooling_lifts_neighbours() {
        let (cache, _) = fixture(12);
        let mut rec = uniform_record(12, 1, 1);
        let p = &mut rec.probs[0][0];
        for i in 8..12 {
            p.row_mut(i).fill(0.0);
            p[(i, 5)] = 1.0;
        }
        let imp = snapkv_policy(&cache, &rec, 5, 4, 5).unwrap().importance;
        for j in 3..=7 {
            assert_eq!(imp[j], imp[5]);
        }
        assert!(imp[2] < imp[5] && imp[8] < imp[5]);
    }

    #[test]
    fn random_policy_is_seeded_and_covers_everything() {
        let (cache, _) = fixture(8);
        let a = random_policy(&cache, 4, &mut Rng::new(3)).unwrap();
        let b = random_policy(&cache, 4, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(random_policy(&cache, 8, &mut Rng::new(3)).unwrap().cache, cache);
        let mut seen = [false; 8];
        for seed in 0..200 {
            for &p in &random_policy(&cache, 4, &mut Rng::new(seed)).unwrap().cache.layers[0].positions {
                seen[p] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn one_head_partition(keep_k: Matrix, keep_v: Matrix, drop_k: Matrix, drop_v: Matrix) -> PartitionResult {
        let nk = keep_k.rows();
        let nd = drop_k.rows();
        let layer = LayerCache {
            heads: vec![HeadCache { keys: keep_k.vstack(&drop_k).unwrap(), values: keep_v.vstack(&drop_v).unwrap() }],
            positions: (0..nk + nd).collect(),
        };
        let cache = KvCache { layers: vec![layer], next_position: nk + nd };
        partition_with(&cache, &[(0..nk).collect()]).unwrap()
    }

    #[test]
    fn mean_merge_examples() {
        let kk = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let kv = Matrix::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]).unwrap();
        let dk = Matrix::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let dv = Matrix::from_rows(&[vec![4.0, 0.0]]).unwrap();
        let merged = mean_merge(&one_head_partition(kk, kv, dk, dv)).unwrap();
        let v = &merged.layers[0].heads[0].values;
        assert_eq!(v.row(0), &[3.0, 2.0]);
        assert_eq!(v.row(1), &[6.0, 8.0]);
        assert_eq!(merged.layers[0].positions, vec![0, 1]);
    }

    #[test]
    fn gated_flow_displaces_an_overloaded_value_less_than_mean_merge() {
        let mut rng = Rng::new(17);
        let mut kk = Matrix::gaussian(12, 4, 0.3, &mut rng);
        kk.row_mut(0).copy_from_slice(&[3.0, 0.0, 0.0, 0.0]);
        let mut kv = Matrix::gaussian(12, 4, 0.1, &mut rng);
        kv.row_mut(0).fill(0.0);
        let mut dk = Matrix::gaussian(6, 4, 0.05, &mut rng);
        let mut dv = Matrix::gaussian(6, 4, 0.1, &mut rng);
        for i in 0..6 {
            dk[(i, 0)] += 3.0;
            dv[(i, 1)] += 1.0;
        }
        let part = one_head_partition(kk.clone(), kv.clone(), dk, dv);
        let mm = mean_merge(&part).unwrap();
        let (afa, _) = consolidate(&part, &FlowConfig::default()).unwrap();
        let d_mm = value_displacement(&kv, &mm.layers[0].heads[0].values, 0);
        let d_afa = value_displacement(&kv, &afa.layers[0].heads[0].values, 0);
        assert!(d_afa < d_mm, "afa {d_afa} vs mean-merge {d_mm}");
    }

    #[test]
    fn policy_strings_round_trip() {
        let p = Policy::parse("snapkv:window=16,pool=3").unwrap();
        assert_eq!(p.param_usize("window", 0).unwrap(), 16);
        assert_eq!(p.to_string(), "snapkv:pool=3,window=16");
        assert_eq!(Policy::parse(&p.to_string()).unwrap(), p);
        assert!(matches!(Policy::parse("lru"), Err(Error::Config(_))));
        assert!(matches!(Policy::parse("streaming:window=2"), Err(Error::Config(_))));
        assert!(matches!(Policy::parse("streaming:sink=x"), Err(Error::Config(_))));
    }
}
