//! Attention-flow aggregation: evicted values are routed into kept values
//! over a sparse, load-balanced assignment and added through a load gate.
//!
//! Everything is computed independently for each (layer, head). Keys and
//! positions of kept rows never change.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::{HeadCache, KvCache, LayerCache};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, softmax_in_place, top_k_indices, Matrix};
use crate::probe::PartitionResult;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Neighbourhood size of the sparse assignment (clamped to the kept set).
    pub m: usize,
    /// Routing temperature.
    pub tau_r: f64,
    /// Consolidation coefficient; 0 is hard eviction.
    pub gamma: f64,
    pub eps: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { m: 4, tau_r: 1.0, gamma: 1.0, eps: 1e-6 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Parameter("flow m must be at least 1".into()));
        }
        if !(self.tau_r > 0.0 && self.tau_r.is_finite()) {
            return Err(Error::Parameter(format!("routing temperature must be positive, got {}", self.tau_r)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Parameter(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Row-sparse `|drop| x |keep|` matrix: per row, `(column, weight)` pairs in
/// ascending column order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_cols: usize,
}

impl SparseRows {
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for r in &self.rows {
            for &(j, w) in r {
                out[j] += w;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows.len(), self.n_cols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                m[(i, j)] = w;
            }
        }
        m
    }
}

/// `K_drop K_keepᵀ / √d_head`
pub fn similarity(k_drop: &Matrix, k_keep: &Matrix, d_head: usize) -> Result<Matrix> {
    if k_keep.rows() == 0 && k_drop.rows() > 0 {
        return Err(Error::Contract("dropped rows but nothing kept to absorb them".into()));
    }
    if k_drop.cols() != d_head || k_keep.cols() != d_head {
        return Err(Error::Shape(format!("key widths {} / {} for d_head {d_head}", k_drop.cols(), k_keep.cols())));
    }
    let mut s = matmul_nt(k_drop, k_keep)?;
    s.scale(1.0 / (d_head as f64).sqrt());
    Ok(s)
}

/// Top-`m` neighbours of every row (ties to the smaller column), softmaxed
/// at `tau_r` over the neighbourhood.
pub fn sparse_assign(sim: &Matrix, m: usize, tau_r: f64) -> Result<SparseRows> {
    if m < 1 {
        return Err(Error::Parameter("sparse_assign needs m >= 1".into()));
    }
    let m = m.min(sim.cols());
    let rows = sim
        .iter_rows()
        .map(|r| {
            let mut nb = top_k_indices(r, m);
            nb.sort_unstable();
            let mut w: Vec<f64> = nb.iter().map(|&j| r[j]).collect();
            softmax_in_place(&mut w, tau_r);
            nb.into_iter().zip(w).collect()
        })
        .collect();
    Ok(SparseRows { rows, n_cols: sim.cols() })
}

/// Column loads of `a` and the column-reweighted, row-renormalized flow.
pub fn balance(a: &SparseRows, eps: f64) -> (Vec<f64>, SparseRows) {
    let loads = a.column_sums();
    let rows = a
        .rows
        .iter()
        .map(|r| {
            let mut w: Vec<(usize, f64)> = r.iter().map(|&(j, v)| (j, v / (loads[j] + eps))).collect();
            let z: f64 = w.iter().map(|p| p.1).sum();
            w.iter_mut().for_each(|p| p.1 /= z);
            w
        })
        .collect();
    (loads, SparseRows { rows, n_cols: a.n_cols })
}

/// `W_flowᵀ V_drop`
pub fn aggregate(w_flow: &SparseRows, v_drop: &Matrix) -> Result<Matrix> {
    if w_flow.rows.len() != v_drop.rows() {
        return Err(Error::Shape(format!("{} flow rows for {} dropped values", w_flow.rows.len(), v_drop.rows())));
    }
    let mut out = Matrix::zeros(w_flow.n_cols, v_drop.cols());
    for (i, r) in w_flow.rows.iter().enumerate() {
        let v = v_drop.row(i);
        for &(j, w) in r {
            out.row_mut(j).iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
        }
    }
    Ok(out)
}

/// `clip(α / (ℓ_j + ε), 0, 1)`
pub fn gates(loads: &[f64], alpha: f64, eps: f64) -> Vec<f64> {
    loads.iter().map(|&l| (alpha / (l + eps)).clamp(0.0, 1.0)).collect()
}

/// `V_keep + γ (g ⊙ ΔV)`
pub fn gated_update(v_keep: &Matrix, delta: &Matrix, loads: &[f64], alpha: f64, gamma: f64, eps: f64) -> Result<Matrix> {
    if v_keep.shape() != delta.shape() || loads.len() != v_keep.rows() {
        return Err(Error::Shape("gated_update operands disagree".into()));
    }
    let g = gates(loads, alpha, eps);
    let mut out = v_keep.clone();
    for (j, gj) in g.iter().enumerate() {
        let s = gamma * gj;
        out.row_mut(j).iter_mut().zip(delta.row(j)).for_each(|(o, d)| *o += s * d);
    }
    Ok(out)
}

/// Flow of one (layer, head).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadFlow {
    pub assignment: SparseRows,
    pub loads: Vec<f64>,
    pub w_flow: SparseRows,
    pub gates: Vec<f64>,
    pub alpha: f64,
}

pub fn plan_head(k_keep: &Matrix, k_drop: &Matrix, cfg: &FlowConfig) -> Result<HeadFlow> {
    let sim = similarity(k_drop, k_keep, k_keep.cols())?;
    let assignment = sparse_assign(&sim, cfg.m, cfg.tau_r)?;
    let (loads, w_flow) = balance(&assignment, cfg.eps);
    let alpha = if k_keep.rows() == 0 { 0.0 } else { k_drop.rows() as f64 / k_keep.rows() as f64 };
    let gates = gates(&loads, alpha, cfg.eps);
    Ok(HeadFlow { assignment, loads, w_flow, gates, alpha })
}

/// `plans[layer][head]` together with the kept/dropped positions they refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPlan {
    pub plans: Vec<Vec<HeadFlow>>,
    pub keep_positions: Vec<Vec<usize>>,
    pub drop_positions: Vec<Vec<usize>>,
}

impl FlowPlan {
    /// Text dump. Per head a header line, then one `w i j value` line per
    /// nonzero (dropped index, kept index), then `load` and `gate` lines.
    pub fn dump(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "flowplan 1")?;
        for (l, heads) in self.plans.iter().enumerate() {
            writeln!(out, "keep_positions {l} {}", join(&self.keep_positions[l]))?;
            writeln!(out, "drop_positions {l} {}", join(&self.drop_positions[l]))?;
            for (h, f) in heads.iter().enumerate() {
                writeln!(
                    out,
                    "head {l} {h} keep {} drop {} alpha {:e}",
                    f.loads.len(),
                    f.w_flow.rows.len(),
                    f.alpha
                )?;
                for (i, r) in f.w_flow.rows.iter().enumerate() {
                    for &(j, w) in r {
                        writeln!(out, "w {i} {j} {w:e}")?;
                    }
                }
                writeln!(out, "load {}", f.loads.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" "))?;
                writeln!(out, "gate {}", f.gates.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" "))?;
            }
        }
        Ok(())
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Consolidate every (layer, head) of a partition into a cache holding only
/// the kept rows.
pub fn consolidate(partition: &PartitionResult, cfg: &FlowConfig) -> Result<(KvCache, FlowPlan)> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(partition.layers.len());
    let mut plans = Vec::with_capacity(partition.layers.len());
    for lp in &partition.layers {
        if lp.dropped.is_empty() {
            layers.push(lp.kept.clone());
            plans.push(Vec::new());
            continue;
        }
        let mut heads = Vec::with_capacity(lp.kept.heads.len());
        let mut head_plans = Vec::with_capacity(lp.kept.heads.len());
        for (kh, dh) in lp.kept.heads.iter().zip(&lp.dropped.heads) {
            let f = plan_head(&kh.keys, &dh.keys, cfg)?;
            let values = if cfg.gamma == 0.0 {
                kh.values.clone()
            } else {
                let delta = aggregate(&f.w_flow, &dh.values)?;
                gated_update(&kh.values, &delta, &f.loads, f.alpha, cfg.gamma, cfg.eps)?
            };
            heads.push(HeadCache { keys: kh.keys.clone(), values });
            head_plans.push(f);
        }
        layers.push(LayerCache { heads, positions: lp.kept.positions.clone() });
        plans.push(head_plans);
    }
    let plan = FlowPlan {
        plans,
        keep_positions: partition.layers.iter().map(|p| p.kept.positions.clone()).collect(),
        drop_positions: partition.layers.iter().map(|p| p.dropped.positions.clone()).collect(),
    };
    Ok((KvCache { layers, next_position: partition.next_position }, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::gaussian(rows, cols, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn similarity_examples() {
        let k = Matrix::from_rows(&[vec![1.0, 1.0, 1.0, 1.0]]).unwrap();
        assert!((similarity(&k, &k, 4).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);
        let unit = Matrix::from_rows(&[vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!((similarity(&unit, &unit, 4).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
        assert_eq!(similarity(&a, &b, 2).unwrap()[(0, 0)], 0.0);
        assert!(matches!(similarity(&a, &Matrix::zeros(0, 2), 2), Err(Error::Contract(_))));
        let (kd, kk) = (rand(5, 4, 1), rand(3, 4, 2));
        let s = similarity(&kd, &kk, 4).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let dot: f64 = (0..4).map(|c| kd[(i, c)] * kk[(j, c)]).sum();
                assert!((s[(i, j)] - dot / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_assign_examples() {
        let s = rand(4, 5, 3);
        let full = sparse_assign(&s, 5, 0.7).unwrap().to_dense();
        let want = crate::numerics::softmax_rows(&s, 0.7).unwrap();
        assert!(full.max_abs_diff(&want) < 1e-15);
        let one = sparse_assign(&s, 1, 1.0).unwrap();
        assert!(one.rows.iter().all(|r| r.len() == 1 && r[0].1 == 1.0));
        let tied = Matrix::from_rows(&[vec![0.5, 2.0, 2.0, 2.0, -1.0]]).unwrap();
        let t = sparse_assign(&tied, 2, 1.0).unwrap();
        assert_eq!(t.rows[0], vec![(1, 0.5), (2, 0.5)]);
        assert_eq!(sparse_assign(&s, 9, 1.0).unwrap().rows[0].len(), 5);
    }

    #[test]
    fn balance_examples() {
        let a = SparseRows { rows: vec![vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)]], n_cols: 2 };
        let (loads, w) = balance(&a, 1e-12);
        assert_eq!(loads, vec![1.5, 0.5]);
        assert_eq!(w.rows[0], vec![(0, 1.0)]);
        assert!((w.rows[1][0].1 - 0.25).abs() < 1e-9 && (w.rows[1][1].1 - 0.75).abs() < 1e-9);
        let even = SparseRows { rows: vec![vec![(0, 0.3), (1, 0.7)], vec![(0, 0.7), (1, 0.3)]], n_cols: 2 };
        let (_, w) = balance(&even, 1e-6);
        assert!(w.to_dense().max_abs_diff(&even.to_dense()) < 1e-9);
    }

    #[test]
    fn aggregate_examples() {
        let v = rand(3, 4, 5);
        let single = SparseRows { rows: vec![vec![(0, 1.0)]; 3], n_cols: 1 };
        let d = aggregate(&single, &v).unwrap();
        for c in 0..4 {
            assert!((d[(0, c)] - (0..3).map(|i| v[(i, c)]).sum::<f64>()).abs() < 1e-15);
        }
        let empty = SparseRows { rows: vec![], n_cols: 3 };
        assert_eq!(aggregate(&empty, &Matrix::zeros(0, 4)).unwrap(), Matrix::zeros(3, 4));
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gates(&[2.0], 2.0, 0.0), vec![1.0]);
        assert!((gates(&[4.0], 2.0, 1e-9)[0] - 0.5).abs() < 1e-9);
        assert_eq!(gates(&[0.0], 2.0, 1e-6), vec![1.0]);
        let vk = rand(2, 3, 6);
        let dv = rand(2, 3, 7);
        assert_eq!(gated_update(&vk, &dv, &[1.0, 3.0], 1.5, 0.0, 1e-6).unwrap(), vk);
        let half = gated_update(&vk, &dv, &[3.0, 3.0], 1.5, 1.0, 0.0).unwrap();
        assert!((half[(1, 2)] - (vk[(1, 2)] + 0.5 * dv[(1, 2)])).abs() < 1e-15);
    }

    /// Materializes every intermediate as a full matrix.
    fn dense_oracle(kk: &Matrix, kd: &Matrix, vk: &Matrix, vd: &Matrix, cfg: &FlowConfig) -> Matrix {
        let (nd, nk, dh) = (kd.rows(), kk.rows(), kk.cols());
        let m = cfg.m.min(nk);
        let mut a = Matrix::zeros(nd, nk);
        for i in 0..nd {
            let s: Vec<f64> = (0..nk).map(|j| (0..dh).map(|c| kd[(i, c)] * kk[(j, c)]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let mut order: Vec<usize> = (0..nk).collect();
            order.sort_by(|&x, &y| s[y].partial_cmp(&s[x]).unwrap().then(x.cmp(&y)));
            let nb = &order[..m];
            let mx = nb.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = nb.iter().map(|&j| ((s[j] - mx) / cfg.tau_r).exp()).sum();
            for &j in nb {
                a[(i, j)] = ((s[j] - mx) / cfg.tau_r).exp() / z;
            }
        }
        let load: Vec<f64> = (0..nk).map(|j| (0..nd).map(|i| a[(i, j)]).sum()).collect();
        let mut w = Matrix::zeros(nd, nk);
        for i in 0..nd {
            let z: f64 = (0..nk).map(|j| a[(i, j)] / (load[j] + cfg.eps)).sum();
            for j in 0..nk {
                w[(i, j)] = a[(i, j)] / (load[j] + cfg.eps) / z;
            }
        }
        let alpha = nd as f64 / nk as f64;
        let mut out = vk.clone();
        for j in 0..nk {
            let g = (alpha / (load[j] + cfg.eps)).clamp(0.0, 1.0);
            for c in 0..dh {
                let dv: f64 = (0..nd).map(|i| w[(i, j)] * vd[(i, c)]).sum();
                out[(j, c)] += cfg.gamma * g * dv;
            }
        }
        out
    }

    #[test]
    fn head_update_matches_dense_oracle() {
        let cfg = FlowConfig { m: 2, ..Default::default() };
        let (kk, kd, vk, vd) = (rand(3, 4, 10), rand(3, 4, 11), rand(3, 4, 12), rand(3, 4, 13));
        let f = plan_head(&kk, &kd, &cfg).unwrap();
        let delta = aggregate(&f.w_flow, &vd).unwrap();
        let got = gated_update(&vk, &delta, &f.loads, f.alpha, cfg.gamma, cfg.eps).unwrap();
        assert!(got.max_abs_diff(&dense_oracle(&kk, &kd, &vk, &vd, &cfg)) < 1e-12);
    }

    #[test]
    fn dump_lists_every_flow_entry() {
        let cfg = FlowConfig { m: 2, ..Default::default() };
        let f = plan_head(&rand(3, 4, 1), &rand(4, 4, 2), &cfg).unwrap();
        let plan = FlowPlan { plans: vec![vec![f]], keep_positions: vec![vec![0, 2, 5]], drop_positions: vec![vec![1, 3, 4, 6]] };
        let mut buf = Vec::new();
        plan.dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("w ")).count(), 8);
        assert!(text.starts_with("flowplan 1\nkeep_positions 0 0 2 5\n"));
    }

    fn instance(seed: u64, nk: usize, nd: usize, dh: usize) -> (Matrix, Matrix, Matrix, Matrix) {
        let mut r = Rng::new(seed);
        (
            Matrix::gaussian(nk, dh, 1.0, &mut r),
            Matrix::gaussian(nd, dh, 1.0, &mut r),
            Matrix::gaussian(nk, dh, 1.0, &mut r),
            Matrix::gaussian(nd, dh, 1.0, &mut r),
        )
    }

    proptest! {
        #[test]
        fn flow_rows_are_stochastic_and_mass_is_conserved(seed in 0u64..10_000, nk in 1usize..10, nd in 0usize..20, m in 1usize..6) {
            let (kk, kd, _, vd) = instance(seed, nk, nd, 4);
            let f = plan_head(&kk, &kd, &FlowConfig { m, ..Default::default() }).unwrap();
            for r in f.assignment.rows.iter().chain(&f.w_flow.rows) {
                prop_assert!((r.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(r.len() <= m);
            }
            let delta = aggregate(&f.w_flow, &vd).unwrap();
            for c in 0..4 {
                let a: f64 = (0..nk).map(|j| delta[(j, c)]).sum();
                let b: f64 = (0..nd).map(|i| vd[(i, c)]).sum();
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!(f.gates.iter().all(|g| (0.0..=1.0).contains(g)));
        }

        #[test]
        fn reweighting_never_raises_the_peak_load(seed in 0u64..10_000, nk in 1usize..10, nd in 1usize..20, m in 1usize..6) {
            let (kk, kd, _, _) = instance(seed, nk, nd, 4);
            let f = plan_head(&kk, &kd, &FlowConfig { m, ..Default::default() }).unwrap();
            let peak_a = f.loads.iter().copied().fold(0.0, f64::max);
            let peak_w = f.w_flow.column_sums().into_iter().fold(0.0, f64::max);
            prop_assert!(peak_w <= peak_a + 1e-12);
        }

        #[test]
        fn update_is_scale_equivariant(seed in 0u64..10_000, nk in 1usize..8, nd in 0usize..12) {
            let (kk, kd, vk, vd) = instance(seed, nk, nd, 4);
            let cfg = FlowConfig::default();
            let f = plan_head(&kk, &kd, &cfg).unwrap();
            let one = gated_update(&vk, &aggregate(&f.w_flow, &vd).unwrap(), &f.loads, f.alpha, 1.0, cfg.eps).unwrap();
            let two = gated_update(&vk.scaled(2.0), &aggregate(&f.w_flow, &vd.scaled(2.0)).unwrap(), &f.loads, f.alpha, 1.0, cfg.eps).unwrap();
            prop_assert_eq!(two, one.scaled(2.0));
        }
    }
}
