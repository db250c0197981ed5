//! Reverse pass through [`Forward`] tapes.
//!
//! Prefix cache rows are constants: gradients flow only into the new rows'
//! inputs and, when requested, into the weights. Besides an upstream gradient
//! on the output hidden states, callers may inject `dL/dP` directly on any
//! layer's attention probabilities, which is how the probe loss enters.

use crate::error::{Error, Result};
use crate::numerics::{gelu_grad, gemm, gemm_into, softmax_backward, Matrix, View};

use super::{BackboneWeights, Forward};

pub struct Gradients {
    /// `dL/d input` for the rows fed to [`BackboneWeights::forward_rows`].
    pub d_input: Matrix,
    /// Weight gradients (embedding tables left at zero; callers scatter
    /// `d_input` themselves). `None` unless requested.
    pub weights: Option<BackboneWeights>,
}

fn rms_norm_backward(x: &Matrix, inv: &[f64], gain: &Matrix, dy: &Matrix, dgain: Option<&mut Matrix>) -> Matrix {
    let d = x.cols();
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let (xr, dyr, s) = (x.row(i), dy.row(i), inv[i]);
        let dot: f64 = (0..d).map(|k| g[k] * dyr[k] * xr[k]).sum();
        let c = s * s * s * dot / d as f64;
        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = s * g[k] * dyr[k] - xr[k] * c;
        }
    }
    if let Some(dg) = dgain {
        let dgs = dg.as_mut_slice();
        for i in 0..x.rows() {
            for k in 0..d {
                dgs[k] += dy.row(i)[k] * x.row(i)[k] * inv[i];
            }
        }
    }
    dx
}

fn add_column_sums(acc: &mut Matrix, m: &Matrix) {
    for r in m.iter_rows() {
        acc.as_mut_slice().iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
}

impl BackboneWeights {
    /// Backpropagate through a taped forward pass.
    ///
    /// `d_hidden` is the gradient on `fwd.hidden`; `d_probs[layer][head]`, if
    /// given, is added to the gradient on that head's attention probabilities
    /// (same shape as `fwd.record.probs[layer][head]`).
    pub fn backward(
        &self,
        fwd: &Forward,
        d_hidden: Option<&Matrix>,
        d_probs: Option<&[Vec<Matrix>]>,
        want_weights: bool,
    ) -> Result<Gradients> {
        let tape = fwd.tape.as_ref().ok_or_else(|| Error::Contract("backward needs a taped forward pass".into()))?;
        let cfg = &self.config;
        let (n, d, dh) = (fwd.hidden.rows(), cfg.d_model, cfg.d_head);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = want_weights.then(|| self.zeros_like());

        let mut dx = match d_hidden {
            Some(dh_) => rms_norm_backward(
                &tape.x_final,
                &tape.inv_rms_f,
                &self.final_norm,
                dh_,
                grads.as_mut().map(|g| &mut g.final_norm),
            ),
            None => Matrix::zeros(n, d),
        };

        for (l, (lw, lt)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            let mut gl = grads.as_mut().map(|g| &mut g.layers[l]);
            let t = lt.prefix_len;

            // feed-forward
            if let Some(g) = gl.as_deref_mut() {
                gemm_into(1.0, View::of(&lt.act).t(), View::of(&dx), 1.0, &mut g.w2, 0)?;
                add_column_sums(&mut g.b2, &dx);
            }
            let mut df1 = gemm(View::of(&dx), View::of(&lw.w2).t())?;
            df1.as_mut_slice().iter_mut().zip(lt.f1.as_slice()).for_each(|(g, &f)| *g *= gelu_grad(f));
            if let Some(g) = gl.as_deref_mut() {
                gemm_into(1.0, View::of(&lt.u).t(), View::of(&df1), 1.0, &mut g.w1, 0)?;
                add_column_sums(&mut g.b1, &df1);
            }
            let du = gemm(View::of(&df1), View::of(&lw.w1).t())?;
            let dx_ffn = rms_norm_backward(
                &lt.x_mid,
                &lt.inv_rms2,
                &lw.ffn_norm,
                &du,
                gl.as_deref_mut().map(|g| &mut g.ffn_norm),
            );
            dx.add_scaled(&dx_ffn, 1.0)?;

            // attention
            if let Some(g) = gl.as_deref_mut() {
                gemm_into(1.0, View::of(&lt.o).t(), View::of(&dx), 1.0, &mut g.wo, 0)?;
            }
            let d_o = gemm(View::of(&dx), View::of(&lw.wo).t())?;
            let mut dq = Matrix::zeros(n, d);
            let mut dk = Matrix::zeros(n, d);
            let mut dv = Matrix::zeros(n, d);
            for h in 0..cfg.n_heads {
                let p = &fwd.record.probs[l][h];
                let doh = View::columns(&d_o, h * dh, dh);
                let mut dp = gemm(doh, View::of(&lt.vfull[h]).t())?;
                if let Some(inj) = d_probs.and_then(|dp_all| dp_all.get(l)).and_then(|row| row.get(h)) {
                    dp.add_scaled(inj, 1.0)?;
                }
                gemm_into(1.0, View::columns(p, t, n).t(), doh, 0.0, &mut dv, h * dh)?;
                let mut ds = Matrix::zeros(n, t + n);
                for i in 0..n {
                    softmax_backward(p.row(i), dp.row(i), 1.0, ds.row_mut(i));
                }
                gemm_into(scale, View::of(&ds), View::of(&lt.kfull[h]), 0.0, &mut dq, h * dh)?;
                gemm_into(scale, View::columns(&ds, t, n).t(), View::columns(&lt.q, h * dh, dh), 0.0, &mut dk, h * dh)?;
            }
            let mut dz = gemm(View::of(&dq), View::of(&lw.wq).t())?;
            gemm_into(1.0, View::of(&dk), View::of(&lw.wk).t(), 1.0, &mut dz, 0)?;
            gemm_into(1.0, View::of(&dv), View::of(&lw.wv).t(), 1.0, &mut dz, 0)?;
            if let Some(g) = gl.as_deref_mut() {
                gemm_into(1.0, View::of(&lt.z).t(), View::of(&dq), 1.0, &mut g.wq, 0)?;
                gemm_into(1.0, View::of(&lt.z).t(), View::of(&dk), 1.0, &mut g.wk, 0)?;
                gemm_into(1.0, View::of(&lt.z).t(), View::of(&dv), 1.0, &mut g.wv, 0)?;
            }
            let dx_attn =
                rms_norm_backward(&lt.x_in, &lt.inv_rms1, &lw.attn_norm, &dz, gl.map(|g| &mut g.attn_norm));
            dx.add_scaled(&dx_attn, 1.0)?;
        }
        Ok(Gradients { d_input: dx, weights: grads })
    }
}
