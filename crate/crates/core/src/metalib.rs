//! Meta-library of basis embeddings and the selector that composes
//! prompt-conditioned soft tokens from it.
//!
//! The selector is a two-layer GELU perceptron on the mean prompt embedding.
//! Its `k x M` logits become composition weights through a Gumbel-Softmax
//! (noise only while training), and the soft tokens are those weights times
//! the basis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_grad, gumbel_noise, matmul, matmul_nt, matmul_tn, random_orthonormal_rows, softmax_in_place, Matrix, Rng,
};

/// Library and selector sizes plus the temperature schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Library size `M` (at most `d_model`).
    pub size: usize,
    /// Soft tokens per prompt.
    pub k: usize,
    pub hidden: usize,
    pub anneal: Anneal,
    pub init: LibraryInit,
}

/// Starting point of the library basis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LibraryInit {
    /// Independent `N(0, 1/d)` entries, so rows start near unit norm but
    /// not orthogonal.
    #[default]
    Gaussian,
    /// Rows of a random orthonormal frame (zero penalty at the start).
    Orthonormal,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self { size: 64, k: 8, hidden: 128, anneal: Anneal::default(), init: LibraryInit::default() }
    }
}

/// Learnable `M x d` basis.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLibrary {
    pub basis: Matrix,
}

impl MetaLibrary {
    /// Rows of a random orthonormal frame. Needs `m <= d`.
    pub fn orthonormal(m: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self { basis: random_orthonormal_rows(m, d, rng)? })
    }

    pub fn gaussian(m: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 || m > d {
            return Err(Error::Parameter(format!("library size {m} must lie in 1..={d}")));
        }
        Ok(Self { basis: Matrix::gaussian(m, d, 1.0 / (d as f64).sqrt(), rng) })
    }

    pub fn init(kind: LibraryInit, m: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        match kind {
            LibraryInit::Gaussian => Self::gaussian(m, d, rng),
            LibraryInit::Orthonormal => Self::orthonormal(m, d, rng),
        }
    }

    pub fn size(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }
}

/// `||L Lᵀ - I||_F²`
pub fn orthogonality_penalty(library: &MetaLibrary) -> f64 {
    let mut g = matmul_nt(&library.basis, &library.basis).expect("square gram");
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    g.frobenius_sq()
}

/// Gradient of [`orthogonality_penalty`]: `4 (L Lᵀ - I) L`.
pub fn orthogonality_penalty_grad(library: &MetaLibrary) -> Matrix {
    let mut g = matmul_nt(&library.basis, &library.basis).expect("square gram");
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    let mut out = matmul(&g, &library.basis).expect("conforming");
    out.scale(4.0);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Soft tokens produced per prompt.
    pub k: usize,
    /// Library size the logits index into.
    pub m: usize,
}

impl SelectorParams {
    pub fn init(d_model: usize, hidden: usize, k: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 || m < k || hidden == 0 {
            return Err(Error::Parameter(format!("selector needs 1 <= k <= M and hidden > 0 (k={k}, M={m}, hidden={hidden})")));
        }
        Ok(Self {
            w1: Matrix::gaussian(d_model, hidden, 1.0 / (d_model as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::gaussian(hidden, k * m, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, k * m),
            k,
            m,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
            k: self.k,
            m: self.m,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [("selector.w1", &self.w1), ("selector.b1", &self.b1), ("selector.w2", &self.w2), ("selector.b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward(&self, features: &[f64], noise: Option<&Matrix>, temperature: f64) -> Result<SelectorTrace> {
        if features.len() != self.w1.rows() {
            return Err(Error::Shape(format!("features of length {} for selector input {}", features.len(), self.w1.rows())));
        }
        validate_temperature(temperature)?;
        let f = Matrix::from_vec(1, features.len(), features.to_vec())?;
        let mut pre = matmul(&f, &self.w1)?;
        pre.add_scaled(&self.b1, 1.0)?;
        let mut hidden = pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|x| *x = gelu(*x));
        let mut out = matmul(&hidden, &self.w2)?;
        out.add_scaled(&self.b2, 1.0)?;
        let logits = Matrix::from_vec(self.k, self.m, out.into_vec())?;
        let mut weights = logits.clone();
        if let Some(g) = noise {
            weights.add_scaled(g, 1.0)?;
        }
        for i in 0..self.k {
            softmax_in_place(weights.row_mut(i), temperature);
        }
        Ok(SelectorTrace { pre, hidden, logits, weights, temperature })
    }

    /// Parameter gradients given `dL/d weights` for a traced forward pass.
    pub fn backward(&self, features: &[f64], trace: &SelectorTrace, d_weights: &Matrix) -> Result<SelectorParams> {
        let mut d_logits = Matrix::zeros(self.k, self.m);
        for i in 0..self.k {
            crate::numerics::softmax_backward(
                trace.weights.row(i),
                d_weights.row(i),
                trace.temperature,
                d_logits.row_mut(i),
            );
        }
        let d_out = Matrix::from_vec(1, self.k * self.m, d_logits.into_vec())?;
        let mut g = self.zeros_like();
        g.w2 = matmul_tn(&trace.hidden, &d_out)?;
        g.b2 = d_out.clone();
        let mut d_pre = matmul_nt(&d_out, &self.w2)?;
        d_pre.as_mut_slice().iter_mut().zip(trace.pre.as_slice()).for_each(|(d, &p)| *d *= gelu_grad(p));
        let f = Matrix::from_vec(1, features.len(), features.to_vec())?;
        g.w1 = matmul_tn(&f, &d_pre)?;
        g.b1 = d_pre;
        Ok(g)
    }
}

/// Intermediate values of one selector pass.
#[derive(Clone, Debug)]
pub struct SelectorTrace {
    pub pre: Matrix,
    pub hidden: Matrix,
    /// Raw `k x M` logits before noise.
    pub logits: Matrix,
    /// Simplex rows.
    pub weights: Matrix,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GumbelMode {
    Stochastic,
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub mode: GumbelMode,
}

fn validate_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 10.0) {
        return Err(Error::Parameter(format!("Gumbel temperature must lie in (0, 10], got {t}")));
    }
    Ok(())
}

impl GumbelConfig {
    pub fn new(temperature: f64, mode: GumbelMode) -> Result<Self> {
        validate_temperature(temperature)?;
        Ok(Self { temperature, mode })
    }
}

/// Linear temperature schedule over training steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Anneal {
    pub start: f64,
    pub end: f64,
}

impl Default for Anneal {
    fn default() -> Self {
        Self { start: 1.0, end: 0.1 }
    }
}

impl Anneal {
    /// Temperature at `step` of `total` (step 0 gives `start`, the last step
    /// gives `end`).
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.end;
        }
        let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

/// Mean of the prompt embedding rows.
pub fn prompt_features(prompt_embeddings: &Matrix) -> Result<Vec<f64>> {
    if prompt_embeddings.rows() == 0 {
        return Err(Error::Parameter("prompt features of an empty prompt".into()));
    }
    Ok(prompt_embeddings.column_mean())
}

/// Composition weights (`k x M`, simplex rows). Stochastic mode draws fresh
/// Gumbel noise from `rng`; deterministic mode ignores it.
pub fn select_weights(selector: &SelectorParams, features: &[f64], gumbel: &GumbelConfig, rng: &mut Rng) -> Result<Matrix> {
    let noise = match gumbel.mode {
        GumbelMode::Stochastic => Some(sample_noise(selector, rng)),
        GumbelMode::Deterministic => None,
    };
    Ok(selector.forward(features, noise.as_ref(), gumbel.temperature)?.weights)
}

/// One `k x M` draw of Gumbel noise.
pub fn sample_noise(selector: &SelectorParams, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(selector.k, selector.m, gumbel_noise(rng, selector.k * selector.m)).expect("k x M")
}

/// Soft-token embeddings together with the weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTokenSet {
    pub embeddings: Matrix,
    pub composition: Matrix,
}

pub fn synthesize(library: &MetaLibrary, weights: &Matrix) -> Result<SoftTokenSet> {
    if weights.cols() != library.size() {
        return Err(Error::Shape(format!("{} composition columns for a library of {}", weights.cols(), library.size())));
    }
    Ok(SoftTokenSet { embeddings: matmul(weights, &library.basis)?, composition: weights.clone() })
}
