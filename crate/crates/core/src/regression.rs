//! Exact risk calculus for the sketched linear model.
//!
//! With `B = R U Λ^{1/2}` and `C = Λ^{1/2} U^T W*`:
//!
//! * `L(W)   = ‖Λ^{1/2} U^T (W − W*)‖_F² + σ²`
//! * `L_R(V) = ‖B^T V − C‖_F² + σ²`
//! * `V*     = (B B^T)^{-1} B C`
//! * `Approx = ‖C‖_F² − ‖L^{-1} B C‖_F²` where `L L^T = B B^T`
//! * `Excess = ‖V − V*‖²_{B B^T}`
//!
//! When `m > d` the Gram matrix is singular by construction; `V*` is then the
//! minimum-norm least-squares solution and `Approx` the residual form.
//!
//! None of these sample anything.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frob2, SpdFactor, CONDITION_GUARD};
use crate::oracle;
use crate::sampling::{ParameterMatrix, SketchMatrix};
use crate::spectrum::Covariance;

/// Parameter `V` of the sketched predictor `x ↦ V^T R x`, shape `m × p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchedModel(DMatrix<f64>);

impl SketchedModel {
    pub fn zeros(m: usize, p: usize) -> Self {
        SketchedModel(DMatrix::zeros(m, p))
    }

    pub fn from_matrix(entries: DMatrix<f64>) -> Self {
        SketchedModel(entries)
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn p(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Irreducible + approximation + excess error of one sketched model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub irreducible: f64,
    pub approx: f64,
    pub excess: f64,
    pub total: f64,
}

impl DecompositionReport {
    pub fn component_sum(&self) -> f64 {
        self.irreducible + self.approx + self.excess
    }
}

/// Precomputed sketch-dependent blocks for one `(R, G, W*)` triple.
///
/// Building it costs `O(m²d)`; afterwards every closed form is `O(m²p)` or
/// cheaper.
#[derive(Clone, Debug)]
pub struct SketchSystem {
    root: DMatrix<f64>,
    coords: DMatrix<f64>,
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    signal: f64,
    solver: GramSolver,
}

#[derive(Clone, Debug)]
enum GramSolver {
    Spd(SpdFactor),
    /// `(B^T)^+` for oversized sketches.
    Pseudo { pinv: DMatrix<f64>, condition: f64 },
}

impl GramSolver {
    fn pseudo(root: &DMatrix<f64>) -> Result<Self> {
        let svd = root.transpose().svd(true, true);
        let sv = &svd.singular_values;
        let hi = sv.max();
        let lo = sv.min();
        let condition = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
        if !(condition <= CONDITION_GUARD) {
            return Err(Error::IllConditioned { condition });
        }
        let pinv = svd.pseudo_inverse(0.0).map_err(|_| Error::EigenFailure)?;
        Ok(GramSolver::Pseudo { pinv, condition })
    }
}

impl SketchSystem {
    pub fn new(r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix) -> Result<Self> {
        if r.d() != g.dim() || w_star.d() != g.dim() {
            return Err(Error::dims(
                "SketchSystem::new",
                format!("d = {}", g.dim()),
                format!("R {}x{}, W* {}x{}", r.m(), r.d(), w_star.d(), w_star.p()),
            ));
        }
        let root = g.sketch_root(r.matrix())?;
        let coords = g.root_coords(w_star.matrix())?;
        let gram = &root * root.transpose();
        let cross = &root * &coords;
        let signal = frob2(&coords);
        let solver = if r.m() > r.d() {
            GramSolver::pseudo(&root)?
        } else {
            GramSolver::Spd(SpdFactor::new(&gram)?)
        };
        Ok(SketchSystem {
            root,
            coords,
            gram,
            cross,
            signal,
            solver,
        })
    }

    pub fn m(&self) -> usize {
        self.gram.nrows()
    }

    pub fn p(&self) -> usize {
        self.coords.ncols()
    }

    /// `R G R^T`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `R G W*`.
    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }

    /// `Λ^{1/2} U^T W*`.
    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    /// `‖W*‖_G²`.
    pub fn signal(&self) -> f64 {
        self.signal
    }

    pub fn condition(&self) -> f64 {
        match &self.solver {
            GramSolver::Spd(f) => f.condition(),
            GramSolver::Pseudo { condition, .. } => *condition,
        }
    }

    pub fn gram_trace(&self) -> f64 {
        self.gram.trace()
    }

    pub fn optimal(&self) -> SketchedModel {
        match &self.solver {
            GramSolver::Spd(f) => SketchedModel(f.solve(&self.cross)),
            GramSolver::Pseudo { pinv, .. } => SketchedModel(pinv * &self.coords),
        }
    }

    /// Trace-difference form, clamped to `[0, ‖W*‖_G²]`.
    pub fn approx(&self) -> f64 {
        let explained = match &self.solver {
            GramSolver::Spd(f) => frob2(&f.whiten(&self.cross)),
            GramSolver::Pseudo { .. } => self.signal - self.approx_residual(),
        };
        (self.signal - explained).clamp(0.0, self.signal)
    }

    /// Residual form `‖B^T V* − C‖_F²`; `O(dmp)` once `V*` is known.
    pub fn approx_residual(&self) -> f64 {
        self.fit_residual(self.optimal().matrix())
    }

    fn fit_residual(&self, v: &DMatrix<f64>) -> f64 {
        frob2(&(self.root.tr_mul(v) - &self.coords))
    }

    /// `‖V − V*‖²_{RGR^T}`.
    pub fn excess(&self, v: &SketchedModel) -> Result<f64> {
        self.check_model(v)?;
        let delta = v.matrix() - self.optimal().into_matrix();
        Ok(quad_form(&self.gram, &delta))
    }

    pub fn sketched_risk(&self, v: &SketchedModel, sigma2: f64) -> Result<f64> {
        self.check_model(v)?;
        Ok(self.fit_residual(v.matrix()) + sigma2)
    }

    pub fn decompose(&self, v: &SketchedModel, sigma2: f64) -> Result<DecompositionReport> {
        Ok(DecompositionReport {
            irreducible: sigma2,
            approx: self.approx(),
            excess: self.excess(v)?,
            total: self.sketched_risk(v, sigma2)?,
        })
    }

    fn check_model(&self, v: &SketchedModel) -> Result<()> {
        if v.m() != self.m() || v.p() != self.p() {
            return Err(Error::dims("SketchSystem", format!("{}x{}", self.m(), self.p()), format!("{}x{}", v.m(), v.p())));
        }
        Ok(())
    }
}

/// `tr(Δ^T A Δ)`.
pub fn quad_form(a: &DMatrix<f64>, delta: &DMatrix<f64>) -> f64 {
    (delta.transpose() * a * delta).trace()
}

/// `L(W) = tr((W − W*)^T G (W − W*)) + σ²`.
pub fn full_risk(w: &DMatrix<f64>, g: &Covariance, w_star: &ParameterMatrix, sigma2: f64) -> Result<f64> {
    if w.shape() != w_star.matrix().shape() {
        return Err(Error::dims("full_risk", format!("{:?}", w_star.matrix().shape()), format!("{:?}", w.shape())));
    }
    Ok(g.norm2(&(w - w_star.matrix()))? + sigma2)
}

pub fn optimal_sketched(r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix) -> Result<SketchedModel> {
    Ok(SketchSystem::new(r, g, w_star)?.optimal())
}

/// `L_R(V) = L(R^T V)`.
pub fn sketched_risk(v: &SketchedModel, r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix, sigma2: f64) -> Result<f64> {
    if v.m() != r.m() {
        return Err(Error::dims("sketched_risk", r.m(), v.m()));
    }
    full_risk(&r.matrix().tr_mul(v.matrix()), g, w_star, sigma2)
}

pub fn approx_error(r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix) -> Result<f64> {
    Ok(SketchSystem::new(r, g, w_star)?.approx())
}

pub fn decompose(v_n: &SketchedModel, r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix, sigma2: f64) -> Result<DecompositionReport> {
    SketchSystem::new(r, g, w_star)?.decompose(v_n, sigma2)
}

/// Oracle-scale minimizer of `L_R`: assembles the normal equations
/// `(R G R^T) V = R G W*` from a dense `G` and solves them with
/// [`oracle::gauss_solve`], which shares nothing with [`SketchSystem`].
pub fn brute_force_optimal(r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix) -> Result<SketchedModel> {
    if r.m() > 16 || g.dim() > 32 {
        return Err(Error::invalid(format!("brute force limited to m <= 16, d <= 32 (got m = {}, d = {})", r.m(), g.dim())));
    }
    let dense = g.dense();
    let rg = oracle::naive_mul(r.matrix(), &dense);
    let lhs = oracle::naive_mul(&rg, &r.matrix().transpose());
    let rhs = oracle::naive_mul(&rg, w_star.matrix());
    oracle::gauss_solve(&lhs, &rhs).map(SketchedModel)
}
