//! Random draws: the Gaussian sketch `R`, the prior draw of `W*`, and the
//! `(Rx, y)` stream.
//!
//! The stream never touches `d`-dimensional samples. `(z, y) = (Rx, W*^T x + ε)`
//! is jointly Gaussian with covariance
//!
//! ```text
//! [ R G R^T      R G W*                 ]
//! [ W*^T G R^T   W*^T G W* + σ²/p · I_p ]
//! ```
//!
//! so it is factored once and each sample costs `O((m + p)^2)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{psd_cholesky, PackedLower};
use crate::regression::SketchSystem;
use crate::rng;
use crate::spectrum::Covariance;

/// `m × d` sketch with i.i.d. `N(0, 1/m)` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchMatrix(DMatrix<f64>);

impl SketchMatrix {
    pub fn draw(m: usize, d: usize, seed: u64) -> Result<Self> {
        Self::draw_with(m, d, &mut rng::seeded(seed))
    }

    pub fn draw_with<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::invalid(format!("sketch dimensions must be positive, got {m}x{d}")));
        }
        let normal = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("positive std");
        Ok(SketchMatrix(DMatrix::from_fn(m, d, |_, _| normal.sample(rng))))
    }

    /// `R = I_d`. Used for the identity-sketch override.
    pub fn identity(d: usize) -> Self {
        SketchMatrix(DMatrix::identity(d, d))
    }

    pub fn from_matrix(entries: DMatrix<f64>) -> Self {
        SketchMatrix(entries)
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `d × p` true parameter with i.i.d. `N(0, 1/p)` entries, so that
/// `E[W* W*^T] = I_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMatrix(DMatrix<f64>);

impl ParameterMatrix {
    pub fn draw(d: usize, p: usize, seed: u64) -> Result<Self> {
        Self::draw_with(d, p, &mut rng::seeded(seed))
    }

    pub fn draw_with<R: Rng + ?Sized>(d: usize, p: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || p == 0 {
            return Err(Error::invalid(format!("parameter dimensions must be positive, got {d}x{p}")));
        }
        let normal = Normal::new(0.0, (1.0 / p as f64).sqrt()).expect("positive std");
        Ok(ParameterMatrix(DMatrix::from_fn(d, p, |_, _| normal.sample(rng))))
    }

    pub fn zeros(d: usize, p: usize) -> Self {
        ParameterMatrix(DMatrix::zeros(d, p))
    }

    pub fn from_matrix(entries: DMatrix<f64>) -> Self {
        ParameterMatrix(entries)
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    pub fn p(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Exact sampler for `(Rx, y)` under `x ~ N(0, G)`, `y = W*^T x + ε`,
/// `ε ~ N(0, σ²/p · I_p)`.
#[derive(Clone, Debug)]
pub struct SketchedDataStream {
    m: usize,
    p: usize,
    sigma2: f64,
    factor: PackedLower,
}

impl SketchedDataStream {
    pub fn build(r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix, sigma2: f64) -> Result<Self> {
        if r.d() != g.dim() || w_star.d() != g.dim() {
            return Err(Error::dims(
                "SketchedDataStream::build",
                format!("R and W* with {} columns/rows", g.dim()),
                format!("R {}x{}, W* {}x{}", r.m(), r.d(), w_star.d(), w_star.p()),
            ));
        }
        let root = g.sketch_root(r.matrix())?;
        let coords = g.root_coords(w_star.matrix())?;
        let gram = &root * root.transpose();
        let cross = &root * &coords;
        let target = coords.transpose() * &coords;
        Self::from_blocks(&gram, &cross, &target, sigma2)
    }

    /// Reuse the Gram blocks already held by a [`SketchSystem`].
    pub fn from_system(sys: &SketchSystem, sigma2: f64) -> Result<Self> {
        let target = sys.coords().transpose() * sys.coords();
        Self::from_blocks(sys.gram(), sys.cross(), &target, sigma2)
    }

    /// Assemble the joint covariance from `RGR^T`, `RGW*` and `W*^T G W*`.
    pub fn from_blocks(gram: &DMatrix<f64>, cross: &DMatrix<f64>, target: &DMatrix<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::invalid(format!("noise level must be non-negative, got {sigma2}")));
        }
        let m = gram.nrows();
        let p = target.nrows();
        if gram.ncols() != m || cross.nrows() != m || cross.ncols() != p || target.ncols() != p {
            return Err(Error::dims("SketchedDataStream::from_blocks", "consistent (m, p) blocks", format!("gram {}x{}, cross {}x{}, target {}x{}", gram.nrows(), gram.ncols(), cross.nrows(), cross.ncols(), target.nrows(), target.ncols())));
        }
        let mut joint = DMatrix::<f64>::zeros(m + p, m + p);
        joint.view_mut((0, 0), (m, m)).copy_from(gram);
        joint.view_mut((0, m), (m, p)).copy_from(cross);
        joint.view_mut((m, 0), (p, m)).copy_from(&cross.transpose());
        joint.view_mut((m, m), (p, p)).copy_from(target);
        for k in 0..p {
            joint[(m + k, m + k)] += sigma2 / p as f64;
        }
        let l = psd_cholesky(&joint)?;
        Ok(SketchedDataStream {
            m,
            p,
            sigma2,
            factor: PackedLower::from_lower(&l),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `L L^T`, the joint covariance this stream samples from.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let l = self.factor.to_dense();
        &l * l.transpose()
    }

    /// Hot-path draw. `noise` is scratch of length `m + p`; on return `out`
    /// holds `[z; y]`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, noise: &mut [f64], out: &mut [f64]) {
        for v in noise.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        self.factor.mul_into(noise, out);
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let n = self.m + self.p;
        let mut noise = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.sample_into(rng, &mut noise, &mut out);
        (
            DVector::from_column_slice(&out[..self.m]),
            DVector::from_column_slice(&out[self.m..]),
        )
    }
}

/// Reference path: draw `x ~ N(0, G)` in full dimension and sketch it.
/// Costs `O(md)` per sample; used to cross-check the joint sampler.
pub fn sample_materialized<R: Rng + ?Sized>(
    r: &SketchMatrix,
    g: &Covariance,
    w_star: &ParameterMatrix,
    sigma2: f64,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>) {
    let x = g.sample(rng);
    let z = r.matrix() * &x;
    let noise_std = (sigma2 / w_star.p() as f64).sqrt();
    let mut y = w_star.matrix().tr_mul(&x);
    for v in y.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += noise_std * e;
    }
    (z, y)
}
