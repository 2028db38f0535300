//! Rotations in SO(3): exponential and logarithm maps, geodesic distance,
//! projection onto the group and the robust geodesic median.
//!
//! All functions are generic over [`Scalar`]; the crate root exposes the
//! `f64` instantiation as [`crate::Rotation`].

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("matrix is singular and cannot be projected onto SO(3)")]
    Singular,
    #[error("geodesic median of an empty sample set")]
    EmptySamples,
}

/// Skew-symmetric matrix `[v]x` such that `[v]x * w = v x w`.
#[inline]
pub fn hat<T: Scalar>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`hat`] on the antisymmetric part of `m`.
#[inline]
pub fn vee<T: Scalar>(m: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// A 3x3 orthonormal matrix with determinant +1.
///
/// Acts on column vectors: `r * v`. World-to-camera convention throughout
/// the crate, i.e. a camera rotation maps world directions into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot3<T: Scalar>(Matrix3<T>);

impl<T: Scalar> Rot3<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix that the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    /// Converts to another scalar precision.
    pub fn cast<U: Scalar>(&self) -> Rot3<U> {
        Rot3(self.0.map(|v| U::lit(v.to_subset().expect("real scalar"))))
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    #[inline]
    pub fn act(&self, v: &Vector3<T>) -> Vector3<T> {
        self.0 * v
    }

    /// Rodrigues' formula.
    pub fn exp(omega: &Vector3<T>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (a, b) = if theta < T::small_angle() {
            (
                T::one() - theta2 / T::lit(6.0),
                T::lit(0.5) - theta2 / T::lit(24.0),
            )
        } else {
            (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
        };
        let k = hat(omega);
        Self(Matrix3::identity() + k * a + k * k * b)
    }

    /// Canonical axis-angle vector with angle in `[0, pi]`.
    pub fn log(&self) -> Vector3<T> {
        let m = &self.0;
        let v = vee(m);
        let s = v.norm();
        let c = (m.trace() - T::one()) * T::lit(0.5);
        let theta = s.atan2(c);

        if c > T::lit(-0.5) {
            if theta < T::small_angle() {
                return v * (T::one() + theta * theta / T::lit(6.0));
            }
            return v * (theta / s);
        }

        // Near pi the antisymmetric part vanishes; recover the axis from the
        // symmetric part (R + R^T)/2 = cos(t) I + (1 - cos(t)) a a^T.
        let one_minus_c = T::one() - c;
        let sym = (m + m.transpose()) * T::lit(0.5);
        let mut k = 0;
        for i in 1..3 {
            if sym[(i, i)] > sym[(k, k)] {
                k = i;
            }
        }
        let akk = ((sym[(k, k)] - c) / one_minus_c).max(T::zero()).sqrt();
        let mut axis = Vector3::zeros();
        for j in 0..3 {
            axis[j] = if j == k {
                akk
            } else {
                sym[(j, k)] / (one_minus_c * akk)
            };
        }
        let axis = axis.normalize();
        let dot = axis.dot(&v);
        let axis = if dot < T::zero() { -axis } else { axis };
        axis * theta
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> T {
        let s = vee(&self.0).norm();
        let c = (self.0.trace() - T::one()) * T::lit(0.5);
        s.atan2(c)
    }

    /// Nearest rotation in Frobenius norm.
    pub fn project(m: &Matrix3<T>) -> Result<Self, So3Error> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(So3Error::Singular);
        }
        let svd = m.svd(true, true);
        let sv = svd.singular_values;
        let max = sv.max();
        let min = sv.min();
        if max <= T::zero() || min <= max * T::default_epsilon() * T::lit(16.0) {
            return Err(So3Error::Singular);
        }
        let u = svd.u.expect("svd computed with u");
        let vt = svd.v_t.expect("svd computed with v_t");
        let d = (u * vt).determinant();
        let mut s = Matrix3::identity();
        if d < T::zero() {
            s[(2, 2)] = -T::one();
        }
        Ok(Self(u * s * vt))
    }

    /// Rotation from a Hamilton quaternion `[w, x, y, z]` (normalized internally).
    pub fn from_quaternion(q: [T; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let two = T::lit(2.0);
        let one = T::one();
        Self(Matrix3::new(
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ))
    }

    /// Unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn to_quaternion(&self) -> [T; 4] {
        let m = &self.0;
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m.trace();
        let mut q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            [
                quarter * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            ]
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (one + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * T::lit(2.0);
            [
                (m[(2, 1)] - m[(1, 2)]) / s,
                quarter * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            ]
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (one + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * T::lit(2.0);
            [
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                quarter * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            ]
        } else {
            let s = (one + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * T::lit(2.0);
            [
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                quarter * s,
            ]
        };
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let sign = if q[0] < T::zero() { -one } else { one };
        for c in q.iter_mut() {
            *c = *c * sign / n;
        }
        q
    }

    /// Max-entry deviation of `R R^T` from identity.
    pub fn orthonormality_error(&self) -> T {
        let e = self.0 * self.0.transpose() - Matrix3::identity();
        e.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
    }

    /// `self * rhs`, re-projected onto SO(3) only when the product has drifted
    /// from orthonormality by more than `1e-12`.
    pub fn compose(&self, rhs: &Self) -> Self {
        let r = Self(self.0 * rhs.0);
        if r.orthonormality_error() > T::lit(1e-12) {
            Self::project(&r.0).unwrap_or(r)
        } else {
            r
        }
    }

    /// Uniformly distributed random rotation.
    pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // Shoemake's subgroup algorithm.
        let u1: f64 = rng.random();
        let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        let q = [b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin()];
        Self::from_quaternion(q.map(T::lit))
    }
}

impl<T: Scalar> Mul for Rot3<T> {
    type Output = Rot3<T>;

    fn mul(self, rhs: Self) -> Self {
        Rot3(self.0 * rhs.0)
    }
}

impl<T: Scalar> Mul<&Rot3<T>> for &Rot3<T> {
    type Output = Rot3<T>;

    fn mul(self, rhs: &Rot3<T>) -> Rot3<T> {
        Rot3(self.0 * rhs.0)
    }
}

impl<T: Scalar> Mul<Vector3<T>> for Rot3<T> {
    type Output = Vector3<T>;

    fn mul(self, rhs: Vector3<T>) -> Vector3<T> {
        self.0 * rhs
    }
}

impl<T: Scalar> Default for Rot3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

/// Angle of `a * b^T`, in `[0, pi]`.
pub fn geodesic_distance<T: Scalar>(a: &Rot3<T>, b: &Rot3<T>) -> T {
    Rot3(a.0 * b.0.transpose()).angle()
}

/// Outcome of [`geodesic_median`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedianEstimate<T: Scalar> {
    pub rotation: Rot3<T>,
    /// Sum of geodesic distances to the samples at `rotation`.
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
}

pub const MEDIAN_DEFAULT_TOL: f64 = 1e-10;
pub const MEDIAN_DEFAULT_MAX_ITER: usize = 100;

fn median_objective<T: Scalar>(r: &Rot3<T>, samples: &[Rot3<T>]) -> T {
    samples
        .iter()
        .fold(T::zero(), |acc, s| acc + geodesic_distance(s, r))
}

/// Weiszfeld iteration for the rotation minimizing the sum of geodesic distances.
///
/// Seeded at the projected chordal mean. Steps are taken in the tangent
/// space at the current estimate, `R <- exp(delta) R`.
pub fn geodesic_median<T: Scalar>(
    samples: &[Rot3<T>],
    tol: T,
    max_iter: usize,
) -> Result<MedianEstimate<T>, So3Error> {
    if samples.is_empty() {
        return Err(So3Error::EmptySamples);
    }
    if samples.len() == 1 {
        return Ok(MedianEstimate {
            rotation: samples[0],
            objective: T::zero(),
            iterations: 0,
            converged: true,
        });
    }

    let sum = samples
        .iter()
        .fold(Matrix3::zeros(), |acc, s| acc + s.matrix());
    let mut current = Rot3::project(&sum).unwrap_or(samples[0]);
    let coincide = T::lit(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    let mut best = current;
    let mut best_obj = median_objective(&current, samples);
    let mut converged = false;
    let mut iterations = 0;

    let mut tangents: Vec<(Vector3<T>, T)> = Vec::with_capacity(samples.len());
    while iterations < max_iter {
        iterations += 1;
        tangents.clear();
        tangents.extend(samples.iter().map(|s| {
            let v = Rot3(s.0 * current.0.transpose()).log();
            let n = v.norm();
            (v, n)
        }));

        let coincident = tangents.iter().filter(|(_, n)| *n < coincide).count();
        if coincident > 0 {
            // Optimality test at a sample point: the pull of the remaining
            // samples must not exceed the multiplicity of the coincident one.
            let pull = tangents
                .iter()
                .filter(|(_, n)| *n >= coincide)
                .fold(Vector3::zeros(), |acc, (v, n)| acc + v / *n);
            if pull.norm() <= T::from_usize(coincident).unwrap() {
                let idx = tangents.iter().position(|(_, n)| *n < coincide).unwrap();
                current = samples[idx];
                converged = true;
                break;
            }
            let dir = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            )
            .normalize()
            .map(T::lit);
            current = Rot3::exp(&(dir * T::lit(1e-9))) * current;
            continue;
        }

        let mut num = Vector3::zeros();
        let mut den = T::zero();
        for (v, n) in &tangents {
            num += v / *n;
            den += T::one() / *n;
        }
        let step = num / den;
        current = Rot3::exp(&step) * current;

        let obj = median_objective(&current, samples);
        if obj < best_obj {
            best_obj = obj;
            best = current;
        }
        if step.norm() < tol {
            converged = true;
            break;
        }
    }

    let obj = median_objective(&current, samples);
    if obj <= best_obj {
        best = current;
        best_obj = obj;
    }
    // Never worse than the best sample.
    for s in samples {
        let o = median_objective(s, samples);
        if o < best_obj {
            best = *s;
            best_obj = o;
        }
    }

    Ok(MedianEstimate {
        rotation: best,
        objective: best_obj,
        iterations,
        converged,
    })
}
