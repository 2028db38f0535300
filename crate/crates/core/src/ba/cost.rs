use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::so3::hat;
use crate::solver::CostFunction;

use super::MIN_DEPTH;

fn v3(s: &[f64]) -> Vector3<f64> {
    Vector3::new(s[0], s[1], s[2])
}

fn projection_jacobian(f: f64, x: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    Matrix2x3::new(f * iz, 0.0, -f * x.x * iz * iz, 0.0, f * iz, -f * x.y * iz * iz)
}

fn copy_into(dst: &mut DMatrix<f64>, src: &Matrix2x3<f64>) {
    dst.copy_from(src);
}

/// Multi-camera reprojection residual `pi(R^r R^g (p - c^g) + t^r) - x` over
/// blocks `[R^r, t^r, R^g, c^g, p, f]`.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionCost {
    pub observed: Vector2<f64>,
    pub cx: f64,
    pub cy: f64,
}

impl CostFunction for ReprojectionCost {
    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool {
        let rr = Matrix3::from_column_slice(params[0]);
        let tr = v3(params[1]);
        let rg = Matrix3::from_column_slice(params[2]);
        let cg = v3(params[3]);
        let p = v3(params[4]);
        let f = params[5][0];
        let q = rg * (p - cg);
        let y = rr * q;
        let x = y + tr;
        if x.z <= MIN_DEPTH {
            return false;
        }
        residual[0] = f * x.x / x.z + self.cx - self.observed.x;
        residual[1] = f * x.y / x.z + self.cy - self.observed.y;
        if let Some(jac) = jacobians {
            let pj = projection_jacobian(f, &x);
            let rrg = rr * rg;
            copy_into(&mut jac[0], &(pj * -hat(&y)));
            copy_into(&mut jac[1], &pj);
            copy_into(&mut jac[2], &(pj * rr * -hat(&q)));
            copy_into(&mut jac[3], &(pj * -rrg));
            copy_into(&mut jac[4], &(pj * rrg));
            jac[5][(0, 0)] = x.x / x.z;
            jac[5][(1, 0)] = x.y / x.z;
        }
        true
    }
}

/// Single-camera reprojection residual `pi(R (p - c)) - x` over `[R, c, p]`.
#[derive(Debug, Clone, Copy)]
pub struct CameraReprojectionCost {
    pub observed: Vector2<f64>,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CostFunction for CameraReprojectionCost {
    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool {
        let r = Matrix3::from_column_slice(params[0]);
        let c = v3(params[1]);
        let p = v3(params[2]);
        let x = r * (p - c);
        if x.z <= MIN_DEPTH {
            return false;
        }
        residual[0] = self.focal * x.x / x.z + self.cx - self.observed.x;
        residual[1] = self.focal * x.y / x.z + self.cy - self.observed.y;
        if let Some(jac) = jacobians {
            let pj = projection_jacobian(self.focal, &x);
            copy_into(&mut jac[0], &(pj * -hat(&x)));
            copy_into(&mut jac[1], &(pj * -r));
            copy_into(&mut jac[2], &(pj * r));
        }
        true
    }
}
