//! Independent reference solvers shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigsfm::so3::geodesic_distance;
use rigsfm::Rotation;
use rigsfm::solver::AdmmL1Problem;

/// An L1 problem in plain form: rows `(coeffs, rhs)` and lower bounds.
#[derive(Debug, Clone)]
pub struct L1Instance {
    pub n: usize,
    pub rows: Vec<(Vec<(usize, f64)>, f64)>,
    pub lower: Vec<(usize, f64)>,
}

impl L1Instance {
    pub fn to_problem(&self) -> AdmmL1Problem {
        let mut p = AdmmL1Problem::new();
        for v in 0..self.n {
            match self.lower.iter().find(|(b, _)| *b == v) {
                Some(&(_, l)) => p.add_bounded_variable(l),
                None => p.add_variable(),
            };
        }
        for (c, d) in &self.rows {
            p.add_row(c, *d);
        }
        p
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|(c, d)| (c.iter().map(|&(v, a)| a * z[v]).sum::<f64>() - d).abs())
            .sum()
    }

    pub fn feasible(&self, z: &[f64], tol: f64) -> bool {
        self.lower.iter().all(|&(v, l)| z[v] >= l - tol)
    }
}

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..=n - (k - cur.len()) {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), f)
}

/// Exact optimum of an L1 problem by enumerating LP vertices.
///
/// In the epigraph LP every vertex makes `n` independent hyperplanes tight,
/// each being either a zero residual row or an active bound, so the optimum
/// is the best feasible solution of such an `n x n` system.
pub fn lp_vertex_oracle(inst: &L1Instance) -> (f64, Vec<f64>) {
    let mut planes: Vec<(Vec<f64>, f64)> = Vec::new();
    for (c, d) in &inst.rows {
        let mut a = vec![0.0; inst.n];
        for &(v, x) in c {
            a[v] += x;
        }
        planes.push((a, *d));
    }
    for &(v, l) in &inst.lower {
        let mut a = vec![0.0; inst.n];
        a[v] = 1.0;
        planes.push((a, l));
    }
    let mut best = (f64::INFINITY, Vec::new());
    combinations(planes.len(), inst.n, &mut |subset| {
        let a = DMatrix::from_fn(inst.n, inst.n, |i, j| planes[subset[i]].0[j]);
        let b = DVector::from_fn(inst.n, |i, _| planes[subset[i]].1);
        let svd = a.clone().svd(false, false);
        let smax = svd.singular_values.max();
        if svd.singular_values.min() <= 1e-10 * smax.max(1.0) {
            return;
        }
        let Some(z) = a.lu().solve(&b) else { return };
        let z: Vec<f64> = z.iter().copied().collect();
        if !inst.feasible(&z, 1e-12) {
            return;
        }
        let obj = inst.objective(&z);
        if obj < best.0 {
            best = (obj, z);
        }
    });
    best
}

/// Random L1 instance with `n` variables; every variable has its own row.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> L1Instance {
    let nb = rng.random_range(0..=n.min(2));
    let lower: Vec<(usize, f64)> = (0..nb).map(|v| (v, 1.0)).collect();
    let m = n + rng.random_range(2..6);
    let rows = (0..m)
        .map(|_| {
            let mut c: Vec<(usize, f64)> = Vec::new();
            for v in 0..n {
                if rng.random_bool(0.6) {
                    c.push((v, rng.random_range(-2.0..2.0)));
                }
            }
            if c.is_empty() {
                c.push((rng.random_range(0..n), 1.0));
            }
            (c, rng.random_range(-3.0..3.0))
        })
        .collect();
    let mut inst = L1Instance { n, rows, lower };
    // every variable needs a row of its own to keep the LP bounded
    for v in 0..n {
        inst.rows.push((vec![(v, 1.0)], rng.random_range(-3.0..3.0)));
    }
    inst
}

/// Four single-camera units, c0 anchored, L1 baseline objective with s >= 1.
pub fn four_camera_instance(seed: u64) -> L1Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vector3<f64>> = (0..4)
        .map(|k| {
            if k == 0 {
                Vector3::zeros()
            } else {
                Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            }
        })
        .collect();
    let edges = [(0usize, 1usize), (1, 2), (2, 3), (3, 0), (0, 2)];
    let n = 9 + edges.len();
    let var = |cam: usize, a: usize| (cam - 1) * 3 + a;
    let mut rows = Vec::new();
    let mut lower = Vec::new();
    for (e, &(i, j)) in edges.iter().enumerate() {
        let s = 9 + e;
        lower.push((s, 1.0));
        let noise = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let t = (centers[i] - centers[j] + noise).normalize();
        for a in 0..3 {
            // s t - (c_i - c_j) = 0
            let mut c = vec![(s, t[a])];
            if i != 0 {
                c.push((var(i, a), -1.0));
            }
            if j != 0 {
                c.push((var(j, a), 1.0));
            }
            rows.push((c, 0.0));
        }
    }
    L1Instance { n, rows, lower }
}


/// The fixed corpus of small instances: ten random ones per size 1..=6.
pub fn small_instance_corpus() -> Vec<L1Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (1..=6).flat_map(|n| (0..10).map(|_| random_instance(&mut rng, n)).collect::<Vec<_>>()).collect()
}

fn median_cost(samples: &[Rotation], r: &Rotation) -> f64 {
    samples.iter().map(|s| geodesic_distance(s, r)).sum()
}

/// Minimizer of the summed geodesic distance by exhaustive search: a global
/// grid over axis-angle vectors, then local grids shrinking around the best
/// point until the spacing is below 0.01 degrees.
pub fn geodesic_median_grid(samples: &[Rotation]) -> Rotation {
    let pi = std::f64::consts::PI;
    let n = 24;
    let step = 2.0 * pi / n as f64;
    let mut best = (f64::INFINITY, Rotation::identity());
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let w = Vector3::new(i as f64, j as f64, k as f64) * step - Vector3::repeat(pi);
                if w.norm() > pi {
                    continue;
                }
                let r = Rotation::exp(&w);
                let c = median_cost(samples, &r);
                if c < best.0 {
                    best = (c, r);
                }
            }
        }
    }
    let mut h = step;
    while h > 0.01f64.to_radians() {
        let center = best.1;
        for i in -5i32..=5 {
            for j in -5i32..=5 {
                for k in -5i32..=5 {
                    let d = Vector3::new(i as f64, j as f64, k as f64) * (h / 5.0);
                    let r = Rotation::exp(&d) * center;
                    let c = median_cost(samples, &r);
                    if c < best.0 {
                        best = (c, r);
                    }
                }
            }
        }
        h *= 0.5;
    }
    best.1
}

/// A cluster of noisy rotations around a random center plus a few uniform outliers.
pub fn median_case(seed: u64) -> Vec<Rotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Rotation::uniform(&mut rng);
    let inliers = rng.random_range(5..10);
    let mut out: Vec<Rotation> = (0..inliers)
        .map(|_| {
            let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            Rotation::exp(&(w * 15f64.to_radians())) * center
        })
        .collect();
    for _ in 0..rng.random_range(0..inliers / 2) {
        out.push(Rotation::uniform(&mut rng));
    }
    out
}
