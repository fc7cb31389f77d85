//! Desk-scale stand-in for a large equilibrium-structure corpus.
//!
//! Each structure is a small cluster relaxed to a local minimum of a
//! pairwise Lennard-Jones surrogate, so emitted positions sit at equilibrium
//! of a known energy function.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{centroid, distance, Point, Structure};

/// H, C, N, O, F.
pub const SYNTHETIC_ELEMENTS: [u8; 5] = [1, 6, 7, 8, 9];
const ELEMENT_WEIGHTS: [f64; 5] = [0.35, 0.35, 0.1, 0.12, 0.08];

pub const MIN_ATOMS: usize = 4;
pub const MAX_ATOMS: usize = 16;

/// Pairwise surrogate energy `eps_ij [(r0_ij/r)^12 - 2 (r0_ij/r)^6]`, with
/// minimum `-eps_ij` at `r = r0_ij`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Surrogate;

impl Surrogate {
    /// (equilibrium radius, well depth, partial charge)
    fn params(z: u8) -> (f64, f64, f64) {
        match z {
            1 => (1.5, 0.4, 0.3),
            6 => (2.0, 1.0, -0.1),
            7 => (1.9, 0.9, -0.3),
            8 => (1.85, 0.8, -0.4),
            9 => (1.8, 0.6, -0.25),
            _ => (2.0, 0.5, 0.0),
        }
    }

    fn pair(zi: u8, zj: u8) -> (f64, f64) {
        let (ri, ei, _) = Self::params(zi);
        let (rj, ej, _) = Self::params(zj);
        (0.5 * (ri + rj), (ei * ej).sqrt())
    }

    pub fn equilibrium_distance(zi: u8, zj: u8) -> f64 {
        Self::pair(zi, zj).0
    }

    pub fn energy(numbers: &[u8], positions: &[Point]) -> f64 {
        Self::energy_and_forces(numbers, positions).0
    }

    /// Energy and forces `-dE/dp`.
    pub fn energy_and_forces(numbers: &[u8], positions: &[Point]) -> (f64, Vec<Point>) {
        let n = numbers.len();
        let mut e = 0.0;
        let mut f = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in 0..i {
                let (r0, eps) = Self::pair(numbers[i], numbers[j]);
                let d = [
                    positions[i][0] - positions[j][0],
                    positions[i][1] - positions[j][1],
                    positions[i][2] - positions[j][2],
                ];
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let s6 = (r0 * r0 / r2).powi(3);
                e += eps * (s6 * s6 - 2.0 * s6);
                // dE/dr * 1/r
                let de_over_r = eps * (-12.0 * s6 * s6 + 12.0 * s6) / r2;
                for k in 0..3 {
                    f[i][k] -= de_over_r * d[k];
                    f[j][k] += de_over_r * d[k];
                }
            }
        }
        (e, f)
    }

    /// Norm of the centroid-relative dipole of fixed partial charges.
    pub fn dipole_norm(numbers: &[u8], positions: &[Point]) -> f64 {
        let c = centroid(positions);
        let mut mu = [0.0; 3];
        for (&z, p) in numbers.iter().zip(positions) {
            let q = Self::params(z).2;
            for k in 0..3 {
                mu[k] += q * (p[k] - c[k]);
            }
        }
        (mu[0] * mu[0] + mu[1] * mu[1] + mu[2] * mu[2]).sqrt()
    }

    pub fn mean_force_norm(numbers: &[u8], positions: &[Point]) -> f64 {
        let (_, f) = Self::energy_and_forces(numbers, positions);
        f.iter().map(norm).sum::<f64>() / f.len() as f64
    }

    /// FIRE minimization until the largest per-atom force norm drops below
    /// `tol`. Returns the relaxed positions and the number of iterations.
    pub fn relax(numbers: &[u8], start: &[Point], tol: f64, max_iter: usize) -> (Vec<Point>, usize) {
        const DT_MAX: f64 = 0.05;
        const N_MIN: usize = 5;
        const F_INC: f64 = 1.1;
        const F_DEC: f64 = 0.5;
        const ALPHA0: f64 = 0.1;
        const F_ALPHA: f64 = 0.99;
        let n = start.len();
        let mut x = start.to_vec();
        let mut v = vec![[0.0; 3]; n];
        let mut dt = 0.005;
        let mut alpha = ALPHA0;
        let mut since_neg = 0;
        for it in 0..max_iter {
            let (_, f) = Self::energy_and_forces(numbers, &x);
            if f.iter().map(norm).fold(0.0, f64::max) < tol {
                return (x, it);
            }
            let power: f64 = f.iter().zip(&v).map(|(a, b)| dot(a, b)).sum();
            let fnorm = f.iter().map(|a| dot(a, a)).sum::<f64>().sqrt();
            let vnorm = v.iter().map(|a| dot(a, a)).sum::<f64>().sqrt();
            if power > 0.0 {
                for (vi, fi) in v.iter_mut().zip(&f) {
                    for k in 0..3 {
                        vi[k] = (1.0 - alpha) * vi[k] + alpha * vnorm * fi[k] / fnorm.max(1e-300);
                    }
                }
                since_neg += 1;
                if since_neg > N_MIN {
                    dt = (dt * F_INC).min(DT_MAX);
                    alpha *= F_ALPHA;
                }
            } else {
                v.iter_mut().for_each(|vi| *vi = [0.0; 3]);
                dt *= F_DEC;
                alpha = ALPHA0;
                since_neg = 0;
            }
            // semi-implicit Euler with unit masses
            for ((xi, vi), fi) in x.iter_mut().zip(v.iter_mut()).zip(&f) {
                for k in 0..3 {
                    vi[k] += dt * fi[k];
                    xi[k] += dt * vi[k];
                }
            }
        }
        (x, max_iter)
    }
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_direction(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let d: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(&d);
        if n > 1e-8 {
            return d.map(|c| c / n);
        }
    }
}

fn sample_element(rng: &mut ChaCha8Rng) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (z, w) in SYNTHETIC_ELEMENTS.iter().zip(ELEMENT_WEIGHTS) {
        acc += w;
        if u < acc {
            return *z;
        }
    }
    SYNTHETIC_ELEMENTS[SYNTHETIC_ELEMENTS.len() - 1]
}

/// Random connected start: each new atom is placed near a random existing
/// atom at roughly its equilibrium distance, avoiding close contacts.
fn random_cluster(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<Point>) {
    let n = rng.random_range(MIN_ATOMS..=MAX_ATOMS);
    let numbers: Vec<u8> = (0..n).map(|_| sample_element(rng)).collect();
    'restart: loop {
        let mut pos: Vec<Point> = vec![[0.0; 3]];
        for i in 1..n {
            let mut placed = false;
            for _ in 0..200 {
                let anchor = rng.random_range(0..i);
                let r0 = Surrogate::equilibrium_distance(numbers[i], numbers[anchor]);
                let r = r0 * rng.random_range(0.95..1.15);
                let d = random_direction(rng);
                let p = [
                    pos[anchor][0] + r * d[0],
                    pos[anchor][1] + r * d[1],
                    pos[anchor][2] + r * d[2],
                ];
                let clear = pos.iter().zip(&numbers).all(|(q, &zq)| {
                    distance(&p, q) > 0.85 * Surrogate::equilibrium_distance(numbers[i], zq)
                });
                if clear {
                    pos.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return (numbers, pos);
    }
}

const RELAX_TOL: f64 = 1e-5;
const RELAX_MAX_ITER: usize = 100_000;

fn relaxed_cluster(seed: u64, index: u64) -> (Vec<u8>, Vec<Point>, Vec<Point>) {
    let mut rng = substream(seed, index);
    let (numbers, start) = random_cluster(&mut rng);
    let (relaxed, _) = Surrogate::relax(&numbers, &start, RELAX_TOL, RELAX_MAX_ITER);
    let c = centroid(&relaxed);
    let center = |ps: &[Point]| -> Vec<Point> {
        ps.iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect()
    };
    (numbers, center(&start), center(&relaxed))
}

fn labels_for(numbers: &[u8], positions: &[Point]) -> BTreeMap<String, f64> {
    let mut labels = BTreeMap::new();
    labels.insert("surrogate_energy".to_string(), Surrogate::energy(numbers, positions));
    labels.insert("dipole_norm".to_string(), Surrogate::dipole_norm(numbers, positions));
    labels
}

/// `n` relaxed clusters of 4-16 atoms over H, C, N, O, F, centered at the
/// origin, labelled with `surrogate_energy` and `dipole_norm`. Structure `i`
/// depends only on `(seed, i)`.
pub fn make_synthetic_dataset(n: usize, seed: u64) -> Vec<Structure> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (numbers, _, relaxed) = relaxed_cluster(seed, i);
            let labels = labels_for(&numbers, &relaxed);
            Structure::with_details(numbers, relaxed, labels, None)
                .expect("relaxed clusters are valid structures")
        })
        .collect()
}

/// Like [`make_synthetic_dataset`] but `positions` hold the unrelaxed start
/// and the paired frame holds the relaxed structure.
pub fn make_relaxation_pairs(n: usize, seed: u64) -> Vec<Structure> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (numbers, start, relaxed) = relaxed_cluster(seed, i);
            let labels = labels_for(&numbers, &relaxed);
            Structure::with_details(numbers, start, labels, Some(relaxed))
                .expect("relaxed clusters are valid structures")
        })
        .collect()
}
