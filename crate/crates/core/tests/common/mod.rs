//! Reference implementations used as independent oracles by the
//! integration tests. Deliberately naive: plain arrays, bit-by-bit loops,
//! brute-force sampling.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat4 = [[f64; 4]; 4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_q(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(l, h)| {
            // Stay inside the limits and within ±π so samples are varied.
            let l = l.max(-3.0);
            let h = h.min(3.0);
            rng.gen_range(l..h)
        })
        .collect()
}

pub fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Standard DH link matrix, written out literally.
pub fn dh_matrix(a: f64, d: f64, alpha: f64, theta: f64) -> Mat4 {
    let (ct, st) = (theta.cos(), theta.sin());
    let (ca, sa) = (alpha.cos(), alpha.sin());
    [
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Modified (Craig) DH link matrix.
pub fn craig_matrix(a: f64, d: f64, alpha: f64, theta: f64) -> Mat4 {
    let (ct, st) = (theta.cos(), theta.sin());
    let (ca, sa) = (alpha.cos(), alpha.sin());
    [
        [ct, -st, 0.0, a],
        [st * ca, ct * ca, -sa, -d * sa],
        [st * sa, ct * sa, ca, d * ca],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Product of standard DH matrices from a (a, d, alpha, offset) table.
pub fn dh_chain(table: &[[f64; 4]], q: &[f64]) -> Mat4 {
    let mut t = identity();
    for (row, qi) in table.iter().zip(q) {
        t = mat_mul(&t, &dh_matrix(row[0], row[1], row[2], qi + row[3]));
    }
    t
}

pub fn identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// UR5 as published by the manufacturer (negative link lengths).
pub const UR5_TABLE: [[f64; 4]; 6] = [
    [0.0, 0.089159, std::f64::consts::FRAC_PI_2, 0.0],
    [-0.425, 0.0, 0.0, 0.0],
    [-0.39225, 0.0, 0.0, 0.0],
    [0.0, 0.10915, std::f64::consts::FRAC_PI_2, 0.0],
    [0.0, 0.09465, -std::f64::consts::FRAC_PI_2, 0.0],
    [0.0, 0.0823, 0.0, 0.0],
];

/// xArm7 standard DH table.
pub const XARM7_TABLE: [[f64; 4]; 7] = [
    [0.0, 0.267, -std::f64::consts::FRAC_PI_2, 0.0],
    [0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0],
    [0.0525, 0.293, std::f64::consts::FRAC_PI_2, 0.0],
    [0.0775, 0.0, std::f64::consts::FRAC_PI_2, 0.0],
    [0.0, 0.3425, std::f64::consts::FRAC_PI_2, 0.0],
    [0.076, 0.0, -std::f64::consts::FRAC_PI_2, 0.0],
    [0.0, 0.097, 0.0, 0.0],
];

/// Franka Panda in the manufacturer's modified-DH form, flange included.
pub fn panda_craig(q: &[f64]) -> Mat4 {
    use std::f64::consts::FRAC_PI_2 as H;
    let a = [0.0, 0.0, 0.0, 0.0825, -0.0825, 0.0, 0.088, 0.0];
    let d = [0.333, 0.0, 0.316, 0.0, 0.384, 0.0, 0.0, 0.107];
    let alpha = [0.0, -H, H, H, -H, H, H, 0.0];
    let mut t = identity();
    for i in 0..8 {
        let theta = if i < 7 { q[i] } else { 0.0 };
        t = mat_mul(&t, &craig_matrix(a[i], d[i], alpha[i], theta));
    }
    t
}

pub fn position(m: &Mat4) -> [f64; 3] {
    [m[0][3], m[1][3], m[2][3]]
}

/// Central-difference Jacobian of an arbitrary R^n → R^m map.
pub fn fd_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, q: &[f64], h: f64) -> Vec<Vec<f64>> {
    let m = f(q).len();
    let mut jac = vec![vec![0.0; q.len()]; m];
    for i in 0..q.len() {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[i] += h;
        qm[i] -= h;
        let (fp, fm) = (f(&qp), f(&qm));
        for r in 0..m {
            jac[r][i] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    jac
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn lu_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())
            .unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det
}

/// `J Jᵀ` for a row-major matrix.
pub fn gram(j: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = j.len();
    let mut g = vec![vec![0.0; m]; m];
    for r in 0..m {
        for c in 0..m {
            g[r][c] = j[r].iter().zip(&j[c]).map(|(a, b)| a * b).sum();
        }
    }
    g
}

/// CRC-16, polynomial 0x8005, processed one bit at a time.
pub fn crc16_bitwise(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0;
    for &byte in bytes {
        for bit in (0..8).rev() {
            let in_bit = (byte >> bit) & 1 == 1;
            let top = crc & 0x8000 != 0;
            crc <<= 1;
            if in_bit != top {
                crc ^= 0x8005;
            }
        }
    }
    crc
}

/// Reflected CRC-32 (IEEE), processed one bit at a time.
pub fn crc32_bitwise(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &byte in bytes {
        crc ^= byte as u32;
        for _ in 0..8 {
            let lsb = crc & 1;
            crc >>= 1;
            if lsb == 1 {
                crc ^= 0xEDB8_8320;
            }
        }
    }
    !crc
}

/// Minimum distance between two segments by dense sampling of both: an
/// n×n grid over the segment parameters, then a second n×n grid over the
/// cells around the best coarse sample.
pub fn sampled_segment_distance(a0: [f64; 3], a1: [f64; 3], b0: [f64; 3], b1: [f64; 3], n: usize) -> f64 {
    let lerp = |p: [f64; 3], q: [f64; 3], t: f64| {
        [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), p[2] + t * (q[2] - p[2])]
    };
    let grid = |s_lo: f64, s_hi: f64, t_lo: f64, t_hi: f64| {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..n {
            let s = s_lo + (s_hi - s_lo) * i as f64 / (n - 1) as f64;
            let pa = lerp(a0, a1, s);
            for j in 0..n {
                let t = t_lo + (t_hi - t_lo) * j as f64 / (n - 1) as f64;
                let pb = lerp(b0, b1, t);
                let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, s, t);
                }
            }
        }
        best
    };
    let h = 1.0 / (n - 1) as f64;
    let (_, s, t) = grid(0.0, 1.0, 0.0, 1.0);
    grid((s - h).max(0.0), (s + h).min(1.0), (t - h).max(0.0), (t + h).min(1.0)).0
}
