#![allow(dead_code)]

use nalgebra::DMatrix;
use sw_design::model::{fixed_effect_names, sequence_design, Sequence};
use sw_design::{Design, VarianceComponents};

/// Parses `"0011,0111"` into an allocation matrix.
pub fn alloc(s: &str) -> Vec<Sequence> {
    s.split(',')
        .map(|row| row.bytes().map(|b| b - b'0').collect())
        .collect()
}

pub fn sorted(mut x: Vec<Sequence>) -> Vec<Sequence> {
    x.sort();
    x
}

pub fn same_rows(a: &[Sequence], b: &[Sequence]) -> bool {
    sorted(a.to_vec()) == sorted(b.to_vec())
}

pub fn show(x: &[Sequence]) -> String {
    x.iter()
        .map(|r| r.iter().map(|d| char::from(b'0' + d)).collect::<String>())
        .collect::<Vec<_>>()
        .join(",")
}

pub const REFERENCE_X: &str = "000112,000112,001122,001122,011222,011222";

pub fn reference_design() -> Design {
    Design::new(8, 3, alloc(REFERENCE_X)).unwrap()
}

/// `Lambda_q` by assembling the stacked design matrix and the full
/// block-diagonal marginal covariance, then inverting densely.
pub fn brute_force_lambda(design: &Design, vc: &VarianceComponents<f64>) -> DMatrix<f64> {
    let (m, c, t) = (design.m(), design.clusters(), design.periods());
    let p = fixed_effect_names(design.arms(), t).len();
    let n = m * c * t;
    let mut a = DMatrix::<f64>::zeros(n, p);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for (i, seq) in design.allocation().iter().enumerate() {
        let b = sequence_design::<f64>(seq, design.arms());
        for j in 0..t {
            for k in 0..m {
                let row = i * m * t + j * m + k;
                for col in 0..p {
                    a[(row, col)] = b[(j, col)];
                }
                for j2 in 0..t {
                    for k2 in 0..m {
                        let row2 = i * m * t + j2 * m + k2;
                        let mut cov = vc.sigma2_c;
                        if j == j2 {
                            cov += vc.sigma2_theta;
                        }
                        if k == k2 {
                            cov += vc.sigma2_s;
                        }
                        if j == j2 && k == k2 {
                            cov += vc.sigma2_eps;
                        }
                        v[(row, row2)] = cov;
                    }
                }
            }
        }
    }
    let vinv = v.try_inverse().expect("V invertible");
    let info = a.transpose() * vinv * &a;
    let inv = info.try_inverse().expect("information invertible");
    let q = design.q();
    inv.view((0, 0), (q, q)).into_owned()
}

pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs() / scale))
}
