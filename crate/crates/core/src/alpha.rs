//! Everything alpha: admissibility, topological constants, the two coupled
//! volume forms with their k-expansions, and the second-order expansion
//! coefficients of the twisted density-of-states computation.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{Geometry, MetricPair, PointData};
use crate::Result;

/// The coupling vector alpha with its ambient dimensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaParams {
    pub alpha: Vec<f64>,
    pub n: usize,
    pub r: usize,
}

impl AlphaParams {
    pub fn new(alpha: Vec<f64>, n: usize, r: usize) -> Result<Self> {
        if alpha.len() != n + 2 {
            return Err(Error::Config(format!(
                "alpha must have length n+2 = {}, got {}",
                n + 2,
                alpha.len()
            )));
        }
        Ok(AlphaParams { alpha, n, r })
    }

    fn norm(&self) -> f64 {
        self.alpha.iter().map(|a| a.abs()).fold(0.0, f64::max)
    }
}

/// Classification of the coupling regime by beta_1 (beta_0 + r gamma_0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaClass {
    Generic,
    Special,
}

/// Derived invariants of (alpha, geometry).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopConstants {
    pub n: usize,
    pub r: usize,
    /// the coupling vector these constants derive from
    pub alpha: Vec<f64>,
    /// beta_0 .. beta_n
    pub beta: Vec<f64>,
    /// gamma_0 .. gamma_n
    pub gamma: Vec<f64>,
    /// slope-type Hermitian-Einstein constant
    pub lambda: f64,
    /// average scalar curvature
    pub s_hat: f64,
    pub lambda_prime: f64,
    pub kappa: f64,
    pub volume: f64,
}

fn binom(m: i64, k: i64) -> f64 {
    if k < 0 || m < k {
        return 0.0;
    }
    let mut acc = 1.0;
    for j in 0..k {
        acc = acc * (m - j) as f64 / (j + 1) as f64;
    }
    acc
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|x| x as f64).product()
}

/// The beta/gamma binomial sums.
pub fn beta_gamma(params: &AlphaParams) -> (Vec<f64>, Vec<f64>) {
    let n = params.n as i64;
    let r = params.r as f64;
    let mut beta = Vec::with_capacity(params.n + 1);
    let mut gamma = Vec::with_capacity(params.n + 1);
    for i in 0..=n {
        let pref = factorial((n - i) as usize) / r.powi(i as i32);
        let mut b = 0.0;
        let mut g = 0.0;
        for (p, &a) in params.alpha.iter().enumerate() {
            let p = p as i64;
            b += p as f64 * binom(n + 1 - p, i) * a * r.powi((n + 1 - p) as i32);
            g += (n + 1 - p) as f64 * binom(n - p, i) * a * r.powi((n - p) as i32);
        }
        beta.push(pref * b);
        gamma.push(pref * g);
    }
    (beta, gamma)
}

/// Assemble the topological constants; fails on inadmissible alpha.
pub fn top_constants(
    params: &AlphaParams,
    geom: &Geometry,
    pair: &MetricPair,
) -> Result<TopConstants> {
    if geom.n != params.n || geom.r != params.r {
        return Err(Error::Config(format!(
            "alpha is for (n, r) = ({}, {}) but geometry has ({}, {})",
            params.n, params.r, geom.n, geom.r
        )));
    }
    let (beta, gamma) = beta_gamma(params);
    let thresh = 1e-10 * params.norm().max(f64::MIN_POSITIVE);
    if beta[0].abs() <= thresh {
        return Err(Error::Inadmissible {
            constant: "beta_0",
            value: beta[0],
        });
    }
    if gamma[0].abs() <= thresh {
        return Err(Error::Inadmissible {
            constant: "gamma_0",
            value: gamma[0],
        });
    }
    let lambda = geom.lambda_slope(pair);
    let s_hat = geom.s_hat(pair);
    let r = params.r as f64;
    let lambda_prime = s_hat / 2.0 - r * lambda * beta[1] / beta[0];
    // kappa multiplies a double contraction that vanishes identically on
    // curves, where beta_2/gamma_2 are not defined; set it to zero there
    let kappa = if params.n >= 2 {
        4.0 * r * (gamma[2] / gamma[0] - beta[2] / beta[0])
    } else {
        0.0
    };
    Ok(TopConstants {
        n: params.n,
        r: params.r,
        alpha: params.alpha.clone(),
        beta,
        gamma,
        lambda,
        s_hat,
        lambda_prime,
        kappa,
        volume: geom.volume(pair),
    })
}

/// Generic/Special split, scale-invariant in alpha.
pub fn classify(tc: &TopConstants) -> AlphaClass {
    let r = tc.r as f64;
    let value = tc.beta[1] * (tc.beta[0] + r * tc.gamma[0]);
    let scale = (tc.beta.iter().map(|b| b.abs()).fold(0.0, f64::max)
        + tc.gamma.iter().map(|g| g.abs()).fold(0.0, f64::max))
    .powi(2)
    .max(f64::MIN_POSITIVE);
    if value.abs() > 1e-12 * scale {
        AlphaClass::Generic
    } else {
        AlphaClass::Special
    }
}

/// Node data of the two volume forms at a fixed twist level k.
#[derive(Clone, Debug)]
pub struct VolumeFormData {
    pub k: i64,
    /// densities dV_j = phi_j omega^[n]
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    /// expansion fields: f0 = beta_0 and g0 = gamma_0 are constants
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub int_dv1: f64,
    pub int_dv2: f64,
}

/// Top-form coefficient of tau_1 ^ ... ^ tau_n relative to the coordinate
/// frame, for diagonal (1,1)-forms given by per-factor hat components.
fn wedge_top(hats: &[&[f64]]) -> f64 {
    match hats.len() {
        1 => hats[0][0],
        2 => hats[0][0] * hats[1][1] + hats[0][1] * hats[1][0],
        _ => unreachable!("dimension is 1 or 2"),
    }
}

/// Half the double contraction of a pair of diagonal real (1,1)-forms:
/// Lambda(A) Lambda(B) - sum_a A_a B_a / g_a^2. Vanishes identically when
/// n = 1.
pub fn lambda2_hat(a: &[f64], b: &[f64], g: &[f64]) -> f64 {
    let la: f64 = a.iter().zip(g).map(|(x, gg)| x / gg).sum();
    let lb: f64 = b.iter().zip(g).map(|(x, gg)| x / gg).sum();
    let pair: f64 = a
        .iter()
        .zip(b)
        .zip(g)
        .map(|((x, y), gg)| x * y / (gg * gg))
        .sum();
    la * lb - pair
}

/// Evaluate both volume densities and their k-expansion fields; errors if a
/// density fails positivity at some node.
pub fn volume_forms(
    geom: &Geometry,
    pair: &MetricPair,
    k: i64,
    tc: &TopConstants,
) -> Result<VolumeFormData> {
    if k < 1 {
        return Err(Error::Config("volume forms need k >= 1".into()));
    }
    let n = geom.n;
    let r = geom.r as f64;
    let kf = k as f64;
    let nodes = geom.node_count();
    let mut phi1 = Vec::with_capacity(nodes);
    let mut phi2 = Vec::with_capacity(nodes);
    let mut f1 = Vec::with_capacity(nodes);
    let mut f2 = Vec::with_capacity(nodes);
    let mut g1 = Vec::with_capacity(nodes);
    let mut g2 = Vec::with_capacity(nodes);

    let alpha = &tc.alpha;

    for flat in 0..nodes {
        let pd = geom.point_data_with(pair, flat);
        let omega: Vec<f64> = pd.g.clone();
        let trf: Vec<f64> = (0..n)
            .map(|a| pd.f.iter().map(|hats| hats[a]).sum::<f64>())
            .collect();
        let omega2: Vec<f64> = (0..n).map(|a| kf * r * omega[a] + trf[a]).collect();
        let omega1: Vec<f64> = omega.iter().map(|&v| kf * v).collect();
        // top coefficient of omega^[n] = omega^n/n! in the coordinate frame
        let omega_top = match n {
            1 => omega[0],
            _ => omega[0] * omega[1],
        };

        let mut dv1 = 0.0;
        let mut dv2 = 0.0;
        for (p, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            // dV1: p alpha_p omega_1^{p-1} ^ omega_2^{n+1-p}
            if p >= 1 {
                let mut forms: Vec<&[f64]> = Vec::with_capacity(n);
                for _ in 0..p - 1 {
                    forms.push(&omega1);
                }
                for _ in 0..(n + 1 - p) {
                    forms.push(&omega2);
                }
                if forms.len() == n {
                    dv1 += p as f64 * a * wedge_top(&forms);
                }
            }
            // dV2: (n+1-p) alpha_p omega_1^p ^ omega_2^{n-p}
            if p <= n {
                let mut forms: Vec<&[f64]> = Vec::with_capacity(n);
                for _ in 0..p {
                    forms.push(&omega1);
                }
                for _ in 0..(n - p) {
                    forms.push(&omega2);
                }
                dv2 += (n + 1 - p) as f64 * a * wedge_top(&forms);
            }
        }
        phi1.push(dv1 / omega_top);
        phi2.push(dv2 / omega_top);

        let lam_trf = pd.i_lambda_tr_f;
        f1.push(tc.beta[1] * lam_trf);
        g1.push(tc.gamma[1] * lam_trf);
        if n >= 2 {
            let l2 = lambda2_hat(&trf, &trf, &pd.g);
            f2.push(tc.beta[2] * l2);
            g2.push(tc.gamma[2] * l2);
        } else {
            f2.push(0.0);
            g2.push(0.0);
        }
    }

    for (node, &v) in phi1.iter().enumerate() {
        if v <= 0.0 {
            return Err(Error::NonPositiveVolume {
                which: 1,
                node,
                value: v,
            });
        }
    }
    for (node, &v) in phi2.iter().enumerate() {
        if v <= 0.0 {
            return Err(Error::NonPositiveVolume {
                which: 2,
                node,
                value: v,
            });
        }
    }

    let int_dv1 = geom.integrate(pair, &phi1);
    let int_dv2 = geom.integrate(pair, &phi2);
    Ok(VolumeFormData {
        k,
        phi1,
        phi2,
        f1,
        f2,
        g1,
        g2,
        int_dv1,
        int_dv2,
    })
}
