//! Circle-invariant model geometries: P^1 with split bundles, and products
//! P^1 x P^1 assembled from two factors.
//!
//! Everything reduces to one real variable per factor, t = log|z|^2. A
//! potential profile phi(t) = log(1+e^t) + u(t) determines the Kahler form
//! through phi''; summand weight profiles psi_i(t) = m_i log(1+e^t) + v_i(t)
//! determine the bundle curvature through psi_i''.
//!
//! Metric state is stored as a Fubini-Study multiple plus a correction jet
//! per node. Curvature fields divide by phi'', which decays like e^{-|t|} at
//! the ends of the t-line; splitting off the FS part lets those quotients be
//! taken against exact closed forms (integer polynomials in u = 1-2s,
//! w = s(1-s)) so scalar curvature and its Laplacian stay accurate at the
//! extreme quadrature nodes. Corrections vanish there, and the balanced
//! iteration only ever adds correction jets.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::jet1d::Jet;
use crate::quad::Quadrature;
use crate::Result;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Gaussian bump added to a profile.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BumpSpec {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl BumpSpec {
    /// Jet of amplitude * exp(-((t-center)/width)^2) to order `ord`.
    pub fn jet(&self, t: f64, ord: usize) -> Jet {
        let tau = t - self.center;
        let a = 1.0 / (self.width * self.width);
        let g = self.amplitude * (-a * tau * tau).exp();
        // f^(n) = p_n(tau) f with p_{n+1} = p_n' - 2a tau p_n
        let mut p = vec![1.0f64];
        let mut derivs = vec![g];
        for _ in 0..ord {
            let mut next = vec![0.0; p.len() + 1];
            for (k, &coeff) in p.iter().enumerate() {
                if k >= 1 {
                    next[k - 1] += coeff * k as f64;
                }
                next[k + 1] -= 2.0 * a * coeff;
            }
            p = next;
            let mut val = 0.0;
            let mut tpow = 1.0;
            for &coeff in &p {
                val += coeff * tpow;
                tpow *= tau;
            }
            derivs.push(val * g);
        }
        Jet::new(&derivs)
    }
}

/// Sum of Gaussian bumps: the non-FS part of a profile.
#[derive(Clone, Debug, Default)]
pub struct Correction {
    pub bumps: Vec<BumpSpec>,
}

impl Correction {
    pub fn jet(&self, t: f64, ord: usize) -> Jet {
        let mut acc = Jet::constant(0.0, ord);
        for b in &self.bumps {
            acc = acc.add(&b.jet(t, ord));
        }
        acc
    }
}

/// Reference data of the Fubini-Study potential at one node, exact in the
/// cancellation-free (u, w) basis.
#[derive(Clone, Copy, Debug)]
pub struct FsRef {
    /// order-6 jet of log(1+e^t)
    pub full: Jet,
    /// order-4 jet of phi_FS'' = w
    pub v: Jet,
    /// order-2 jet of (log phi_FS'')'' = -2w, negated: +2w
    pub neg_lnv2: Jet,
}

/// Jet of log(1+e^t). Derivatives are integer polynomials in u = 1-2s and
/// w = s(1-s) under the closed derivation u' = -2w, w' = uw; this basis is
/// cancellation-free at both ends of the t-line.
pub fn fs_jet(t: f64, ord: usize) -> Jet {
    let (s, sm) = split_logistic(t);
    let u = sm - s;
    let w = s * sm;

    let mut derivs = Vec::with_capacity(ord + 1);
    let value = if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    };
    derivs.push(value);
    if ord >= 1 {
        derivs.push(s);
    }
    // poly[a][b] is the coefficient of u^a w^b, starting from phi'' = w
    let mut poly = vec![vec![0.0, 1.0]];
    for k in 2..=ord {
        let mut val = 0.0;
        let mut upow = 1.0;
        for row in &poly {
            let mut wpow = 1.0;
            for &c in row {
                if c != 0.0 {
                    val += c * upow * wpow;
                }
                wpow *= w;
            }
            upow *= u;
        }
        derivs.push(val);
        if k == ord {
            break;
        }
        // d(u^a w^b) = -2a u^{a-1} w^{b+1} + b u^{a+1} w^b
        let mut next = vec![vec![0.0; poly[0].len() + 2]; poly.len() + 2];
        for (a, row) in poly.iter().enumerate() {
            for (b, &c) in row.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                if a >= 1 {
                    next[a - 1][b + 1] += -2.0 * a as f64 * c;
                }
                next[a + 1][b] += b as f64 * c;
            }
        }
        poly = next;
    }
    derivs.truncate(ord + 1);
    Jet::new(&derivs)
}

/// (s, 1-s) both to full relative accuracy.
fn split_logistic(t: f64) -> (f64, f64) {
    if t >= 0.0 {
        let q = (-t).exp();
        (1.0 / (1.0 + q), q / (1.0 + q))
    } else {
        let q = t.exp();
        (q / (1.0 + q), 1.0 / (1.0 + q))
    }
}

pub fn fs_ref(t: f64) -> FsRef {
    let (s, sm) = split_logistic(t);
    let u = sm - s;
    let w = s * sm;
    let full = fs_jet(t, 6);
    let v = full.deriv().deriv();
    // (log w)'' along t: -2w, -2uw, 4w^2 - 2u^2 w (exact)
    let neg_lnv2 = Jet::new(&[2.0 * w, 2.0 * u * w, 2.0 * u * u * w - 4.0 * w * w]);
    FsRef { full, v, neg_lnv2 }
}

/// One P^1 factor: bundle degrees, potential correction, per-summand weight
/// corrections and the quadrature rule on its t-line.
#[derive(Clone, Debug)]
pub struct Factor {
    pub degrees: Vec<i64>,
    pub potential: Correction,
    pub weights: Vec<Correction>,
    pub quad: Quadrature,
    /// cached FS reference at each node
    pub fs: Vec<FsRef>,
}

/// Declarative geometry description (the JSON interface).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub dimension: usize,
    pub factors: Vec<FactorSpec>,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub degrees: Vec<i64>,
    #[serde(default)]
    pub metric_bumps: Vec<BumpSpec>,
    /// one bump list per summand of this factor
    #[serde(default)]
    pub weight_bumps: Vec<Vec<BumpSpec>>,
}

fn default_nodes() -> usize {
    200
}

impl GeometrySpec {
    pub fn fs(n: usize, degrees_per_factor: &[Vec<i64>]) -> Self {
        GeometrySpec {
            dimension: n,
            factors: degrees_per_factor
                .iter()
                .map(|d| FactorSpec {
                    degrees: d.clone(),
                    metric_bumps: Vec::new(),
                    weight_bumps: Vec::new(),
                })
                .collect(),
            nodes: default_nodes(),
        }
    }
}

/// A model geometry with evaluable metric and curvature data.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub n: usize,
    pub factors: Vec<Factor>,
    /// global summand -> per-factor summand index
    pub summands: Vec<Vec<usize>>,
    pub r: usize,
}

/// One circle-invariant function on a factor: fs_scale * log(1+e^t) plus a
/// free order-6 correction jet per node.
#[derive(Clone, Debug)]
pub struct NodeFn {
    pub fs_scale: f64,
    pub corr: Vec<Jet>,
}

impl NodeFn {
    pub fn flat(scale: f64, nodes: usize) -> Self {
        NodeFn {
            fs_scale: scale,
            corr: vec![Jet::constant(0.0, 6); nodes],
        }
    }

    /// Full jet at node i of the factor.
    pub fn jet(&self, fs: &FsRef, i: usize) -> Jet {
        fs_full(fs).scale(self.fs_scale).add(&self.corr[i])
    }
}

fn fs_full(fs: &FsRef) -> Jet {
    fs.full
}

/// Metric state: the mutable pair (h, H) of the balanced iteration.
/// `phi[a]` is the potential of factor a; `psi[s][a]` the weight of global
/// summand s on factor a (weights stay separable across factors).
#[derive(Clone, Debug)]
pub struct MetricPair {
    pub phi: Vec<NodeFn>,
    pub psi: Vec<Vec<NodeFn>>,
}

/// Pointwise metric/curvature data at one node.
#[derive(Clone, Debug)]
pub struct PointData {
    /// per factor: phi''
    pub g: Vec<f64>,
    /// per factor: 1/phi''
    pub g_inv: Vec<f64>,
    /// scalar curvature
    pub s: f64,
    /// per factor: Ricci hat component -(log phi'')''
    pub tr_r: Vec<f64>,
    pub norm_r2: f64,
    pub norm_tr_r2: f64,
    /// per summand, per factor: psi''
    pub f: Vec<Vec<f64>>,
    /// diagonal of i Lambda F per summand
    pub i_lambda_f: Vec<f64>,
    pub i_lambda_tr_f: f64,
}

/// A scalar field as a sum over factors of univariate jets (the shape every
/// curvature field here takes); its Laplacian is then exact.
#[derive(Clone, Debug)]
pub struct SepField {
    /// parts[a][i]: order >= 2 jet on factor a at its node i
    pub parts: Vec<Vec<Jet>>,
}

impl SepField {
    pub fn value(&self, node: &[usize]) -> f64 {
        self.parts.iter().zip(node).map(|(p, &i)| p[i].v()).sum()
    }

    pub fn constant(geom: &Geometry, c: f64) -> Self {
        let mut parts: Vec<Vec<Jet>> = geom
            .factors
            .iter()
            .map(|f| vec![Jet::constant(0.0, 4); f.quad.len()])
            .collect();
        for j in parts[0].iter_mut() {
            *j = Jet::constant(c, 4);
        }
        SepField { parts }
    }

    /// Field from a bump correction on one factor (zero on the others).
    pub fn from_correction(geom: &Geometry, factor: usize, corr: &Correction) -> Self {
        let parts = geom
            .factors
            .iter()
            .enumerate()
            .map(|(a, f)| {
                f.quad
                    .t
                    .iter()
                    .map(|&t| {
                        if a == factor {
                            corr.jet(t, 4)
                        } else {
                            Jet::constant(0.0, 4)
                        }
                    })
                    .collect()
            })
            .collect();
        SepField { parts }
    }
}

impl Geometry {
    pub fn from_spec(spec: &GeometrySpec) -> Result<Geometry> {
        if !(1..=2).contains(&spec.dimension) {
            return Err(Error::Config(format!(
                "dimension must be 1 or 2, got {}",
                spec.dimension
            )));
        }
        if spec.factors.len() != spec.dimension {
            return Err(Error::Config(format!(
                "expected {} factor blocks, got {}",
                spec.dimension,
                spec.factors.len()
            )));
        }
        if spec.nodes < 16 {
            return Err(Error::Config("too few quadrature nodes".into()));
        }
        let mut factors = Vec::with_capacity(spec.factors.len());
        for fspec in &spec.factors {
            if fspec.degrees.is_empty() {
                return Err(Error::Config("factor needs at least one summand".into()));
            }
            if !fspec.weight_bumps.is_empty() && fspec.weight_bumps.len() != fspec.degrees.len() {
                return Err(Error::Config(
                    "weight_bumps must give one list per summand".into(),
                ));
            }
            let quad = Quadrature::logistic(spec.nodes);
            let fs = quad.t.iter().map(|&t| fs_ref(t)).collect();
            factors.push(Factor {
                degrees: fspec.degrees.clone(),
                potential: Correction {
                    bumps: fspec.metric_bumps.clone(),
                },
                weights: fspec
                    .degrees
                    .iter()
                    .enumerate()
                    .map(|(i, _)| Correction {
                        bumps: fspec.weight_bumps.get(i).cloned().unwrap_or_default(),
                    })
                    .collect(),
                quad,
                fs,
            });
        }
        let mut summands = vec![Vec::new()];
        for f in &factors {
            let mut next = Vec::new();
            for combo in &summands {
                for i in 0..f.degrees.len() {
                    let mut c = combo.clone();
                    c.push(i);
                    next.push(c);
                }
            }
            summands = next;
        }
        let r = summands.len();
        let geom = Geometry {
            n: spec.dimension,
            factors,
            summands,
            r,
        };
        geom.check_positivity(&geom.metric_pair())?;
        Ok(geom)
    }

    /// Fubini-Study geometry with the given per-factor degree lists.
    pub fn fs(n: usize, degrees_per_factor: &[Vec<i64>]) -> Geometry {
        Geometry::from_spec(&GeometrySpec::fs(n, degrees_per_factor)).expect("FS geometry")
    }

    /// P^1 with a split bundle.
    pub fn fs_p1(degrees: &[i64]) -> Geometry {
        Geometry::fs(1, &[degrees.to_vec()])
    }

    /// P^1 x P^1 with the line bundle of bidegree (m1, m2).
    pub fn fs_p1xp1(m1: i64, m2: i64) -> Geometry {
        Geometry::fs(2, &[vec![m1], vec![m2]])
    }

    /// Kahler positivity of a metric pair at every node.
    pub fn check_positivity(&self, pair: &MetricPair) -> Result<()> {
        for (a, f) in self.factors.iter().enumerate() {
            for i in 0..f.quad.len() {
                let v = self.phi2_jet(pair, a, i).v();
                if v <= 0.0 {
                    return Err(Error::KahlerPositivity {
                        t: f.quad.t[i],
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Add epsilon times a bump to the potential of `factor`, or to the
    /// weight of one summand of that factor.
    pub fn perturb(
        &self,
        factor: usize,
        epsilon: f64,
        bump: BumpSpec,
        weight_summand: Option<usize>,
    ) -> Result<Geometry> {
        let mut out = self.clone();
        let scaled = BumpSpec {
            amplitude: epsilon * bump.amplitude,
            ..bump
        };
        match weight_summand {
            None => out.factors[factor].potential.bumps.push(scaled),
            Some(i) => out.factors[factor].weights[i].bumps.push(scaled),
        }
        out.check_positivity(&out.metric_pair())?;
        Ok(out)
    }

    /// Same geometry with twice the quadrature nodes (stability checks).
    pub fn refined(&self) -> Geometry {
        let mut out = self.clone();
        for f in out.factors.iter_mut() {
            f.quad = Quadrature::logistic(f.quad.len() * 2);
            f.fs = f.quad.t.iter().map(|&t| fs_ref(t)).collect();
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.factors.iter().map(|f| f.quad.len()).product()
    }

    pub fn node_multi(&self, flat: usize) -> Vec<usize> {
        match self.n {
            1 => vec![flat],
            _ => {
                let len2 = self.factors[1].quad.len();
                vec![flat / len2, flat % len2]
            }
        }
    }

    pub fn node_flat(&self, multi: &[usize]) -> usize {
        match self.n {
            1 => multi[0],
            _ => multi[0] * self.factors[1].quad.len() + multi[1],
        }
    }

    /// t-coordinates of a flat node.
    pub fn node_t(&self, flat: usize) -> Vec<f64> {
        self.node_multi(flat)
            .iter()
            .zip(&self.factors)
            .map(|(&i, f)| f.quad.t[i])
            .collect()
    }

    /// The initial metric pair sampled from the geometry's corrections.
    pub fn metric_pair(&self) -> MetricPair {
        let phi = self
            .factors
            .iter()
            .map(|f| NodeFn {
                fs_scale: 1.0,
                corr: f.quad.t.iter().map(|&t| f.potential.jet(t, 6)).collect(),
            })
            .collect();
        let psi = self
            .summands
            .iter()
            .map(|combo| {
                self.factors
                    .iter()
                    .zip(combo)
                    .map(|(f, &i)| NodeFn {
                        fs_scale: f.degrees[i] as f64,
                        corr: f.quad.t.iter().map(|&t| f.weights[i].jet(t, 6)).collect(),
                    })
                    .collect()
            })
            .collect();
        MetricPair { phi, psi }
    }

    /// Order-4 jet of phi'' at node i of factor a.
    pub fn phi2_jet(&self, pair: &MetricPair, a: usize, i: usize) -> Jet {
        let fs = &self.factors[a].fs[i];
        fs.v.scale(pair.phi[a].fs_scale)
            .add(&pair.phi[a].corr[i].deriv().deriv())
    }

    /// Order-2 jet of the Ricci hat -(log phi'')'' at node i of factor a,
    /// split as -(log w)'' - (log(1 + corr''/w))'' so the FS part is exact.
    pub fn ric_jet(&self, pair: &MetricPair, a: usize, i: usize) -> Jet {
        let fs = &self.factors[a].fs[i];
        let scale = pair.phi[a].fs_scale;
        assert!(scale > 0.0, "potential needs a positive FS part");
        let rho = pair.phi[a].corr[i]
            .deriv()
            .deriv()
            .scale(1.0 / scale)
            .div(&fs.v);
        let corr_term = rho
            .add(&Jet::constant(1.0, 4))
            .ln()
            .deriv()
            .deriv();
        fs.neg_lnv2.sub(&corr_term)
    }

    /// Order-2 jet of psi'' / phi'' (one summand, one factor) at a node.
    pub fn ilf_jet(&self, pair: &MetricPair, summand: usize, a: usize, i: usize) -> Jet {
        let fs = &self.factors[a].fs[i];
        let scale = pair.phi[a].fs_scale;
        let m = pair.psi[summand][a].fs_scale;
        // (m + dpsi''/w) / (scale + dphi''/w), exact at nodes where the
        // corrections vanish
        let qn = pair.psi[summand][a].corr[i].deriv().deriv().div(&fs.v);
        let qd = pair.phi[a].corr[i].deriv().deriv().div(&fs.v);
        qn.add(&Jet::constant(m, 4))
            .div(&qd.add(&Jet::constant(scale, 4)))
    }

    /// Pointwise data of the base metrics at a flat node.
    pub fn point_data(&self, flat: usize) -> PointData {
        self.point_data_with(&self.metric_pair(), flat)
    }

    /// Pointwise data of an arbitrary metric pair at a flat node.
    pub fn point_data_with(&self, pair: &MetricPair, flat: usize) -> PointData {
        let multi = self.node_multi(flat);
        let mut g = Vec::with_capacity(self.n);
        let mut tr_r = Vec::with_capacity(self.n);
        for (a, &i) in multi.iter().enumerate() {
            g.push(self.phi2_jet(pair, a, i).v());
            tr_r.push(self.ric_jet(pair, a, i).v());
        }
        let g_inv: Vec<f64> = g.iter().map(|&v| 1.0 / v).collect();
        let s: f64 = tr_r.iter().zip(&g_inv).map(|(r, gi)| r * gi).sum();
        let norm_tr_r2: f64 = tr_r
            .iter()
            .zip(&g_inv)
            .map(|(r, gi)| (r * gi) * (r * gi))
            .sum();
        // products of curves have factor-diagonal curvature
        let norm_r2 = norm_tr_r2;

        let mut f = Vec::with_capacity(self.r);
        let mut i_lambda_f = Vec::with_capacity(self.r);
        for summand in 0..self.r {
            let mut hats = Vec::with_capacity(self.n);
            let mut ilf = 0.0;
            for (a, &i) in multi.iter().enumerate() {
                let fs = &self.factors[a].fs[i];
                let psi2 = fs
                    .v
                    .scale(pair.psi[summand][a].fs_scale)
                    .add(&pair.psi[summand][a].corr[i].deriv().deriv())
                    .v();
                hats.push(psi2);
                ilf += self.ilf_jet(pair, summand, a, i).v();
            }
            f.push(hats);
            i_lambda_f.push(ilf);
        }
        let i_lambda_tr_f = i_lambda_f.iter().sum();
        PointData {
            g,
            g_inv,
            s,
            tr_r,
            norm_r2,
            norm_tr_r2,
            f,
            i_lambda_f,
            i_lambda_tr_f,
        }
    }

    /// Scalar curvature as a separable field with exact derivatives.
    pub fn scalar_curvature_field(&self, pair: &MetricPair) -> SepField {
        let parts = (0..self.n)
            .map(|a| {
                (0..self.factors[a].quad.len())
                    .map(|i| {
                        let phi2 = self.phi2_jet(pair, a, i).truncate(2);
                        self.ric_jet(pair, a, i).div(&phi2)
                    })
                    .collect()
            })
            .collect();
        SepField { parts }
    }

    /// i Lambda F for one summand as a separable field.
    pub fn ilf_field(&self, pair: &MetricPair, summand: usize) -> SepField {
        let parts = (0..self.n)
            .map(|a| {
                (0..self.factors[a].quad.len())
                    .map(|i| self.ilf_jet(pair, summand, a, i))
                    .collect()
            })
            .collect();
        SepField { parts }
    }

    /// i Lambda tr F as a separable field.
    pub fn ilf_trace_field(&self, pair: &MetricPair) -> SepField {
        let mut acc = self.ilf_field(pair, 0);
        for s in 1..self.r {
            let next = self.ilf_field(pair, s);
            for (a, part) in acc.parts.iter_mut().enumerate() {
                for (i, j) in part.iter_mut().enumerate() {
                    *j = j.add(&next.parts[a][i]);
                }
            }
        }
        acc
    }

    /// Laplacian of a separable field at every flat node, with this crate's
    /// convention Delta = -2 g^{j,kbar} d_j dbar_k.
    pub fn laplacian(&self, pair: &MetricPair, field: &SepField) -> Vec<f64> {
        let phi2: Vec<Vec<f64>> = (0..self.n)
            .map(|a| {
                (0..self.factors[a].quad.len())
                    .map(|i| self.phi2_jet(pair, a, i).v())
                    .collect()
            })
            .collect();
        (0..self.node_count())
            .map(|flat| {
                self.node_multi(flat)
                    .iter()
                    .enumerate()
                    .map(|(a, &i)| -2.0 * field.parts[a][i].dk(2) / phi2[a][i])
                    .sum()
            })
            .collect()
    }

    /// Product of quadrature weights for the flat node.
    pub fn node_weight(&self, flat: usize) -> f64 {
        self.node_multi(flat)
            .iter()
            .zip(&self.factors)
            .map(|(&i, f)| f.quad.wt[i])
            .product()
    }

    /// Integral of a node-sampled function against omega^[n].
    pub fn integrate(&self, pair: &MetricPair, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.node_count());
        let phi2: Vec<Vec<f64>> = (0..self.n)
            .map(|a| {
                (0..self.factors[a].quad.len())
                    .map(|i| self.phi2_jet(pair, a, i).v())
                    .collect()
            })
            .collect();
        let mut acc = 0.0;
        for (flat, &value) in values.iter().enumerate() {
            let multi = self.node_multi(flat);
            let mut density = self.node_weight(flat);
            for (a, &i) in multi.iter().enumerate() {
                density *= phi2[a][i];
            }
            acc += density * value;
        }
        acc * TWO_PI.powi(self.n as i32)
    }

    /// Total volume int omega^[n].
    pub fn volume(&self, pair: &MetricPair) -> f64 {
        self.integrate(pair, &vec![1.0; self.node_count()])
    }

    /// Average scalar curvature.
    pub fn s_hat(&self, pair: &MetricPair) -> f64 {
        let field = self.scalar_curvature_field(pair);
        let values: Vec<f64> = (0..self.node_count())
            .map(|flat| field.value(&self.node_multi(flat)))
            .collect();
        self.integrate(pair, &values) / self.volume(pair)
    }

    /// Slope-type constant: int iLambda tr F / (r Vol).
    pub fn lambda_slope(&self, pair: &MetricPair) -> f64 {
        let field = self.ilf_trace_field(pair);
        let values: Vec<f64> = (0..self.node_count())
            .map(|flat| field.value(&self.node_multi(flat)))
            .collect();
        self.integrate(pair, &values) / (self.r as f64 * self.volume(pair))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn fs_profile_derivatives() {
        let t = 0.7;
        let j = fs_jet(t, 6);
        let s = 1.0 / (1.0 + (-t as f64).exp());
        assert!(close(j.dk(1), s, 1e-12));
        assert!(close(j.dk(2), s * (1.0 - s), 1e-12));
        let h = 1e-5;
        let fd = (fs_jet(t + h, 0).v() - 2.0 * j.v() + fs_jet(t - h, 0).v()) / (h * h);
        assert!(close(j.dk(2), fd, 1e-5));
        // third and fourth in closed form
        let u = 1.0 - 2.0 * s;
        let w = s * (1.0 - s);
        assert!(close(j.dk(3), w * u, 1e-12));
        assert!(close(j.dk(4), w * (u * u - 2.0 * w), 1e-12));
    }

    #[test]
    fn bump_jet_matches_finite_differences() {
        let b = BumpSpec {
            center: 0.3,
            width: 1.4,
            amplitude: 0.2,
        };
        let t = 0.9;
        let j = b.jet(t, 6);
        let h = 1e-4;
        let fd1 = (b.jet(t + h, 0).v() - b.jet(t - h, 0).v()) / (2.0 * h);
        assert!(close(j.dk(1), fd1, 1e-7));
        let fd2 = (b.jet(t + h, 0).v() - 2.0 * j.v() + b.jet(t - h, 0).v()) / (h * h);
        assert!(close(j.dk(2), fd2, 1e-6));
    }

    #[test]
    fn fs_scalar_curvature_is_two() {
        let geom = Geometry::fs_p1(&[0]);
        for flat in (0..geom.node_count()).step_by(17) {
            let pd = geom.point_data(flat);
            assert!(close(pd.s, 2.0, 1e-12), "S = {}", pd.s);
            assert!(close(pd.norm_r2, 4.0, 1e-11));
            assert!(close(pd.norm_tr_r2, 4.0, 1e-11));
        }
    }

    #[test]
    fn fs_product_scalar_curvature_is_four() {
        let geom = Geometry::fs_p1xp1(0, 0);
        let pd = geom.point_data(geom.node_count() / 2);
        assert!(close(pd.s, 4.0, 1e-12), "S = {}", pd.s);
        assert!(close(pd.norm_r2, 8.0, 1e-11));
        assert!(close(pd.norm_tr_r2, 8.0, 1e-11));
        assert!(close(pd.s * pd.s, 16.0, 1e-11));
    }

    #[test]
    fn fs_bundle_curvature_is_degree() {
        let geom = Geometry::fs_p1(&[3]);
        for flat in (0..geom.node_count()).step_by(29) {
            let pd = geom.point_data(flat);
            assert!(close(pd.i_lambda_f[0], 3.0, 1e-12), "{}", pd.i_lambda_f[0]);
        }
    }

    #[test]
    fn volume_is_topological() {
        let geom = Geometry::fs_p1(&[0]);
        let pair = geom.metric_pair();
        assert!(close(geom.volume(&pair), TWO_PI, 1e-10));

        let bump = BumpSpec {
            center: 0.5,
            width: 1.0,
            amplitude: 1.0,
        };
        let pert = geom.perturb(0, 0.08, bump, None).unwrap();
        let ppair = pert.metric_pair();
        assert!(
            close(pert.volume(&ppair), TWO_PI, 1e-9),
            "{}",
            pert.volume(&ppair)
        );

        let geom2 = Geometry::fs_p1xp1(1, 2);
        let pair2 = geom2.metric_pair();
        assert!(close(geom2.volume(&pair2), TWO_PI * TWO_PI, 1e-9));
    }

    #[test]
    fn s_hat_is_topological() {
        let geom = Geometry::fs_p1(&[0]);
        assert!(close(geom.s_hat(&geom.metric_pair()), 2.0, 1e-11));
        let bump = BumpSpec {
            center: -0.4,
            width: 1.2,
            amplitude: 1.0,
        };
        let pert = geom.perturb(0, 0.1, bump, None).unwrap();
        assert!(
            close(pert.s_hat(&pert.metric_pair()), 2.0, 1e-8),
            "{}",
            pert.s_hat(&pert.metric_pair())
        );
        let geom2 = Geometry::fs_p1xp1(0, 0);
        assert!(close(geom2.s_hat(&geom2.metric_pair()), 4.0, 1e-9));
    }

    #[test]
    fn degree_is_topological() {
        let geom = Geometry::fs_p1(&[2, -1]);
        let pair = geom.metric_pair();
        let field = geom.ilf_trace_field(&pair);
        let values: Vec<f64> = (0..geom.node_count())
            .map(|f| field.value(&geom.node_multi(f)))
            .collect();
        let deg = geom.integrate(&pair, &values) / TWO_PI;
        assert!(close(deg, 1.0, 1e-10), "{deg}");

        let bump = BumpSpec {
            center: 0.2,
            width: 0.8,
            amplitude: 1.0,
        };
        let pert = geom.perturb(0, 0.05, bump, Some(0)).unwrap();
        let ppair = pert.metric_pair();
        let field = pert.ilf_trace_field(&ppair);
        let values: Vec<f64> = (0..pert.node_count())
            .map(|f| field.value(&pert.node_multi(f)))
            .collect();
        let deg = pert.integrate(&ppair, &values) / TWO_PI;
        assert!(close(deg, 1.0, 1e-8), "{deg}");
    }

    #[test]
    fn perturb_zero_is_identity() {
        let geom = Geometry::fs_p1(&[1]);
        let bump = BumpSpec {
            center: 0.0,
            width: 1.0,
            amplitude: 1.0,
        };
        let same = geom.perturb(0, 0.0, bump, None).unwrap();
        let a = geom.point_data(37);
        let b = same.point_data(37);
        assert_eq!(a.s, b.s);
        assert_eq!(a.g, b.g);
    }

    #[test]
    fn perturb_positivity_threshold() {
        let geom = Geometry::fs_p1(&[0]);
        let bump = BumpSpec {
            center: 0.0,
            width: 0.7,
            amplitude: -1.0,
        };
        assert!(geom.perturb(0, 0.01, bump, None).is_ok());
        let err = geom.perturb(0, 3.0, bump, None);
        assert!(matches!(err, Err(Error::KahlerPositivity { .. })));
        let (mut lo, mut hi) = (0.01, 3.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if geom.perturb(0, mid, bump, None).is_ok() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(geom.perturb(0, lo, bump, None).is_ok());
        assert!(geom.perturb(0, hi, bump, None).is_err());
        assert!(hi - lo < 1e-10);
    }

    #[test]
    fn laplacian_of_constant_vanishes() {
        let geom = Geometry::fs_p1(&[0]);
        let pair = geom.metric_pair();
        let field = SepField::constant(&geom, 3.5);
        let lap = geom.laplacian(&pair, &field);
        assert!(lap.iter().all(|v| v.abs() < 1e-13));
        // FS scalar curvature is constant, so its Laplacian vanishes too
        let s_field = geom.scalar_curvature_field(&pair);
        let lap_s = geom.laplacian(&pair, &s_field);
        let worst = lap_s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-11, "{worst}");
    }

    #[test]
    fn laplacian_integrates_to_zero() {
        // divergence theorem: int (Delta f) omega = 0 for a localized bump
        let geom = Geometry::fs_p1(&[0]);
        let pair = geom.metric_pair();
        let corr = Correction {
            bumps: vec![BumpSpec {
                center: 0.4,
                width: 0.9,
                amplitude: 1.3,
            }],
        };
        let field = SepField::from_correction(&geom, 0, &corr);
        let lap = geom.laplacian(&pair, &field);
        let integral = geom.integrate(&pair, &lap);
        assert!(integral.abs() < 1e-8, "{integral}");
    }

    #[test]
    fn product_point_data_assembles_from_factors() {
        let g2 = Geometry::fs_p1xp1(1, 2);
        let g1a = Geometry::fs_p1(&[1]);
        let g1b = Geometry::fs_p1(&[2]);
        let flat = 123 * g2.factors[1].quad.len() + 45;
        let pd = g2.point_data(flat);
        let pa = g1a.point_data(123);
        let pb = g1b.point_data(45);
        assert_eq!(pd.g[0], pa.g[0]);
        assert_eq!(pd.g[1], pb.g[0]);
        assert_eq!(pd.s, pa.s + pb.s);
        assert_eq!(pd.i_lambda_f[0], pa.i_lambda_f[0] + pb.i_lambda_f[0]);
    }

    #[test]
    fn consistency_s_equals_ilambda_tr_r() {
        let geom = Geometry::fs_p1(&[0]);
        let bump = BumpSpec {
            center: -0.3,
            width: 1.1,
            amplitude: 1.0,
        };
        let pert = geom.perturb(0, 0.12, bump, None).unwrap();
        let pair = pert.metric_pair();
        for flat in (0..pert.node_count()).step_by(13) {
            let pd = pert.point_data_with(&pair, flat);
            let contraction: f64 = pd.tr_r.iter().zip(&pd.g_inv).map(|(a, b)| a * b).sum();
            assert!(close(pd.s, contraction, 1e-12));
        }
    }

    #[test]
    fn perturbed_scalar_curvature_matches_finite_differences() {
        // S = -[phi4/phi2 - (phi3/phi2)^2]/phi2 against five-point stencils
        // applied to exact potential values
        let geom = Geometry::fs_p1(&[0]);
        let bump = BumpSpec {
            center: 0.6,
            width: 1.3,
            amplitude: 1.0,
        };
        let pert = geom.perturb(0, 0.15, bump, None).unwrap();
        let pair = pert.metric_pair();
        let phi = |t: f64| fs_jet(t, 0).v() + pert.factors[0].potential.jet(t, 0).v();
        let h = 0.02;
        let i = 97;
        let t = pert.factors[0].quad.t[i];
        let f: Vec<f64> = (-3i32..=3).map(|k| phi(t + k as f64 * h)).collect();
        let phi2 = (-f[1] + 16.0 * f[2] - 30.0 * f[3] + 16.0 * f[4] - f[5]) / (12.0 * h * h);
        let phi3 = (f[0] - 8.0 * f[1] + 13.0 * f[2] - 13.0 * f[4] + 8.0 * f[5] - f[6])
            / (8.0 * h * h * h);
        let phi4 = (-f[0] + 12.0 * f[1] - 39.0 * f[2] + 56.0 * f[3] - 39.0 * f[4] + 12.0 * f[5]
            - f[6])
            / (6.0 * h * h * h * h);
        let s_fd = -(phi4 / phi2 - (phi3 / phi2) * (phi3 / phi2)) / phi2;
        let pd = pert.point_data_with(&pair, i);
        assert!(close(pd.s, s_fd, 1e-4), "{} vs {}", pd.s, s_fd);
    }

    #[test]
    fn spec_round_trip_rejects_unknown_keys() {
        let json = r#"{"dimension":1,"factors":[{"degrees":[0]}],"nodes":64}"#;
        let spec: GeometrySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.nodes, 64);
        let bad = r#"{"dimension":1,"factors":[{"degrees":[0]}],"unknown":1}"#;
        assert!(serde_json::from_str::<GeometrySpec>(bad).is_err());
    }
}
