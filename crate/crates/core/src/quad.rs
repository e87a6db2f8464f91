//! Gauss-Legendre quadrature on (0,1) and the logistic substitution used for
//! integrals over the real t-line.
//!
//! All t-integrals in the circle-invariant reduction are pushed to (0,1) via
//! s = e^t/(1+e^t); Gauss-Legendre there integrates the Fubini-Study section
//! integrands exactly (they become Beta-type polynomials in s).

/// Nodes and weights on t = log(s/(1-s)), s in (0,1).
#[derive(Clone, Debug)]
pub struct Quadrature {
    /// s-nodes in (0,1).
    pub s: Vec<f64>,
    /// t-nodes, t = log(s/(1-s)).
    pub t: Vec<f64>,
    /// weights for integration in dt: sum wt[i] f(t[i]) ~ int f dt.
    pub wt: Vec<f64>,
}

impl Quadrature {
    /// Gauss-Legendre rule with `n` nodes, mapped to the t-line.
    pub fn logistic(n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        let mut s = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut wt = Vec::with_capacity(n);
        for i in 0..n {
            // map [-1,1] -> (0,1)
            let si = 0.5 * (x[i] + 1.0);
            let wi = 0.5 * w[i];
            s.push(si);
            t.push((si / (1.0 - si)).ln());
            // dt = ds / (s(1-s))
            wt.push(wi / (si * (1.0 - si)));
        }
        Quadrature { s, t, wt }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            // Legendre polynomial P_n(z) and derivative by recurrence
            let mut p0 = 1.0;
            let mut p1 = z;
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * z * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            pp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * pp * pp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        // degree up to 2*8-1 = 15 exact
        for d in 0..=15u32 {
            let got: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(d as i32)).sum();
            let expect = if d % 2 == 1 { 0.0 } else { 2.0 / (d as f64 + 1.0) };
            assert!((got - expect).abs() < 1e-14, "degree {d}: {got} vs {expect}");
        }
    }

    #[test]
    fn logistic_rule_integrates_fs_volume() {
        // int phi'' dt with phi = log(1+e^t) equals 1
        let q = Quadrature::logistic(200);
        let total: f64 = q
            .s
            .iter()
            .zip(&q.wt)
            .map(|(s, w)| w * s * (1.0 - s))
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn logistic_beta_integral() {
        // int e^{2t} (1+e^t)^{-5} dt = B(2, 3) = 1!2!/4! = 1/12
        let q = Quadrature::logistic(200);
        let got: f64 = q
            .t
            .iter()
            .zip(&q.wt)
            .map(|(t, w)| w * (2.0 * t - 5.0 * (1.0 + t.exp()).ln()).exp())
            .sum();
        assert!((got - 1.0 / 12.0).abs() < 1e-13, "{got}");
    }
}
