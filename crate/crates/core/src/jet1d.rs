//! Univariate derivative jets: a value together with its first `ord`
//! t-derivatives at a point. Circle-invariant geometry reduces every metric
//! quantity to one-variable calculus in t = log|z|^2, so carrying exact
//! derivatives through products, quotients and logs gives exact Laplacians
//! without numerical differentiation.

/// Maximum number of stored slots (value + 6 derivatives).
pub const SLOTS: usize = 7;

/// Binomial coefficients up to 6 choose 6 for the Leibniz rule.
const BINOM: [[f64; SLOTS]; SLOTS] = {
    let mut b = [[0.0; SLOTS]; SLOTS];
    let mut i = 0;
    while i < SLOTS {
        b[i][0] = 1.0;
        let mut j = 1;
        while j <= i {
            b[i][j] = b[i - 1][j - 1] + if j <= i - 1 { b[i - 1][j] } else { 0.0 };
            j += 1;
        }
        i += 1;
    }
    b
};

/// Value and derivatives d[0..=ord] of a smooth function at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    d: [f64; SLOTS],
    ord: usize,
}

impl Jet {
    pub fn new(derivs: &[f64]) -> Self {
        assert!(!derivs.is_empty() && derivs.len() <= SLOTS);
        let mut d = [0.0; SLOTS];
        d[..derivs.len()].copy_from_slice(derivs);
        Jet {
            d,
            ord: derivs.len() - 1,
        }
    }

    pub fn constant(v: f64, ord: usize) -> Self {
        let mut d = [0.0; SLOTS];
        d[0] = v;
        Jet { d, ord }
    }

    pub fn ord(&self) -> usize {
        self.ord
    }

    /// Function value.
    pub fn v(&self) -> f64 {
        self.d[0]
    }

    /// k-th derivative; panics if the jet does not carry it.
    pub fn dk(&self, k: usize) -> f64 {
        assert!(k <= self.ord, "jet order {} has no derivative {}", self.ord, k);
        self.d[k]
    }

    /// Jet of the derivative (one order lower).
    pub fn deriv(&self) -> Jet {
        assert!(self.ord >= 1);
        let mut d = [0.0; SLOTS];
        for i in 0..self.ord {
            d[i] = self.d[i + 1];
        }
        Jet { d, ord: self.ord - 1 }
    }

    pub fn truncate(&self, ord: usize) -> Jet {
        assert!(ord <= self.ord);
        let mut d = [0.0; SLOTS];
        d[..=ord].copy_from_slice(&self.d[..=ord]);
        Jet { d, ord }
    }

    pub fn add(&self, o: &Jet) -> Jet {
        let ord = self.ord.min(o.ord);
        let mut d = [0.0; SLOTS];
        for i in 0..=ord {
            d[i] = self.d[i] + o.d[i];
        }
        Jet { d, ord }
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        let ord = self.ord.min(o.ord);
        let mut d = [0.0; SLOTS];
        for i in 0..=ord {
            d[i] = self.d[i] - o.d[i];
        }
        Jet { d, ord }
    }

    pub fn scale(&self, c: f64) -> Jet {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= c;
        }
        Jet { d, ord: self.ord }
    }

    /// Leibniz product.
    pub fn mul(&self, o: &Jet) -> Jet {
        let ord = self.ord.min(o.ord);
        let mut d = [0.0; SLOTS];
        for k in 0..=ord {
            let mut acc = 0.0;
            for i in 0..=k {
                acc += BINOM[k][i] * self.d[i] * o.d[k - i];
            }
            d[k] = acc;
        }
        Jet { d, ord }
    }

    /// Reciprocal 1/f; requires f(t) != 0.
    pub fn recip(&self) -> Jet {
        assert!(self.d[0] != 0.0, "reciprocal of vanishing jet");
        let ord = self.ord;
        let mut d = [0.0; SLOTS];
        d[0] = 1.0 / self.d[0];
        // (f * g)^(k) = 0 for k >= 1 solves g^(k) recursively.
        for k in 1..=ord {
            let mut acc = 0.0;
            for i in 1..=k {
                acc += BINOM[k][i] * self.d[i] * d[k - i];
            }
            d[k] = -acc / self.d[0];
        }
        Jet { d, ord }
    }

    pub fn div(&self, o: &Jet) -> Jet {
        self.mul(&o.recip())
    }

    /// Natural log; requires positive value.
    pub fn ln(&self) -> Jet {
        assert!(self.d[0] > 0.0, "log of non-positive jet value {}", self.d[0]);
        let ord = self.ord;
        let mut d = [0.0; SLOTS];
        d[0] = self.d[0].ln();
        if ord >= 1 {
            // (ln f)' = f'/f, then differentiate the quotient jet.
            let q = self.deriv().div(&self.truncate(ord - 1));
            for k in 1..=ord {
                d[k] = q.dk(k - 1);
            }
        }
        Jet { d, ord }
    }

    /// Exponential.
    pub fn exp(&self) -> Jet {
        let ord = self.ord;
        let mut d = [0.0; SLOTS];
        d[0] = self.d[0].exp();
        // (e^f)^(k) = sum binom(k-1, i) f^(k-i) (e^f)^(i)
        for k in 1..=ord {
            let mut acc = 0.0;
            for i in 0..k {
                acc += BINOM[k - 1][i] * d[i] * self.d[k - i];
            }
            d[k] = acc;
        }
        Jet { d, ord }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())), "{a} vs {b}");
    }

    /// Jet of sin(t) at t.
    fn sin_jet(t: f64, ord: usize) -> Jet {
        let mut d = [0.0; SLOTS];
        for (k, slot) in d.iter_mut().enumerate().take(ord + 1) {
            *slot = match k % 4 {
                0 => t.sin(),
                1 => t.cos(),
                2 => -t.sin(),
                _ => -t.cos(),
            };
        }
        Jet { d, ord }
    }

    #[test]
    fn product_matches_double_angle() {
        // sin^2 = (1 - cos 2t)/2 has derivatives we can check in closed form.
        let t = 0.37;
        let s = sin_jet(t, 6);
        let p = s.mul(&s);
        for k in 0..=6 {
            let expect = match k {
                0 => (1.0 - (2.0 * t).cos()) / 2.0,
                _ => {
                    let phase = match (k - 1) % 4 {
                        0 => (2.0 * t).sin(),
                        1 => (2.0 * t).cos(),
                        2 => -(2.0 * t).sin(),
                        _ => -(2.0 * t).cos(),
                    };
                    2.0_f64.powi(k as i32 - 1) * phase
                }
            };
            assert_close(p.dk(k), expect, 1e-12);
        }
    }

    #[test]
    fn ln_exp_round_trip() {
        let t = 0.81;
        let f = sin_jet(t, 6).add(&Jet::constant(2.0, 6));
        let g = f.ln().exp();
        for k in 0..=6 {
            assert_close(g.dk(k), f.dk(k), 1e-12);
        }
    }

    #[test]
    fn recip_multiplies_back_to_one() {
        let f = Jet::new(&[1.5, -0.3, 0.7, 0.2, -0.1, 0.05, 1.0]);
        let p = f.mul(&f.recip());
        assert_close(p.v(), 1.0, 1e-14);
        for k in 1..=6 {
            assert_close(p.dk(k), 0.0, 1e-12);
        }
    }

    #[test]
    fn order_tracking() {
        let f = Jet::new(&[2.0, 1.0, 0.5]);
        assert_eq!(f.ord(), 2);
        assert_eq!(f.deriv().ord(), 1);
        assert_eq!(f.mul(&Jet::constant(1.0, 6)).ord(), 2);
    }
}
