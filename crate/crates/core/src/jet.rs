//! Truncated multivariate power series with complex coefficients, and the
//! matrix-valued extension. Total degree above the cap is discarded; within
//! the cap all arithmetic is exact.
//!
//! Series over the same (num_vars, cap) signature share a cached monomial
//! table that pins the graded ordering, the truncated multiplication pairs
//! and the per-variable derivative maps, so the hot operations are flat
//! array loops.

use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;

use crate::error::Error;
use crate::{Result, C64};

/// Monomial table for a fixed (num_vars, degree_cap) signature.
#[derive(Debug)]
pub struct VarTable {
    pub num_vars: usize,
    pub cap: usize,
    /// rank -> exponent vector, graded lexicographic order.
    exps: Vec<Vec<u8>>,
    /// rank -> total degree.
    deg: Vec<u8>,
    /// number of monomials of total degree <= d, for d in 0..=cap.
    prefix: Vec<usize>,
    /// packed exponent key -> rank.
    index: HashMap<u64, usize>,
    /// flat truncated product map: for rank i the slice
    /// prod[off[i]..off[i]+prefix[cap-deg[i]]] holds rank(exps[i]+exps[j]).
    prod: Vec<u32>,
    prod_off: Vec<usize>,
    /// per variable v, rank i with e_v > 0: (rank of e - e_v, e_v as f64).
    dvar: Vec<Vec<Option<(usize, f64)>>>,
}

fn pack(exp: &[u8]) -> u64 {
    let mut key = 0u64;
    for (i, &e) in exp.iter().enumerate() {
        key |= (e as u64) << (4 * i);
    }
    key
}

fn enumerate_exponents(num_vars: usize, cap: usize) -> Vec<Vec<u8>> {
    let mut all = Vec::new();
    let mut cur = vec![0u8; num_vars];
    fn rec(all: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, var: usize, left: usize) {
        if var == cur.len() {
            all.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[var] = e as u8;
            rec(all, cur, var + 1, left - e);
        }
        cur[var] = 0;
    }
    rec(&mut all, &mut cur, 0, cap);
    all.sort_by_key(|e| {
        let d: u32 = e.iter().map(|&x| x as u32).sum();
        (d, e.clone())
    });
    all
}

impl VarTable {
    fn build(num_vars: usize, cap: usize) -> Self {
        assert!(num_vars >= 1 && num_vars <= 12, "unsupported variable count");
        assert!(cap >= 1 && cap <= 15, "unsupported degree cap");
        let exps = enumerate_exponents(num_vars, cap);
        let deg: Vec<u8> = exps
            .iter()
            .map(|e| e.iter().map(|&x| x as u32).sum::<u32>() as u8)
            .collect();
        let mut prefix = vec![0usize; cap + 1];
        for &d in &deg {
            prefix[d as usize] += 1;
        }
        for d in 1..=cap {
            prefix[d] += prefix[d - 1];
        }
        let index: HashMap<u64, usize> = exps.iter().enumerate().map(|(i, e)| (pack(e), i)).collect();

        let mut prod = Vec::new();
        let mut prod_off = Vec::with_capacity(exps.len());
        let mut sum = vec![0u8; num_vars];
        for (i, ei) in exps.iter().enumerate() {
            prod_off.push(prod.len());
            let room = cap - deg[i] as usize;
            for ej in exps.iter().take(prefix[room]) {
                for v in 0..num_vars {
                    sum[v] = ei[v] + ej[v];
                }
                prod.push(index[&pack(&sum)] as u32);
            }
        }

        let mut dvar = vec![vec![None; exps.len()]; num_vars];
        for (i, e) in exps.iter().enumerate() {
            for v in 0..num_vars {
                if e[v] > 0 {
                    let mut lower = e.clone();
                    lower[v] -= 1;
                    dvar[v][i] = Some((index[&pack(&lower)], e[v] as f64));
                }
            }
        }

        VarTable {
            num_vars,
            cap,
            exps,
            deg,
            prefix,
            index,
            prod,
            prod_off,
            dvar,
        }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn exponents(&self, rank: usize) -> &[u8] {
        &self.exps[rank]
    }

    pub fn degree_of(&self, rank: usize) -> usize {
        self.deg[rank] as usize
    }

    pub fn rank_of(&self, exp: &[u8]) -> Option<usize> {
        if exp.len() != self.num_vars {
            return None;
        }
        self.index.get(&pack(exp)).copied()
    }

    /// Rank of the product monomial, if within cap.
    pub fn rank_sum(&self, i: usize, j: usize) -> Option<usize> {
        let room = self.cap - self.deg[i] as usize;
        if (self.deg[j] as usize) <= room {
            let jj = if j < self.prefix[room] { j } else { return None };
            Some(self.prod[self.prod_off[i] + jj] as usize)
        } else {
            None
        }
    }
}

static TABLES: Lazy<Mutex<HashMap<(usize, usize), Arc<VarTable>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Shared monomial table for the signature.
pub fn table(num_vars: usize, cap: usize) -> Arc<VarTable> {
    let mut cache = TABLES.lock().unwrap();
    cache
        .entry((num_vars, cap))
        .or_insert_with(|| Arc::new(VarTable::build(num_vars, cap)))
        .clone()
}

/// Truncated multivariate power series with complex coefficients.
#[derive(Clone)]
pub struct MultiSeries {
    table: Arc<VarTable>,
    coeffs: Vec<C64>,
}

impl std::fmt::Debug for MultiSeries {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MultiSeries[{} vars, cap {}](", self.num_vars(), self.cap())?;
        let mut first = true;
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.norm_sqr() > 0.0 {
                if !first {
                    write!(f, " + ")?;
                }
                write!(f, "({c:?})*{:?}", self.table.exps[i])?;
                first = false;
            }
        }
        write!(f, ")")
    }
}

impl MultiSeries {
    pub fn zero(num_vars: usize, cap: usize) -> Self {
        let table = table(num_vars, cap);
        let n = table.len();
        MultiSeries {
            table,
            coeffs: vec![C64::new(0.0, 0.0); n],
        }
    }

    pub fn constant(num_vars: usize, cap: usize, c: C64) -> Self {
        let mut s = Self::zero(num_vars, cap);
        s.coeffs[0] = c;
        s
    }

    pub fn one(num_vars: usize, cap: usize) -> Self {
        Self::constant(num_vars, cap, C64::new(1.0, 0.0))
    }

    /// The coordinate series x_v.
    pub fn var(num_vars: usize, cap: usize, v: usize) -> Self {
        let mut s = Self::zero(num_vars, cap);
        let mut e = vec![0u8; num_vars];
        e[v] = 1;
        let rank = s.table.rank_of(&e).expect("cap >= 1");
        s.coeffs[rank] = C64::new(1.0, 0.0);
        s
    }

    pub fn num_vars(&self) -> usize {
        self.table.num_vars
    }

    pub fn cap(&self) -> usize {
        self.table.cap
    }

    pub fn table(&self) -> &Arc<VarTable> {
        &self.table
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeff(&self, exp: &[u8]) -> C64 {
        match self.table.rank_of(exp) {
            Some(r) => self.coeffs[r],
            None => C64::new(0.0, 0.0),
        }
    }

    pub fn coeff_rank(&self, rank: usize) -> C64 {
        self.coeffs[rank]
    }

    pub fn set_coeff(&mut self, exp: &[u8], c: C64) {
        let r = self
            .table
            .rank_of(exp)
            .expect("exponent outside degree cap");
        self.coeffs[r] = c;
    }

    pub fn add_coeff_rank(&mut self, rank: usize, c: C64) {
        self.coeffs[rank] += c;
    }

    pub fn constant_term(&self) -> C64 {
        self.coeffs[0]
    }

    fn check_same_shape(&self, o: &MultiSeries) -> Result<()> {
        if self.num_vars() != o.num_vars() || self.cap() != o.cap() {
            return Err(Error::Shape(format!(
                "series over {} vars cap {} vs {} vars cap {}",
                self.num_vars(),
                self.cap(),
                o.num_vars(),
                o.cap()
            )));
        }
        Ok(())
    }

    pub fn try_add(&self, o: &MultiSeries) -> Result<MultiSeries> {
        self.check_same_shape(o)?;
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&o.coeffs) {
            *a += b;
        }
        Ok(out)
    }

    pub fn try_sub(&self, o: &MultiSeries) -> Result<MultiSeries> {
        self.check_same_shape(o)?;
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&o.coeffs) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, c: C64) -> MultiSeries {
        let mut out = self.clone();
        for a in out.coeffs.iter_mut() {
            *a *= c;
        }
        out
    }

    pub fn scale_re(&self, c: f64) -> MultiSeries {
        self.scale(C64::new(c, 0.0))
    }

    /// Truncated product.
    pub fn try_mul(&self, o: &MultiSeries) -> Result<MultiSeries> {
        self.check_same_shape(o)?;
        let t = &self.table;
        let mut out = MultiSeries::zero(self.num_vars(), self.cap());
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            let room = t.cap - t.deg[i] as usize;
            let jmax = t.prefix[room];
            let offs = &t.prod[t.prod_off[i]..t.prod_off[i] + jmax];
            for (j, &target) in offs.iter().enumerate() {
                let b = o.coeffs[j];
                if b.re == 0.0 && b.im == 0.0 {
                    continue;
                }
                out.coeffs[target as usize] += a * b;
            }
        }
        Ok(out)
    }

    /// out += c * x^mono * s, where mono is given by rank.
    pub fn mono_mul_add(&mut self, mono_rank: usize, c: C64, s: &MultiSeries) {
        let t = self.table.clone();
        let room = t.cap - t.deg[mono_rank] as usize;
        let jmax = t.prefix[room];
        let offs = &t.prod[t.prod_off[mono_rank]..t.prod_off[mono_rank] + jmax];
        for (j, &target) in offs.iter().enumerate() {
            let b = s.coeffs[j];
            if b.re == 0.0 && b.im == 0.0 {
                continue;
            }
            self.coeffs[target as usize] += c * b;
        }
    }

    /// Partial derivative with respect to variable v.
    pub fn deriv(&self, v: usize) -> MultiSeries {
        assert!(v < self.num_vars());
        let t = &self.table;
        let mut out = MultiSeries::zero(self.num_vars(), self.cap());
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            if let Some((lower, factor)) = t.dvar[v][i] {
                out.coeffs[lower] += a * factor;
            }
        }
        out
    }

    /// Reciprocal of a series with non-vanishing constant term (graded
    /// Newton iteration).
    pub fn recip(&self) -> Result<MultiSeries> {
        let c0 = self.constant_term();
        if c0.norm() < 1e-300 {
            return Err(Error::SingularSeries);
        }
        let one = MultiSeries::one(self.num_vars(), self.cap());
        let mut r = MultiSeries::constant(self.num_vars(), self.cap(), C64::new(1.0, 0.0) / c0);
        // error degree doubles each step
        let mut good = 1usize;
        while good <= self.cap() {
            let fr = self.try_mul(&r)?;
            let corr = one.try_sub(&fr)?;
            let two_minus = r.try_mul(&corr)?;
            r = r.try_add(&two_minus)?;
            good *= 2;
        }
        Ok(r)
    }

    /// Substitute series for a subset of variables; remaining variables map
    /// into the target space by `keep_map[v] = Some(target_var)`.
    ///
    /// Every substituted series must share the target signature and have zero
    /// constant term so composition is degree-graded. A shared [`SubstMemo`]
    /// caches the monomial products of the substituted block across calls.
    pub fn subst(
        &self,
        keep_map: &[Option<usize>],
        values: &[Option<MultiSeries>],
        memo: &mut SubstMemo,
    ) -> Result<MultiSeries> {
        assert_eq!(keep_map.len(), self.num_vars());
        assert_eq!(values.len(), self.num_vars());
        let target = memo.target.clone();
        for (v, value) in values.iter().enumerate() {
            match value {
                Some(s) => {
                    if s.num_vars() != target.num_vars || s.cap() != target.cap {
                        return Err(Error::Shape("substituted series signature mismatch".into()));
                    }
                    let c0 = s.constant_term().norm();
                    if c0 > 1e-13 {
                        return Err(Error::Composition(c0));
                    }
                }
                None => {
                    if keep_map[v].is_none() {
                        return Err(Error::Shape(format!(
                            "variable {v} neither kept nor substituted"
                        )));
                    }
                }
            }
        }

        let mut out = MultiSeries {
            table: target.clone(),
            coeffs: vec![C64::new(0.0, 0.0); target.len()],
        };
        let mut kept = vec![0u8; target.num_vars];
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            let e = self.table.exponents(i);
            // split into kept monomial and substituted part
            kept.iter_mut().for_each(|x| *x = 0);
            let mut skey = 0u64;
            let mut sdeg = 0usize;
            let mut ok = true;
            for v in 0..self.num_vars() {
                if e[v] == 0 {
                    continue;
                }
                match (keep_map[v], &values[v]) {
                    (Some(tv), None) => kept[tv] += e[v],
                    (None, Some(_)) | (Some(_), Some(_)) => {
                        // substituted (substitution wins if both given)
                        skey |= (e[v] as u64) << (4 * v);
                        sdeg += e[v] as usize;
                    }
                    (None, None) => {
                        ok = false;
                    }
                }
            }
            if !ok {
                return Err(Error::Shape("unmapped variable in substitution".into()));
            }
            let kdeg: usize = kept.iter().map(|&x| x as usize).sum();
            if kdeg + sdeg > target.cap {
                // the substituted block has min-degree >= sdeg, so nothing survives
                continue;
            }
            let krank = target
                .rank_of(&kept)
                .ok_or_else(|| Error::Shape("kept monomial exceeds target cap".into()))?;
            if sdeg == 0 {
                out.coeffs[krank] += c;
                continue;
            }
            let sval = memo.value(skey, values)?;
            out.mono_mul_add(krank, c, &sval);
        }
        Ok(out)
    }

    /// Full composition: substitute `subst[v]` for every variable.
    pub fn compose(&self, subst: &[MultiSeries]) -> Result<MultiSeries> {
        if subst.len() != self.num_vars() {
            return Err(Error::Shape(format!(
                "composition needs {} series, got {}",
                self.num_vars(),
                subst.len()
            )));
        }
        let target = subst[0].table.clone();
        let mut memo = SubstMemo::new(target);
        let keep: Vec<Option<usize>> = vec![None; self.num_vars()];
        let values: Vec<Option<MultiSeries>> = subst.iter().cloned().map(Some).collect();
        self.subst(&keep, &values, &mut memo)
    }

    /// Re-map variables into a (possibly different) signature. Several source
    /// variables may map to the same target variable (exponents add), which
    /// is how diagonal restrictions like y := x are taken.
    pub fn map_vars(&self, target_vars: usize, target_cap: usize, var_map: &[usize]) -> MultiSeries {
        assert_eq!(var_map.len(), self.num_vars());
        let target = table(target_vars, target_cap);
        let mut out = MultiSeries {
            table: target.clone(),
            coeffs: vec![C64::new(0.0, 0.0); target.len()],
        };
        let mut e2 = vec![0u8; target_vars];
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            let e = self.table.exponents(i);
            e2.iter_mut().for_each(|x| *x = 0);
            for v in 0..self.num_vars() {
                e2[var_map[v]] += e[v];
            }
            match target.rank_of(&e2) {
                Some(r) => out.coeffs[r] += c,
                None => panic!("mapped monomial exceeds target cap"),
            }
        }
        out
    }

    /// Evaluate at a point (for oracles and tests).
    pub fn eval(&self, point: &[C64]) -> C64 {
        assert_eq!(point.len(), self.num_vars());
        let mut acc = C64::new(0.0, 0.0);
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            let mut term = c;
            for (v, &e) in self.table.exponents(i).iter().enumerate() {
                for _ in 0..e {
                    term *= point[v];
                }
            }
            acc += term;
        }
        acc
    }

    /// Largest coefficient magnitude.
    pub fn max_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient magnitude among terms of total degree <= d.
    pub fn max_norm_through_degree(&self, d: usize) -> f64 {
        let lim = self.table.prefix[d.min(self.cap())];
        self.coeffs[..lim].iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

impl Add for &MultiSeries {
    type Output = MultiSeries;
    fn add(self, o: &MultiSeries) -> MultiSeries {
        self.try_add(o).expect("shape mismatch in +")
    }
}

impl Sub for &MultiSeries {
    type Output = MultiSeries;
    fn sub(self, o: &MultiSeries) -> MultiSeries {
        self.try_sub(o).expect("shape mismatch in -")
    }
}

impl Mul for &MultiSeries {
    type Output = MultiSeries;
    fn mul(self, o: &MultiSeries) -> MultiSeries {
        self.try_mul(o).expect("shape mismatch in *")
    }
}

impl Neg for &MultiSeries {
    type Output = MultiSeries;
    fn neg(self) -> MultiSeries {
        self.scale(C64::new(-1.0, 0.0))
    }
}

/// Memoized powers of a substituted block, keyed by the packed exponents of
/// the substituted variables. Shared across all entries of a matrix series
/// being pushed through the same substitution.
pub struct SubstMemo {
    target: Arc<VarTable>,
    cache: HashMap<u64, MultiSeries>,
}

impl SubstMemo {
    pub fn new(target: Arc<VarTable>) -> Self {
        SubstMemo {
            target,
            cache: HashMap::new(),
        }
    }

    pub fn for_signature(num_vars: usize, cap: usize) -> Self {
        Self::new(table(num_vars, cap))
    }

    fn value(&mut self, skey: u64, values: &[Option<MultiSeries>]) -> Result<MultiSeries> {
        if let Some(v) = self.cache.get(&skey) {
            return Ok(v.clone());
        }
        // peel one variable off the key
        let mut v = 0;
        while (skey >> (4 * v)) & 0xf == 0 {
            v += 1;
        }
        let lower = skey - (1u64 << (4 * v));
        let base = values[v].as_ref().expect("value for substituted var");
        let result = if lower == 0 {
            base.clone()
        } else {
            let rest = self.value(lower, values)?;
            rest.try_mul(base)?
        };
        self.cache.insert(skey, result.clone());
        Ok(result)
    }
}

/// Matrix with [`MultiSeries`] entries (row-major).
#[derive(Clone, Debug)]
pub struct MatrixSeries {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<MultiSeries>,
}

impl MatrixSeries {
    pub fn from_entries(rows: usize, cols: usize, entries: Vec<MultiSeries>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Shape("matrix entry count".into()));
        }
        let (nv, cap) = (entries[0].num_vars(), entries[0].cap());
        if entries.iter().any(|e| e.num_vars() != nv || e.cap() != cap) {
            return Err(Error::Shape("matrix entries over mixed signatures".into()));
        }
        Ok(MatrixSeries { rows, cols, entries })
    }

    pub fn zero(rows: usize, cols: usize, num_vars: usize, cap: usize) -> Self {
        MatrixSeries {
            rows,
            cols,
            entries: vec![MultiSeries::zero(num_vars, cap); rows * cols],
        }
    }

    pub fn identity(n: usize, num_vars: usize, cap: usize) -> Self {
        let mut m = Self::zero(n, n, num_vars, cap);
        for i in 0..n {
            *m.at_mut(i, i) = MultiSeries::one(num_vars, cap);
        }
        m
    }

    pub fn num_vars(&self) -> usize {
        self.entries[0].num_vars()
    }

    pub fn cap(&self) -> usize {
        self.entries[0].cap()
    }

    pub fn at(&self, i: usize, j: usize) -> &MultiSeries {
        &self.entries[i * self.cols + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut MultiSeries {
        &mut self.entries[i * self.cols + j]
    }

    pub fn add(&self, o: &MatrixSeries) -> Result<MatrixSeries> {
        if self.rows != o.rows || self.cols != o.cols {
            return Err(Error::Shape("matrix add".into()));
        }
        let entries = self
            .entries
            .iter()
            .zip(&o.entries)
            .map(|(a, b)| a.try_add(b))
            .collect::<Result<Vec<_>>>()?;
        MatrixSeries::from_entries(self.rows, self.cols, entries)
    }

    pub fn sub(&self, o: &MatrixSeries) -> Result<MatrixSeries> {
        if self.rows != o.rows || self.cols != o.cols {
            return Err(Error::Shape("matrix sub".into()));
        }
        let entries = self
            .entries
            .iter()
            .zip(&o.entries)
            .map(|(a, b)| a.try_sub(b))
            .collect::<Result<Vec<_>>>()?;
        MatrixSeries::from_entries(self.rows, self.cols, entries)
    }

    pub fn scale(&self, c: C64) -> MatrixSeries {
        MatrixSeries {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| e.scale(c)).collect(),
        }
    }

    pub fn matmul(&self, o: &MatrixSeries) -> Result<MatrixSeries> {
        if self.cols != o.rows {
            return Err(Error::Shape("matrix product dims".into()));
        }
        let mut out = MatrixSeries::zero(self.rows, o.cols, self.num_vars(), self.cap());
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a.max_norm() == 0.0 {
                    continue;
                }
                for j in 0..o.cols {
                    let prod = a.try_mul(o.at(k, j))?;
                    *out.at_mut(i, j) = out.at(i, j).try_add(&prod)?;
                }
            }
        }
        Ok(out)
    }

    pub fn deriv(&self, v: usize) -> MatrixSeries {
        MatrixSeries {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| e.deriv(v)).collect(),
        }
    }

    pub fn trace(&self) -> Result<MultiSeries> {
        if self.rows != self.cols {
            return Err(Error::Shape("trace of non-square matrix".into()));
        }
        let mut t = MultiSeries::zero(self.num_vars(), self.cap());
        for i in 0..self.rows {
            t = t.try_add(self.at(i, i))?;
        }
        Ok(t)
    }

    /// Constant-term matrix.
    pub fn constant_matrix(&self) -> Vec<C64> {
        self.entries.iter().map(|e| e.constant_term()).collect()
    }

    /// Graded (Neumann) inverse: requires the constant-term matrix to be
    /// invertible. M = M0 (I + N) with N of positive valuation, so
    /// M^-1 = (sum (-N)^j) M0^-1 with j up to the cap.
    pub fn inverse(&self) -> Result<MatrixSeries> {
        if self.rows != self.cols {
            return Err(Error::Shape("inverse of non-square matrix".into()));
        }
        let n = self.rows;
        let (nv, cap) = (self.num_vars(), self.cap());
        // invert the constant matrix with nalgebra
        let m0 = nalgebra::DMatrix::from_fn(n, n, |i, j| self.at(i, j).constant_term());
        let m0_inv = m0.clone().try_inverse().ok_or(Error::SingularSeries)?;
        // check conditioning loosely: reject near-singular constant terms
        if !m0_inv.iter().all(|c| c.is_finite()) {
            return Err(Error::SingularSeries);
        }
        let m0_inv_series = MatrixSeries::from_entries(
            n,
            n,
            m0_inv
                .row_iter()
                .flat_map(|r| {
                    r.iter()
                        .map(|c| MultiSeries::constant(nv, cap, *c))
                        .collect::<Vec<_>>()
                })
                .collect(),
        )?;
        // N = M0^-1 M - I
        let nmat = m0_inv_series.matmul(self)?.sub(&MatrixSeries::identity(n, nv, cap))?;
        let mut acc = MatrixSeries::identity(n, nv, cap);
        let mut power = MatrixSeries::identity(n, nv, cap);
        for _ in 0..cap {
            power = power.matmul(&nmat)?.scale(C64::new(-1.0, 0.0));
            acc = acc.add(&power)?;
        }
        acc.matmul(&m0_inv_series)
    }

    /// Determinant by cofactor expansion (sizes up to 3 suffice for the
    /// geometries in play).
    pub fn det(&self) -> Result<MultiSeries> {
        if self.rows != self.cols {
            return Err(Error::Shape("determinant of non-square matrix".into()));
        }
        match self.rows {
            1 => Ok(self.at(0, 0).clone()),
            2 => {
                let ad = self.at(0, 0).try_mul(self.at(1, 1))?;
                let bc = self.at(0, 1).try_mul(self.at(1, 0))?;
                ad.try_sub(&bc)
            }
            3 => {
                let mut acc = MultiSeries::zero(self.num_vars(), self.cap());
                for (j, sign) in [(0usize, 1.0), (1, -1.0), (2, 1.0)] {
                    let minor = self.minor(0, j)?.det()?;
                    let term = self.at(0, j).try_mul(&minor)?.scale_re(sign);
                    acc = acc.try_add(&term)?;
                }
                Ok(acc)
            }
            _ => Err(Error::Unsupported(format!(
                "determinant of {}x{} series matrix",
                self.rows, self.rows
            ))),
        }
    }

    fn minor(&self, row: usize, col: usize) -> Result<MatrixSeries> {
        let mut entries = Vec::new();
        for i in 0..self.rows {
            if i == row {
                continue;
            }
            for j in 0..self.cols {
                if j == col {
                    continue;
                }
                entries.push(self.at(i, j).clone());
            }
        }
        MatrixSeries::from_entries(self.rows - 1, self.cols - 1, entries)
    }

    /// Push every entry through the same substitution, sharing the memo.
    pub fn subst(
        &self,
        keep_map: &[Option<usize>],
        values: &[Option<MultiSeries>],
        memo: &mut SubstMemo,
    ) -> Result<MatrixSeries> {
        let entries = self
            .entries
            .iter()
            .map(|e| e.subst(keep_map, values, memo))
            .collect::<Result<Vec<_>>>()?;
        MatrixSeries::from_entries(self.rows, self.cols, entries)
    }

    pub fn map_vars(&self, target_vars: usize, target_cap: usize, var_map: &[usize]) -> MatrixSeries {
        MatrixSeries {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .map(|e| e.map_vars(target_vars, target_cap, var_map))
                .collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.max_norm()).fold(0.0, f64::max)
    }
}

/// Invert the polynomial map theta(x, y, z) in its last block of variables:
/// returns z(x, y, theta) with theta(x, y, z(x, y, theta)) = theta up to the
/// cap. `theta` holds n series over 3n variables laid out (x | y | z); the
/// result lives over the same signature read as (x | y | theta).
///
/// Requires theta(0) = 0 and an invertible Jacobian d theta / d z at the
/// origin.
pub fn invert_map(theta: &[MultiSeries]) -> Result<Vec<MultiSeries>> {
    let n = theta.len();
    assert!(n >= 1);
    let nv = theta[0].num_vars();
    let cap = theta[0].cap();
    if nv != 3 * n {
        return Err(Error::Shape(format!(
            "invert_map expects {} = 3n variables, got {nv}",
            3 * n
        )));
    }
    for th in theta {
        if th.constant_term().norm() > 1e-13 {
            return Err(Error::Composition(th.constant_term().norm()));
        }
    }
    // Jacobian in z at the origin
    let z0 = 2 * n;
    let jac = nalgebra::DMatrix::from_fn(n, n, |i, j| theta[i].deriv(z0 + j).constant_term());
    let jac_inv = jac.try_inverse().ok_or(Error::SingularSeries)?;

    // iterate z <- z + J^-1 (theta_target - theta(x,y,z)); the error gains a
    // degree per step.
    let keep: Vec<Option<usize>> = (0..nv)
        .map(|v| if v < z0 { Some(v) } else { None })
        .collect();
    let theta_vars: Vec<MultiSeries> = (0..n).map(|j| MultiSeries::var(nv, cap, z0 + j)).collect();
    let mut z: Vec<MultiSeries> = theta_vars.clone();
    for _ in 0..=cap {
        let mut memo = SubstMemo::for_signature(nv, cap);
        let values: Vec<Option<MultiSeries>> = (0..nv)
            .map(|v| if v >= z0 { Some(z[v - z0].clone()) } else { None })
            .collect();
        let mut residual = Vec::with_capacity(n);
        for i in 0..n {
            let ti = theta[i].subst(&keep, &values, &mut memo)?;
            residual.push(theta_vars[i].try_sub(&ti)?);
        }
        let mut znew = Vec::with_capacity(n);
        for i in 0..n {
            let mut zi = z[i].clone();
            for (j, r) in residual.iter().enumerate() {
                zi = zi.try_add(&r.scale(jac_inv[(i, j)]))?;
            }
            znew.push(zi);
        }
        z = znew;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    /// Brute-force truncated convolution over explicit exponent maps; the
    /// independent oracle for the table-driven product.
    fn mul_oracle(a: &MultiSeries, b: &MultiSeries) -> MultiSeries {
        let nv = a.num_vars();
        let cap = a.cap();
        let mut out = MultiSeries::zero(nv, cap);
        let ta = a.table().clone();
        let tb = b.table().clone();
        for i in 0..ta.len() {
            for j in 0..tb.len() {
                let ea = ta.exponents(i);
                let eb = tb.exponents(j);
                let sum: Vec<u8> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
                let deg: usize = sum.iter().map(|&x| x as usize).sum();
                if deg > cap {
                    continue;
                }
                let prod = a.coeff_rank(i) * b.coeff_rank(j);
                let cur = out.coeff(&sum);
                out.set_coeff(&sum, cur + prod);
            }
        }
        out
    }

    fn seeded_int_series(nv: usize, cap: usize, seed: u64) -> MultiSeries {
        // small integer coefficients so products are exact in f64
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut s = MultiSeries::zero(nv, cap);
        let n = s.table().len();
        for r in 0..n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ((state >> 33) % 7) as i64 - 3;
            s.add_coeff_rank(r, c(v as f64));
        }
        s
    }

    #[test]
    fn mul_polynomial_identity() {
        // (1 + x)(1 - x) with cap 2 keeps the -x^2 term
        let one = MultiSeries::one(1, 2);
        let x = MultiSeries::var(1, 2, 0);
        let res = &(&one + &x) * &(&one - &x);
        assert_eq!(res.coeff(&[0]), c(1.0));
        assert_eq!(res.coeff(&[1]), c(0.0));
        assert_eq!(res.coeff(&[2]), c(-1.0));
    }

    #[test]
    fn mul_truncation_drops_quadratic() {
        let one = MultiSeries::one(1, 1);
        let x = MultiSeries::var(1, 1, 0);
        let res = &(&one + &x) * &(&one - &x);
        assert_eq!(res.coeff(&[0]), c(1.0));
        assert_eq!(res.coeff(&[1]), c(0.0));
    }

    #[test]
    fn mul_matches_convolution_oracle() {
        for seed in 0..5 {
            let a = seeded_int_series(3, 6, 100 + seed);
            let b = seeded_int_series(3, 6, 200 + seed);
            let fast = &a * &b;
            let slow = mul_oracle(&a, &b);
            for r in 0..fast.table().len() {
                assert_eq!(fast.coeff_rank(r), slow.coeff_rank(r), "rank {r}");
            }
        }
    }

    #[test]
    fn mul_shape_error() {
        let a = MultiSeries::one(2, 3);
        let b = MultiSeries::one(3, 3);
        assert!(matches!(a.try_mul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn compose_square_of_sum() {
        // f = x^2, subst x -> x + y
        let f = {
            let x = MultiSeries::var(1, 2, 0);
            &x * &x
        };
        let sub = {
            let x = MultiSeries::var(2, 2, 0);
            let y = MultiSeries::var(2, 2, 1);
            &x + &y
        };
        let g = f.compose(&[sub]).unwrap();
        assert_eq!(g.coeff(&[2, 0]), c(1.0));
        assert_eq!(g.coeff(&[1, 1]), c(2.0));
        assert_eq!(g.coeff(&[0, 2]), c(1.0));
    }

    #[test]
    fn compose_identity_substitution() {
        let f = seeded_int_series(3, 5, 7);
        let idvars: Vec<MultiSeries> = (0..3).map(|v| MultiSeries::var(3, 5, v)).collect();
        let g = f.compose(&idvars).unwrap();
        for r in 0..f.table().len() {
            assert_eq!(f.coeff_rank(r), g.coeff_rank(r));
        }
    }

    #[test]
    fn compose_matches_expansion_oracle() {
        // cubic f in 2 vars composed with linear maps, against oracle built
        // from repeated oracle-multiplication
        let f = seeded_int_series(2, 6, 42);
        let l1 = {
            let x = MultiSeries::var(2, 6, 0);
            let y = MultiSeries::var(2, 6, 1);
            (&x.scale(c(2.0)) + &y.scale(c(-1.0))).clone()
        };
        let l2 = {
            let x = MultiSeries::var(2, 6, 0);
            let y = MultiSeries::var(2, 6, 1);
            (&x + &y.scale(c(3.0))).clone()
        };
        let got = f.compose(&[l1.clone(), l2.clone()]).unwrap();

        let mut expect = MultiSeries::zero(2, 6);
        let t = f.table().clone();
        for r in 0..t.len() {
            let coeff = f.coeff_rank(r);
            if coeff == c(0.0) {
                continue;
            }
            let e = t.exponents(r);
            let mut term = MultiSeries::one(2, 6);
            for _ in 0..e[0] {
                term = mul_oracle(&term, &l1);
            }
            for _ in 0..e[1] {
                term = mul_oracle(&term, &l2);
            }
            expect = expect.try_add(&term.scale(coeff)).unwrap();
        }
        for r in 0..t.len() {
            assert_eq!(got.coeff_rank(r), expect.coeff_rank(r), "rank {r}");
        }
    }

    #[test]
    fn compose_rejects_nonzero_constant() {
        let f = MultiSeries::var(1, 3, 0);
        let bad = MultiSeries::one(1, 3);
        assert!(matches!(f.compose(&[bad]), Err(Error::Composition(_))));
    }

    #[test]
    fn matrix_inverse_identity() {
        let id = MatrixSeries::identity(2, 2, 3);
        let inv = id.inverse().unwrap();
        assert!(inv.sub(&id).unwrap().max_norm() < 1e-14);
    }

    #[test]
    fn matrix_inverse_geometric_series() {
        // (Id + x A)^-1 = Id - xA + x^2 A^2 at cap 2
        let x = MultiSeries::var(1, 2, 0);
        let a = [[1.0, 2.0], [0.5, -1.0]];
        let mut m = MatrixSeries::identity(2, 1, 2);
        for i in 0..2 {
            for j in 0..2 {
                let add = x.scale(c(a[i][j]));
                *m.at_mut(i, j) = m.at(i, j).try_add(&add).unwrap();
            }
        }
        let inv = m.inverse().unwrap();
        // A^2
        let mut a2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    a2[i][j] += a[i][k] * a[k][j];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let e = inv.at(i, j);
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((e.coeff(&[0]) - c(id)).norm() < 1e-14);
                assert!((e.coeff(&[1]) - c(-a[i][j])).norm() < 1e-14);
                assert!((e.coeff(&[2]) - c(a2[i][j])).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn matrix_inverse_multiplies_back() {
        let mut m = MatrixSeries::identity(2, 2, 4);
        for i in 0..2 {
            for j in 0..2 {
                let noise = seeded_int_series(2, 4, (10 + i * 2 + j) as u64).scale(c(0.05));
                // keep the constant term well-conditioned
                let noise = noise.try_sub(&MultiSeries::constant(2, 4, noise.constant_term())).unwrap();
                *m.at_mut(i, j) = m.at(i, j).try_add(&noise).unwrap();
            }
        }
        let inv = m.inverse().unwrap();
        let prod = m.matmul(&inv).unwrap();
        let diff = prod.sub(&MatrixSeries::identity(2, 2, 4)).unwrap();
        assert!(diff.max_norm() < 1e-12, "{}", diff.max_norm());
    }

    #[test]
    fn det_diagonal() {
        // det diag(1+x, 1+y) = 1 + x + y + xy
        let one = MultiSeries::one(2, 2);
        let x = MultiSeries::var(2, 2, 0);
        let y = MultiSeries::var(2, 2, 1);
        let mut m = MatrixSeries::zero(2, 2, 2, 2);
        *m.at_mut(0, 0) = &one + &x;
        *m.at_mut(1, 1) = &one + &y;
        let d = m.det().unwrap();
        assert_eq!(d.coeff(&[0, 0]), c(1.0));
        assert_eq!(d.coeff(&[1, 0]), c(1.0));
        assert_eq!(d.coeff(&[0, 1]), c(1.0));
        assert_eq!(d.coeff(&[1, 1]), c(1.0));
    }

    #[test]
    fn det_identity_is_one() {
        let d = MatrixSeries::identity(2, 3, 4).det().unwrap();
        assert_eq!(d.coeff(&[0, 0, 0]), c(1.0));
        assert!(d.max_norm() <= 1.0 + 1e-15);
    }

    #[test]
    fn det_matches_ad_minus_bc_oracle() {
        let entries: Vec<MultiSeries> = (0..4).map(|i| seeded_int_series(2, 4, 900 + i)).collect();
        let m = MatrixSeries::from_entries(2, 2, entries.clone()).unwrap();
        let d = m.det().unwrap();
        let ad = mul_oracle(&entries[0], &entries[3]);
        let bc = mul_oracle(&entries[1], &entries[2]);
        let oracle = ad.try_sub(&bc).unwrap();
        for r in 0..d.table().len() {
            assert_eq!(d.coeff_rank(r), oracle.coeff_rank(r));
        }
    }

    #[test]
    fn recip_multiplies_back() {
        let mut f = seeded_int_series(3, 6, 31).scale(c(0.08));
        f.set_coeff(&[0, 0, 0], c(1.7));
        let r = f.recip().unwrap();
        let prod = f.try_mul(&r).unwrap();
        let diff = prod.try_sub(&MultiSeries::one(3, 6)).unwrap();
        assert!(diff.max_norm() < 1e-13, "{}", diff.max_norm());
    }

    #[test]
    fn recip_rejects_zero_constant() {
        let x = MultiSeries::var(1, 3, 0);
        assert!(matches!(x.recip(), Err(Error::SingularSeries)));
    }

    #[test]
    fn invert_map_flat() {
        // n = 1, theta = z: inverse is z = theta
        let theta = MultiSeries::var(3, 4, 2);
        let z = invert_map(&[theta]).unwrap();
        let expect = MultiSeries::var(3, 4, 2);
        assert!(z[0].try_sub(&expect).unwrap().max_norm() < 1e-14);
    }

    #[test]
    fn invert_map_lagrange_series() {
        // theta = z + z^2 at cap 3: z = theta - theta^2 + 2 theta^3
        let zvar = MultiSeries::var(3, 3, 2);
        let theta = zvar.try_add(&zvar.try_mul(&zvar).unwrap()).unwrap();
        let z = invert_map(&[theta]).unwrap();
        assert!((z[0].coeff(&[0, 0, 1]) - c(1.0)).norm() < 1e-14);
        assert!((z[0].coeff(&[0, 0, 2]) - c(-1.0)).norm() < 1e-14);
        assert!((z[0].coeff(&[0, 0, 3]) - c(2.0)).norm() < 1e-13);
    }

    #[test]
    fn invert_map_round_trip_random() {
        // random normalized map theta = z + higher with x,y dependence
        let nv = 6;
        let cap = 5;
        let mut theta = Vec::new();
        for i in 0..2usize {
            let mut t = MultiSeries::var(nv, cap, 4 + i);
            let noise = seeded_int_series(nv, cap, 77 + i as u64).scale(c(0.03));
            // remove constant and linear parts to keep Jacobian = Id and theta(0)=0
            let mut cleaned = noise.clone();
            cleaned.set_coeff(&[0, 0, 0, 0, 0, 0], c(0.0));
            for v in 0..nv {
                let mut e = vec![0u8; nv];
                e[v] = 1;
                cleaned.set_coeff(&e, c(0.0));
            }
            t = t.try_add(&cleaned).unwrap();
            theta.push(t);
        }
        let z = invert_map(&theta).unwrap();
        // round trip: theta(x,y,z(x,y,th)) = th
        let keep: Vec<Option<usize>> = (0..nv).map(|v| if v < 4 { Some(v) } else { None }).collect();
        let values: Vec<Option<MultiSeries>> = (0..nv)
            .map(|v| if v >= 4 { Some(z[v - 4].clone()) } else { None })
            .collect();
        let mut memo = SubstMemo::for_signature(nv, cap);
        for i in 0..2 {
            let round = theta[i].subst(&keep, &values, &mut memo).unwrap();
            let expect = MultiSeries::var(nv, cap, 4 + i);
            assert!(
                round.try_sub(&expect).unwrap().max_norm() < 1e-12,
                "{}",
                round.try_sub(&expect).unwrap().max_norm()
            );
        }
    }

    #[test]
    fn map_vars_folds_diagonal() {
        // f(x, y) = x y -> fold y onto x gives x^2
        let x = MultiSeries::var(2, 3, 0);
        let y = MultiSeries::var(2, 3, 1);
        let f = &x * &y;
        let g = f.map_vars(2, 3, &[0, 0]);
        assert_eq!(g.coeff(&[2, 0]), c(1.0));
    }
}
