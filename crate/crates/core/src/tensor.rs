//! Dense complex third-order tensors and the multilinear algebra the solvers
//! are built on.
//!
//! # Layout
//!
//! A [`Tensor3`] of shape `(P, M, T)` (subcarrier × RF chain × symbol) stores
//! entry `(p, m, t)` at linear index `p + P·(m + M·t)`, i.e. mode 1 varies
//! fastest. The unfoldings are laid out so that for any factor triple
//! `(G, A, S)`
//!
//! ```text
//! Y_(1)ᵀ = (S ⊙ A) Gᵀ     Y_(1) is P × MT, column index m + M·t
//! Y_(2)ᵀ = (S ⊙ G) Aᵀ     Y_(2) is M × PT, column index p + P·t
//! Y_(3)ᵀ = (A ⊙ G) Sᵀ     Y_(3) is T × PM, column index p + P·m
//! ```
//!
//! where `⊙` is the column-wise Kronecker (Khatri-Rao) product with the left
//! operand's index varying slowest. `vec(Y)` in this order equals
//! `Σ_l s_l ⊗ a_l ⊗ g_l`.

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};
use crate::linalg::ComplexMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<Complex64>,
}

impl Tensor3 {
    pub fn zeros(p: usize, m: usize, t: usize) -> Self {
        Self {
            dims: (p, m, t),
            data: vec![Complex64::new(0.0, 0.0); p * m * t],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<Complex64>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(dim_err(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        let (p, m, t) = dims;
        let mut data = Vec::with_capacity(p * m * t);
        for ti in 0..t {
            for mi in 0..m {
                for pi in 0..p {
                    data.push(f(pi, mi, ti));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, p: usize, m: usize, t: usize) -> usize {
        p + self.dims.0 * (m + self.dims.1 * t)
    }

    #[inline]
    pub fn get(&self, p: usize, m: usize, t: usize) -> Complex64 {
        self.data[self.index(p, m, t)]
    }

    #[inline]
    pub fn set(&mut self, p: usize, m: usize, t: usize, v: Complex64) {
        let i = self.index(p, m, t);
        self.data[i] = v;
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(dim_err(format!(
                "tensor dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Mode-`n` unfolding (`n ∈ {1, 2, 3}`), see the module docs for the layout.
    pub fn unfold(&self, mode: usize) -> Result<ComplexMatrix> {
        let (p, m, t) = self.dims;
        match mode {
            // Column-major P × (MT) is exactly the storage order.
            1 => Ok(ComplexMatrix::from_column_slice(p, m * t, &self.data)),
            2 => Ok(ComplexMatrix::from_fn(m, p * t, |mi, col| {
                let (pi, ti) = (col % p, col / p);
                self.get(pi, mi, ti)
            })),
            3 => Ok(ComplexMatrix::from_fn(t, p * m, |ti, col| {
                let (pi, mi) = (col % p, col / p);
                self.get(pi, mi, ti)
            })),
            other => Err(Error::InvalidMode(other)),
        }
    }

    /// Inverse of [`Tensor3::unfold`].
    pub fn fold(mat: &ComplexMatrix, mode: usize, dims: (usize, usize, usize)) -> Result<Self> {
        let (p, m, t) = dims;
        let expected = match mode {
            1 => (p, m * t),
            2 => (m, p * t),
            3 => (t, p * m),
            other => return Err(Error::InvalidMode(other)),
        };
        if mat.shape() != expected {
            return Err(dim_err(format!(
                "mode-{mode} unfolding has shape {:?}, expected {:?}",
                mat.shape(),
                expected
            )));
        }
        Ok(match mode {
            1 => Self {
                dims,
                data: mat.as_slice().to_vec(),
            },
            2 => Self::from_fn(dims, |pi, mi, ti| mat[(mi, pi + p * ti)]),
            _ => Self::from_fn(dims, |pi, mi, ti| mat[(ti, pi + p * mi)]),
        })
    }
}

/// Khatri-Rao product: column `j` is `a[:, j] ⊗ b[:, j]`.
pub fn khatri_rao(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.ncols() != b.ncols() {
        return Err(dim_err(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let rb = b.nrows();
    Ok(ComplexMatrix::from_fn(a.nrows() * rb, a.ncols(), |i, j| {
        a[(i / rb, j)] * b[(i % rb, j)]
    }))
}

/// The three factor matrices of a (block-)CP model.
///
/// `g` is P×L, `a` is M×L and `s` is T×L. `blocks` lists the per-user
/// column counts `L_1..L_K` (all ones for a plain CPD); they sum to L.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub g: ComplexMatrix,
    pub a: ComplexMatrix,
    pub s: ComplexMatrix,
    pub blocks: Vec<usize>,
}

impl FactorSet {
    /// Plain CPD factors (one column per block).
    pub fn new(g: ComplexMatrix, a: ComplexMatrix, s: ComplexMatrix) -> Result<Self> {
        let l = g.ncols();
        Self::with_blocks(g, a, s, vec![1; l])
    }

    pub fn with_blocks(
        g: ComplexMatrix,
        a: ComplexMatrix,
        s: ComplexMatrix,
        blocks: Vec<usize>,
    ) -> Result<Self> {
        let l = g.ncols();
        if a.ncols() != l || s.ncols() != l {
            return Err(dim_err(format!(
                "factor column counts differ: G {}, A {}, S {}",
                l,
                a.ncols(),
                s.ncols()
            )));
        }
        if blocks.iter().sum::<usize>() != l {
            return Err(dim_err(format!(
                "block sizes {:?} do not sum to {}",
                blocks, l
            )));
        }
        Ok(Self { g, a, s, blocks })
    }

    pub fn rank(&self) -> usize {
        self.g.ncols()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.g.nrows(), self.a.nrows(), self.s.nrows())
    }
}

/// `Y[p,m,t] = Σ_l G[p,l]·A[m,l]·S[t,l]`.
pub fn cpd_reconstruct(f: &FactorSet) -> Tensor3 {
    let (p, m, t) = f.dims();
    let mut out = Tensor3::zeros(p, m, t);
    for l in 0..f.rank() {
        for ti in 0..t {
            let st = f.s[(ti, l)];
            for mi in 0..m {
                let am = f.a[(mi, l)] * st;
                let base = p * (mi + m * ti);
                for pi in 0..p {
                    out.data[base + pi] += f.g[(pi, l)] * am;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c64, frob_norm, kron_vec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(r, c, |_, _| {
            c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn ones_tensor_mode1_is_all_ones() {
        let t = Tensor3::from_fn((2, 2, 2), |_, _, _| c64(1.0, 0.0));
        let u = t.unfold(1).unwrap();
        assert_eq!(u.shape(), (2, 4));
        assert!(u.iter().all(|z| *z == c64(1.0, 0.0)));
    }

    #[test]
    fn invalid_mode_is_rejected() {
        let t = Tensor3::zeros(2, 2, 2);
        assert!(matches!(t.unfold(4), Err(Error::InvalidMode(4))));
        assert!(matches!(t.unfold(0), Err(Error::InvalidMode(0))));
    }

    #[test]
    fn rank_one_mode3_rows_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = rand_mat(&mut rng, 3, 1);
        let a = rand_mat(&mut rng, 4, 1);
        let s = rand_mat(&mut rng, 2, 1);
        let y = cpd_reconstruct(&FactorSet::new(g.clone(), a.clone(), s.clone()).unwrap());
        let y3 = y.unfold(3).unwrap();
        // row k = s[k]·vec(g aᵀ)ᵀ with vec column-major (p fastest).
        for k in 0..2 {
            for mi in 0..4 {
                for pi in 0..3 {
                    let want = s[(k, 0)] * g[(pi, 0)] * a[(mi, 0)];
                    assert!((y3[(k, pi + 3 * mi)] - want).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn khatri_rao_identity_pattern() {
        let i2 = ComplexMatrix::identity(2, 2);
        let kr = khatri_rao(&i2, &i2).unwrap();
        assert_eq!(kr.shape(), (4, 2));
        for i in 0..4 {
            for j in 0..2 {
                let want = if (i, j) == (0, 0) || (i, j) == (3, 1) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(kr[(i, j)], c64(want, 0.0));
            }
        }
    }

    #[test]
    fn khatri_rao_columns_are_kroneckers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 3, 2);
        let b = rand_mat(&mut rng, 2, 2);
        let kr = khatri_rao(&a, &b).unwrap();
        for j in 0..2 {
            let col_a: Vec<_> = a.column(j).iter().copied().collect();
            let col_b: Vec<_> = b.column(j).iter().copied().collect();
            let k = kron_vec(&col_a, &col_b);
            for (i, z) in k.iter().enumerate() {
                assert!((kr[(i, j)] - z).norm() < 1e-15);
            }
        }
        // single columns reduce to the Kronecker product
        let u = rand_mat(&mut rng, 3, 1);
        let v = rand_mat(&mut rng, 4, 1);
        let kr = khatri_rao(&u, &v).unwrap();
        let k = kron_vec(u.as_slice(), v.as_slice());
        assert!(kr.iter().zip(&k).all(|(x, y)| (x - y).norm() < 1e-15));
    }

    #[test]
    fn khatri_rao_column_mismatch() {
        let a = ComplexMatrix::zeros(2, 2);
        let b = ComplexMatrix::zeros(2, 3);
        assert!(khatri_rao(&a, &b).is_err());
    }

    #[test]
    fn reconstruct_trivial_cases() {
        let ones = |r| ComplexMatrix::from_element(r, 1, c64(1.0, 0.0));
        let y = cpd_reconstruct(&FactorSet::new(ones(2), ones(3), ones(2)).unwrap());
        assert!(y.data().iter().all(|z| *z == c64(1.0, 0.0)));
        let y0 = cpd_reconstruct(
            &FactorSet::new(
                ComplexMatrix::zeros(2, 0),
                ComplexMatrix::zeros(3, 0),
                ComplexMatrix::zeros(2, 0),
            )
            .unwrap(),
        );
        assert_eq!(y0.dims(), (2, 3, 2));
        assert!(y0.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn reconstruct_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, m, t, l) = (4, 3, 5, 3);
        let f = FactorSet::new(
            rand_mat(&mut rng, p, l),
            rand_mat(&mut rng, m, l),
            rand_mat(&mut rng, t, l),
        )
        .unwrap();
        let y = cpd_reconstruct(&f);
        for pi in 0..p {
            for mi in 0..m {
                for ti in 0..t {
                    let mut want = c64(0.0, 0.0);
                    for li in 0..l {
                        want += f.g[(pi, li)] * f.a[(mi, li)] * f.s[(ti, li)];
                    }
                    assert!((y.get(pi, mi, ti) - want).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn random_k2_mode1_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FactorSet::new(
            rand_mat(&mut rng, 3, 2),
            rand_mat(&mut rng, 3, 2),
            rand_mat(&mut rng, 3, 2),
        )
        .unwrap();
        let y = cpd_reconstruct(&f);
        let lhs = y.unfold(1).unwrap().transpose();
        let rhs = khatri_rao(&f.s, &f.a).unwrap() * f.g.transpose();
        assert!(frob_norm(&(lhs - rhs)) < 1e-14);
    }

    #[test]
    fn fold_rejects_wrong_shape() {
        let m = ComplexMatrix::zeros(3, 3);
        assert!(Tensor3::fold(&m, 1, (2, 2, 2)).is_err());
        assert!(Tensor3::from_vec((2, 2, 2), vec![c64(0.0, 0.0); 7]).is_err());
    }
}
