//! Dense multiway arrays and the CP algebra built on them.
//!
//! All arrays are linearized with mode 0 varying fastest (the column-major
//! generalization), so for an `n × d_1 × … × d_K` array with samples first the
//! raw buffer *is* the `n × d` sample-mode unfolding in column-major order, and
//! row `j` of [`vmat`] lines up with column `j` of that unfolding.
//!
//! Mode indices in this API are zero-based.

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{invalid, Error, Result};

pub type Matrix = DMatrix<f64>;

/// Largest column count accepted by [`k_rank`]; the test is exhaustive over subsets.
pub const K_RANK_MAX_COLS: usize = 20;

/// Relative singular-value tolerance for numerical rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiwayArray {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl MultiwayArray {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return invalid("array order must be at least 1");
        }
        if dims.contains(&0) {
            return invalid(format!("all dimensions must be positive, got {dims:?}"));
        }
        let len = checked_product(&dims)?;
        if len != values.len() {
            return invalid(format!(
                "dims {dims:?} require {len} values, got {}",
                values.len()
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("array entry {pos} is {}", values[pos])));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = checked_product(&dims)?;
        Self::new(dims, vec![0.0; len])
    }

    /// Builds an array from its unfolding along mode 0 (`dims[0] × rest`).
    pub fn from_sample_matrix(m: &Matrix, data_dims: &[usize]) -> Result<Self> {
        let mut dims = Vec::with_capacity(data_dims.len() + 1);
        dims.push(m.nrows());
        dims.extend_from_slice(data_dims);
        if data_dims.iter().product::<usize>() != m.ncols() {
            return invalid(format!(
                "matrix has {} columns but data dims {data_dims:?} need {}",
                m.ncols(),
                data_dims.iter().product::<usize>()
            ));
        }
        Self::new(dims, m.as_slice().to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut lin = 0;
        let mut stride = 1;
        for (&i, &d) in index.iter().zip(&self.dims) {
            debug_assert!(i < d);
            lin += i * stride;
            stride *= d;
        }
        lin
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.linear_index(index)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The same buffer viewed as an array with different dims of equal size.
    pub fn reshaped(&self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.values.clone())
    }

    /// View of the mode-0 unfolding (`dims[0] × ∏ dims[1..]`) without copying.
    pub fn sample_view(&self) -> DMatrixView<'_, f64> {
        let rows = self.dims[0];
        DMatrixView::from_slice(&self.values, rows, self.values.len() / rows)
    }

    pub fn sample_matrix(&self) -> Matrix {
        self.sample_view().into_owned()
    }

    /// Product of all dims but the first.
    pub fn sample_size(&self) -> usize {
        self.dims[1..].iter().product()
    }
}

fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        Error::InvalidArgument(format!("dimension product overflows for {dims:?}"))
    })
}

/// The per-mode loading matrices of a CP factorization, all with `rank` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingSet {
    factors: Vec<Matrix>,
}

impl LoadingSet {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        let Some(first) = factors.first() else {
            return invalid("a loading set needs at least one mode");
        };
        let rank = first.ncols();
        if rank == 0 {
            return invalid("rank must be at least 1");
        }
        for (k, f) in factors.iter().enumerate() {
            if f.ncols() != rank {
                return invalid(format!(
                    "mode {k} loading has {} columns, expected {rank}",
                    f.ncols()
                ));
            }
            if f.nrows() == 0 {
                return invalid(format!("mode {k} loading has no rows"));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("mode {k} loading")));
            }
        }
        Ok(Self { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn n_modes(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn factor(&self, k: usize) -> &Matrix {
        &self.factors[k]
    }

    pub fn into_factors(self) -> Vec<Matrix> {
        self.factors
    }

    /// Unit-norm columns with a positive first nonzero entry, within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.factors.iter().all(|f| {
            f.column_iter().all(|c| {
                let lead = c.iter().copied().find(|v| *v != 0.0).unwrap_or(0.0);
                (c.norm() - 1.0).abs() <= tol && lead > 0.0
            })
        })
    }

    /// Gram matrix `vmatᵀ·vmat`, formed as the Hadamard product of the per-mode Grams.
    pub fn vmat_gram(&self) -> Matrix {
        hadamard_grams(self.factors.iter())
    }
}

/// Hadamard product of `Fᵀ F` over the given factors; all-ones for an empty list.
pub fn hadamard_grams<'a>(factors: impl Iterator<Item = &'a Matrix>) -> Matrix {
    let mut out: Option<Matrix> = None;
    for f in factors {
        let g = f.transpose() * f;
        out = Some(match out {
            None => g,
            Some(acc) => acc.component_mul(&g),
        });
    }
    out.unwrap_or_else(|| Matrix::from_element(0, 0, 0.0))
}

pub fn outer_product(vectors: &[Vec<f64>]) -> Result<MultiwayArray> {
    if vectors.is_empty() {
        return invalid("outer product of an empty vector list");
    }
    let dims: Vec<usize> = vectors.iter().map(Vec::len).collect();
    if dims.contains(&0) {
        return invalid("outer product factors must be nonempty");
    }
    let mut values = vec![1.0];
    for v in vectors {
        let mut next = Vec::with_capacity(values.len() * v.len());
        for &a in v {
            next.extend(values.iter().map(|&p| p * a));
        }
        values = next;
    }
    MultiwayArray::new(dims, values)
}

fn split_sizes(dims: &[usize], mode: usize) -> (usize, usize, usize) {
    let left = dims[..mode].iter().product();
    let right = dims[mode + 1..].iter().product();
    (left, dims[mode], right)
}

/// Mode-`mode` unfolding: a `dims[mode] × ∏_{j≠mode} dims[j]` matrix whose
/// columns are the mode fibers, remaining modes ordered lowest-fastest.
pub fn unfold(x: &MultiwayArray, mode: usize) -> Result<Matrix> {
    if mode >= x.order() {
        return invalid(format!("mode {mode} out of range for order {}", x.order()));
    }
    let (left, dm, right) = split_sizes(&x.dims, mode);
    let mut out = Matrix::zeros(dm, left * right);
    let v = &x.values;
    for t in 0..right {
        for i in 0..dm {
            let src = left * (i + dm * t);
            for l in 0..left {
                out[(i, l + left * t)] = v[src + l];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, dims: &[usize], mode: usize) -> Result<MultiwayArray> {
    if mode >= dims.len() {
        return invalid(format!("mode {mode} out of range for order {}", dims.len()));
    }
    let total = checked_product(dims)?;
    let (left, dm, right) = split_sizes(dims, mode);
    if m.nrows() != dm || m.ncols() * dm != total || m.ncols() != left * right {
        return invalid(format!(
            "{}×{} matrix cannot fold into dims {dims:?} along mode {mode}",
            m.nrows(),
            m.ncols()
        ));
    }
    let mut values = vec![0.0; total];
    for t in 0..right {
        for i in 0..dm {
            let dst = left * (i + dm * t);
            for l in 0..left {
                values[dst + l] = m[(i, l + left * t)];
            }
        }
    }
    MultiwayArray::new(dims.to_vec(), values)
}

/// Columnwise Khatri-Rao product ordered so the first factor's row index
/// varies fastest. Row `l` for indices `(i_a, i_b, …)` holds `∏ F[i, r]`.
pub fn khatri_rao(factors: &[&Matrix]) -> Matrix {
    let Some(first) = factors.first() else {
        return Matrix::zeros(1, 0);
    };
    let rank = first.ncols();
    let mut acc = (*first).clone();
    for f in &factors[1..] {
        let rows = acc.nrows();
        let mut next = Matrix::zeros(rows * f.nrows(), rank);
        for r in 0..rank {
            let a = acc.column(r);
            let mut col = next.column_mut(r);
            for i in 0..f.nrows() {
                let s = f[(i, r)];
                for l in 0..rows {
                    col[l + rows * i] = a[l] * s;
                }
            }
        }
        acc = next;
    }
    acc
}

/// Matricized loadings: `d × R`, column `r` the vectorized `v_1r ∘ ⋯ ∘ v_Kr`.
pub fn vmat(loadings: &LoadingSet) -> Matrix {
    let refs: Vec<&Matrix> = loadings.factors.iter().collect();
    khatri_rao(&refs)
}

/// Matricized-tensor-times-Khatri-Rao product for mode `mode`:
/// `unfold(x, mode) · KR(others)`, where `others` lists the factors of every
/// other mode in ascending order. Never materializes the full Khatri-Rao matrix.
pub fn mttkrp(x: &MultiwayArray, mode: usize, others: &[&Matrix]) -> Result<Matrix> {
    let order = x.order();
    if mode >= order {
        return invalid(format!("mode {mode} out of range for order {order}"));
    }
    if others.len() + 1 != order {
        return invalid(format!(
            "expected {} factor matrices, got {}",
            order - 1,
            others.len()
        ));
    }
    let rank = others.first().map(|f| f.ncols()).unwrap_or(1);
    for (j, f) in others.iter().enumerate() {
        let m = if j < mode { j } else { j + 1 };
        if f.nrows() != x.dims[m] || f.ncols() != rank {
            return invalid(format!(
                "factor for mode {m} is {}×{}, expected {}×{rank}",
                f.nrows(),
                f.ncols(),
                x.dims[m]
            ));
        }
    }
    let (left, dm, right) = split_sizes(&x.dims, mode);
    if order == 1 {
        return Ok(Matrix::from_column_slice(dm, 1, &x.values));
    }

    // Contract the slower modes first: view x as (left·dm) × right.
    let partial = if mode + 1 < order {
        let right_kr = khatri_rao(&others[mode..]);
        let view = DMatrixView::from_slice(&x.values, left * dm, right);
        view * right_kr
    } else {
        let view = DMatrixView::from_slice(&x.values, left * dm, 1);
        let col = view.into_owned();
        Matrix::from_fn(left * dm, rank, |i, _| col[(i, 0)])
    };
    if mode == 0 {
        return Ok(partial);
    }
    let left_kr = khatri_rao(&others[..mode]);
    let mut out = Matrix::zeros(dm, rank);
    for r in 0..rank {
        let p = partial.column(r);
        let w = left_kr.column(r);
        for i in 0..dm {
            let block = p.rows(left * i, left);
            out[(i, r)] = block.dot(&w);
        }
    }
    Ok(out)
}

/// `⟦u, V_1, …, V_K⟧`: an `n × d_1 × … × d_K` array whose mode-0 unfolding is `u · vmatᵀ`.
pub fn cp_compose(u: &Matrix, loadings: &LoadingSet) -> Result<MultiwayArray> {
    if u.ncols() != loadings.rank() {
        return invalid(format!(
            "score matrix has {} columns but loadings have rank {}",
            u.ncols(),
            loadings.rank()
        ));
    }
    let signal = u * vmat(loadings).transpose();
    MultiwayArray::from_sample_matrix(&signal, &loadings.dims())
}

pub fn frobenius_distance(a: &MultiwayArray, b: &MultiwayArray) -> Result<f64> {
    if a.dims != b.dims {
        return invalid(format!("dims differ: {:?} vs {:?}", a.dims, b.dims));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Numerical rank with singular values below `RANK_RTOL · reference` treated as zero.
pub(crate) fn numerical_rank(m: &Matrix, reference: f64) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 || reference <= 0.0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    sv.iter().filter(|&&s| s > RANK_RTOL * reference).count()
}

/// Largest `k` such that every set of `k` columns is linearly independent.
///
/// Exhaustive over column subsets, so limited to [`K_RANK_MAX_COLS`] columns.
/// The rank tolerance is relative to the largest singular value of the whole matrix.
pub fn k_rank(m: &Matrix) -> Result<usize> {
    let cols = m.ncols();
    if cols > K_RANK_MAX_COLS {
        return invalid(format!(
            "k-rank is limited to {K_RANK_MAX_COLS} columns, got {cols}"
        ));
    }
    if cols == 0 || m.nrows() == 0 {
        return Ok(0);
    }
    let sigma_max = m.clone().singular_values().max();
    if sigma_max <= 0.0 {
        return Ok(0);
    }
    let mut kr = 0;
    for k in 1..=cols.min(m.nrows()) {
        let all_independent = Combinations::new(cols, k).all(|subset| {
            let sub = m.select_columns(subset.iter());
            numerical_rank(&sub, sigma_max) == k
        });
        if !all_independent {
            break;
        }
        kr = k;
    }
    Ok(kr)
}

/// Lexicographic k-subsets of `0..n`.
struct Combinations {
    n: usize,
    current: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let k = self.current.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.current[i] < self.n - k + i {
                self.current[i] += 1;
                for j in i + 1..k {
                    self.current[j] = self.current[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}
