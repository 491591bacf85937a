//! Compressed sparse row matrices, reverse Cuthill-McKee ordering, envelope
//! Cholesky and Jacobi preconditioned conjugate gradients.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("conjugate gradients did not converge: relative residual {residual:e} after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Square CSR matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n x n` matrix, summing duplicate entries.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> CsrMatrix {
        let mut counts = vec![0usize; n + 1];
        for &(i, _, _) in triplets {
            counts[i + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            row.clear();
            row.extend((counts[i]..counts[i + 1]).map(|k| (cols[k], vals[k])));
            row.sort_unstable_by_key(|e| e.0);
            for &(j, v) in &row {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col_idx[k], self.values[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match cols.binary_search(&j) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.n).map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>()).sum()
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Reverse Cuthill-McKee ordering; `perm[new] = old`.
pub fn rcm_ordering(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).filter(|&(j, _)| j != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut nbrs = Vec::new();
    while order.len() < n {
        // start each component from a minimum degree node, refined by a
        // pseudo-peripheral search
        let mut start = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| degree[i]).unwrap();
        for _ in 0..2 {
            let (last, _) = bfs_last(a, start, &visited, &degree);
            start = last;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]));
            nbrs.sort_unstable_by_key(|&j| degree[j]);
            for &j in &nbrs {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_last(a: &CsrMatrix, start: usize, blocked: &[bool], degree: &[usize]) -> (usize, usize) {
    let mut dist = vec![usize::MAX; a.n()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    let mut best = (start, 0);
    while let Some(v) = queue.pop_front() {
        let d = dist[v];
        if d > best.1 || (d == best.1 && degree[v] < degree[best.0]) {
            best = (v, d);
        }
        for (j, _) in a.row(v) {
            if !blocked[j] && dist[j] == usize::MAX {
                dist[j] = d + 1;
                queue.push_back(j);
            }
        }
    }
    best
}

/// First column of each row of the lower envelope of `P A P^T`.
fn envelope(a: &CsrMatrix, perm: &[usize], inv: &[usize]) -> Vec<usize> {
    (0..a.n())
        .map(|i| a.row(perm[i]).map(|(j, _)| inv[j]).filter(|&j| j <= i).min().unwrap_or(i))
        .collect()
}

/// Storage and flop estimates of an envelope factorization under `perm`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEstimate {
    pub entries: usize,
    pub flops: f64,
}

pub fn profile_estimate(a: &CsrMatrix, perm: &[usize]) -> ProfileEstimate {
    let inv = invert(perm);
    let first = envelope(a, perm, &inv);
    let mut entries = 0;
    let mut flops = 0.0;
    for (i, f) in first.iter().enumerate() {
        let w = i - f + 1;
        entries += w;
        flops += (w * w) as f64;
    }
    ProfileEstimate { entries, flops }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

/// `P A P^T = L L^T` with `L` stored by rows over its envelope.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    pub fn factor(a: &CsrMatrix, perm: Vec<usize>) -> Result<SkylineCholesky, SparseError> {
        let n = a.n();
        if perm.len() != n {
            return Err(SparseError::Dimension(format!("permutation of length {} for n = {n}", perm.len())));
        }
        let inv = invert(&perm);
        let first = envelope(a, &perm, &inv);
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + i - first[i] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for i in 0..n {
            for (j, v) in a.row(perm[i]) {
                let jn = inv[j];
                if jn <= i {
                    data[start[i] + jn - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let (done, rest) = data.split_at_mut(start[i]);
            let row_i = &mut rest[..i - fi + 1];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let row_j = &done[start[j]..start[j + 1]];
                let mut s = row_i[j - fi];
                let li = &row_i[k0 - fi..j - fi];
                let lj = &row_j[k0 - fj..j - fj];
                s -= li.iter().zip(lj).map(|(x, y)| x * y).sum::<f64>();
                row_i[j - fi] = s / row_j[j - fj];
            }
            let d = row_i[i - fi] - row_i[..i - fi].iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) {
                return Err(SparseError::NotPositiveDefinite { row: perm[i], pivot: d });
            }
            row_i[i - fi] = d.sqrt();
        }
        Ok(SkylineCholesky { perm, first, start, data })
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn stored_entries(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // L y = Pb
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        // L^T x = y, column sweep
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, l) in row[..i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi preconditioned conjugate gradients for SPD `a`, stopping at
/// `|r| <= tol |b|`.
pub fn pcg(a: &CsrMatrix, b: &[f64], x0: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, CgStats), SparseError> {
    let n = a.n();
    if b.len() != n {
        return Err(SparseError::Dimension(format!("right-hand side of length {} for n = {n}", b.len())));
    }
    let dinv: Vec<f64> = a.diagonal().iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let bnorm = norm(b);
    let mut x = x0.map_or_else(|| vec![0.0; n], |x| x.to_vec());
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], CgStats { iterations: 0, relative_residual: 0.0 }));
    }
    let mut r = a.mul_vec(&x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    for it in 0..max_iter {
        if res <= tol {
            return Ok((x, CgStats { iterations: it, relative_residual: res }));
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SparseError::NotPositiveDefinite { row: 0, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = norm(&r) / bnorm;
    }
    if res <= tol {
        Ok((x, CgStats { iterations: max_iter, relative_residual: res }))
    } else {
        Err(SparseError::NoConvergence { iterations: max_iter, residual: res })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// 5-point Laplacian plus identity on a k x k grid.
    fn grid(k: usize) -> CsrMatrix {
        let idx = |i: usize, j: usize| i * k + j;
        let mut t = Vec::new();
        for i in 0..k {
            for j in 0..k {
                t.push((idx(i, j), idx(i, j), 5.0));
                if i > 0 {
                    t.push((idx(i, j), idx(i - 1, j), -1.0));
                }
                if i + 1 < k {
                    t.push((idx(i, j), idx(i + 1, j), -1.0));
                }
                if j > 0 {
                    t.push((idx(i, j), idx(i, j - 1), -1.0));
                }
                if j + 1 < k {
                    t.push((idx(i, j), idx(i, j + 1), -1.0));
                }
            }
        }
        CsrMatrix::from_triplets(k * k, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0), (0, 1, -1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 0), 4.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.mul_vec(&[1.0, 2.0]), vec![1.0, 4.0]);
    }

    #[test]
    fn rcm_is_permutation_and_reduces_profile() {
        let k = 20;
        let a = grid(k);
        // scramble the numbering
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut shuffle: Vec<usize> = (0..k * k).collect();
        for i in (1..shuffle.len()).rev() {
            shuffle.swap(i, rng.random_range(0..=i));
        }
        let inv = invert(&shuffle);
        let t: Vec<_> = (0..k * k).flat_map(|i| a.row(i).map(move |(j, v)| (i, j, v)).collect::<Vec<_>>()).map(|(i, j, v)| (inv[i], inv[j], v)).collect();
        let b = CsrMatrix::from_triplets(k * k, &t);
        let perm = rcm_ordering(&b);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..k * k).collect::<Vec<_>>());
        let ident: Vec<usize> = (0..k * k).collect();
        let before = profile_estimate(&b, &ident).entries;
        let after = profile_estimate(&b, &perm).entries;
        assert!(after * 4 < before, "{after} vs {before}");
        // a grid has bandwidth k under a good ordering
        assert!(after <= (k + 2) * k * k);
    }

    #[test]
    fn cholesky_matches_cg_and_residual() {
        let a = grid(15);
        let n = a.n();
        let b: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let chol = SkylineCholesky::factor(&a, rcm_ordering(&a)).unwrap();
        let x = chol.solve(&b);
        let r: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(y, b)| y - b).collect();
        assert!(norm(&r) < 1e-12 * norm(&b));
        let (y, stats) = pcg(&a, &b, None, 1e-12, 1000).unwrap();
        assert!(stats.iterations > 0);
        let diff: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(
            SkylineCholesky::factor(&a, vec![0, 1]),
            Err(SparseError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn dense_oracle() {
        // random SPD matrix, compared against nalgebra's dense Cholesky
        let n = 12;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let m = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let spd = &m * m.transpose() + nalgebra::DMatrix::<f64>::identity(n, n);
        let t: Vec<_> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (i, j, spd[(i, j)])).collect();
        let a = CsrMatrix::from_triplets(n, &t);
        let b: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = SkylineCholesky::factor(&a, rcm_ordering(&a)).unwrap().solve(&b);
        let expect = spd.cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b));
        for i in 0..n {
            assert!((x[i] - expect[i]).abs() < 1e-10);
        }
    }
}
