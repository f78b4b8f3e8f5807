//! Matrix products and row-wise operations on 2-D tensors.

use std::sync::Arc;

use super::ops::backward_fn;
use super::Tensor;
use crate::error::{Error, Result};

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!("{op}: expected a 2-D tensor, got {:?}", t.shape()))),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// The three products below are each other's adjoints, so their backward
// rules stay within the family and can be differentiated again.

fn matmul_op(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let data = matmul_raw(&a.data(), &b.data(), m, k, n);
    Tensor::from_op(
        data,
        vec![m, n],
        &[a, b],
        backward_fn("matmul", move |inp, g, needs| {
            Ok(vec![
                needs[0].then(|| matmul_nt_op(g, &inp[1], m, n, k)),
                needs[1].then(|| matmul_tn_op(&inp[0], g, m, k, n)),
            ])
        }),
    )
}

/// `a: [m, k]`, `b: [n, k]` → `[m, n]`.
fn matmul_nt_op(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let data = matmul_nt_raw(&a.data(), &b.data(), m, k, n);
    Tensor::from_op(
        data,
        vec![m, n],
        &[a, b],
        backward_fn("matmul_nt", move |inp, g, needs| {
            Ok(vec![
                needs[0].then(|| matmul_op(g, &inp[1], m, n, k)),
                needs[1].then(|| matmul_tn_op(g, &inp[0], m, n, k)),
            ])
        }),
    )
}

/// `a: [k, m]`, `b: [k, n]` → `[m, n]`.
fn matmul_tn_op(a: &Tensor, b: &Tensor, k: usize, m: usize, n: usize) -> Tensor {
    let data = matmul_tn_raw(&a.data(), &b.data(), k, m, n);
    Tensor::from_op(
        data,
        vec![m, n],
        &[a, b],
        backward_fn("matmul_tn", move |inp, g, needs| {
            Ok(vec![
                needs[0].then(|| matmul_nt_op(&inp[1], g, k, n, m)),
                needs[1].then(|| matmul_op(&inp[0], g, k, m, n)),
            ])
        }),
    )
}

impl Tensor {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ in {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(matmul_op(self, other, m, k, n))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose")?;
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![c, r],
            &[self],
            backward_fn("transpose", |_, g, _| Ok(vec![Some(g.transpose()?)])),
        ))
    }

    /// Row-wise cross product of two `[m, 3]` tensors.
    pub fn cross_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (m, c) = dims2(self, "cross_rows")?;
        if c != 3 || self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cross_rows needs matching [m, 3] operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (a, b) = (self.data(), other.data());
        let mut data = vec![0.0; m * 3];
        for i in 0..m {
            let (x, y) = (&a[3 * i..3 * i + 3], &b[3 * i..3 * i + 3]);
            data[3 * i] = x[1] * y[2] - x[2] * y[1];
            data[3 * i + 1] = x[2] * y[0] - x[0] * y[2];
            data[3 * i + 2] = x[0] * y[1] - x[1] * y[0];
        }
        drop((a, b));
        Ok(Tensor::from_op(
            data,
            vec![m, 3],
            &[self, other],
            backward_fn("cross_rows", |inp, g, needs| {
                // d(a x b)·g: grad_a = b x g, grad_b = g x a.
                Ok(vec![
                    needs[0].then(|| inp[1].cross_rows(g)).transpose()?,
                    needs[1].then(|| g.cross_rows(&inp[0])).transpose()?,
                ])
            }),
        ))
    }

    /// Sums each row of an `[m, k]` tensor into an `[m]` vector.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (m, k) = dims2(self, "row_sum")?;
        let src = self.data();
        let data: Vec<f64> = (0..m).map(|i| src[i * k..(i + 1) * k].iter().sum()).collect();
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![m],
            &[self],
            backward_fn("row_sum", move |_, g, _| Ok(vec![Some(g.row_broadcast(k)?)])),
        ))
    }

    /// Repeats each entry of an `[m]` vector across `k` columns.
    pub fn row_broadcast(&self, k: usize) -> Result<Tensor> {
        let m = match *self.shape() {
            [m] => m,
            _ => return Err(Error::Shape(format!("row_broadcast of {:?}", self.shape()))),
        };
        let src = self.data();
        let data: Vec<f64> = src.iter().flat_map(|&v| std::iter::repeat(v).take(k)).collect();
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![m, k],
            &[self],
            backward_fn("row_broadcast", |_, g, _| Ok(vec![Some(g.row_sum()?)])),
        ))
    }

    /// Rows of `self` selected by `index` (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let (n, _) = dims2(self, "gather_rows")?;
        let sel = SparseMatrix::selection(index, n)?;
        Arc::new(sel).matmul(self)
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_start: Vec<usize>,
    col_index: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<SparseMatrix> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::Shape(format!(
                "sparse entry ({r}, {c}) outside {rows} x {cols}"
            )));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_start = vec![0; rows + 1];
        let mut col_index = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            row_start[r + 1] += 1;
            col_index.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_start[r + 1] += row_start[r];
        }
        Ok(SparseMatrix { rows, cols, row_start, col_index, values })
    }

    /// Row `i` picks row `index[i]` of an `n`-row operand.
    pub fn selection(index: &[usize], n: usize) -> Result<SparseMatrix> {
        SparseMatrix::from_triplets(index.len(), n, index.iter().enumerate().map(|(i, &j)| (i, j, 1.0)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn transpose(&self) -> SparseMatrix {
        let triplets = (0..self.rows).flat_map(|r| {
            (self.row_start[r]..self.row_start[r + 1]).map(move |e| (self.col_index[e], r, self.values[e]))
        });
        SparseMatrix::from_triplets(self.cols, self.rows, triplets.collect::<Vec<_>>())
            .expect("transpose of a valid matrix")
    }

    fn apply(&self, x: &[f64], k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * k];
        for r in 0..self.rows {
            let dst = &mut out[r * k..(r + 1) * k];
            for e in self.row_start[r]..self.row_start[r + 1] {
                let (c, v) = (self.col_index[e], self.values[e]);
                for (o, &xv) in dst.iter_mut().zip(&x[c * k..(c + 1) * k]) {
                    *o += v * xv;
                }
            }
        }
        out
    }
}

/// Sparse-dense product; shared so the transposed operator is built once.
pub(crate) trait SparseMatmul {
    fn matmul(&self, x: &Tensor) -> Result<Tensor>;
}

impl SparseMatmul for Arc<SparseMatrix> {
    fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        sparse_matmul(self.clone(), Arc::new(self.transpose()), x)
    }
}

fn sparse_matmul(s: Arc<SparseMatrix>, st: Arc<SparseMatrix>, x: &Tensor) -> Result<Tensor> {
    let (n, k) = dims2(x, "sparse matmul")?;
    if n != s.cols {
        return Err(Error::Shape(format!(
            "sparse matmul: {} x {} operator applied to {:?}",
            s.rows,
            s.cols,
            x.shape()
        )));
    }
    let data = s.apply(&x.data(), k);
    let rows = s.rows;
    Ok(Tensor::from_op(
        data,
        vec![rows, k],
        &[x],
        backward_fn("sparse_matmul", move |_, g, _| {
            Ok(vec![Some(sparse_matmul(st.clone(), s.clone(), g)?)])
        }),
    ))
}

impl Tensor {
    /// Product `s · self` with a constant sparse left operand.
    pub fn sparse_left_matmul(&self, s: &Arc<SparseMatrix>) -> Result<Tensor> {
        s.matmul(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(id.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 8));
        let w = rand_vec(&mut rng, 6);
        let report = check_gradients(&[a, b], &[&[3, 4], &[4, 2]], |x| {
            x[0].matmul(&x[1])?.flatten().mul(&Tensor::new(w.clone(), &[6])?).map(|t| t.sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn sparse_and_row_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Arc::new(
            SparseMatrix::from_triplets(3, 4, vec![(0, 1, 2.0), (2, 3, -1.0), (1, 0, 0.5), (2, 0, 1.5)])
                .unwrap(),
        );
        let x0 = rand_vec(&mut rng, 12);
        let y0 = rand_vec(&mut rng, 9);
        let report = GradCheck::default()
            .run(&[x0, y0], &[&[4, 3], &[3, 3]], |x| {
                let sx = x[0].sparse_left_matmul(&s)?;
                let c = sx.cross_rows(&x[1])?;
                let g = x[0].gather_rows(&[3, 3, 1])?;
                Ok(c.mul(&g)?.row_sum()?.square().sum())
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn duplicate_triplets_sum() {
        let s = SparseMatrix::from_triplets(1, 1, vec![(0, 0, 1.0), (0, 0, 2.0)]).unwrap();
        let x = Tensor::new(vec![2.0], &[1, 1]).unwrap();
        assert_eq!(x.sparse_left_matmul(&Arc::new(s)).unwrap().to_vec(), vec![6.0]);
    }
}
