//! Safe row-major wrappers over `matrixmultiply::dgemm`.

/// Strided view description: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct Layout {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl Layout {
    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

fn gemm(beta: f64, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], lc: Layout) {
    assert_eq!(la.cols, lb.rows, "inner dimensions differ");
    assert_eq!((lc.rows, lc.cols), (la.rows, lb.cols), "output shape");
    assert!(a.len() >= la.span() && b.len() >= lb.span() && c.len() >= lc.span());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        c[..lc.span()].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: every index reachable through the layouts is in bounds (checked
    // above) and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            la.rows,
            la.cols,
            lb.cols,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

fn row_major(rows: usize, cols: usize) -> Layout {
    Layout {
        rows,
        cols,
        rs: cols,
        cs: 1,
    }
}

fn transposed(rows: usize, cols: usize) -> Layout {
    // View of a row-major `cols × rows` matrix as `rows × cols`.
    Layout {
        rows,
        cols,
        rs: 1,
        cs: rows,
    }
}

/// `out[n×m] = x[n×k] · w[m×k]ᵀ` (a dense layer applied to each row of `x`).
pub(crate) fn matmul_nt(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, out: &mut [f64]) {
    gemm(
        0.0,
        x,
        row_major(n, k),
        w,
        transposed(k, m),
        out,
        row_major(n, m),
    );
}

/// `out[n×k] = y[n×m] · w[m×k]` (adjoint of [`matmul_nt`] with respect to `x`).
pub(crate) fn matmul_nn(y: &[f64], n: usize, m: usize, w: &[f64], k: usize, out: &mut [f64]) {
    gemm(
        0.0,
        y,
        row_major(n, m),
        w,
        row_major(m, k),
        out,
        row_major(n, k),
    );
}

/// `acc[m×k] += y[n×m]ᵀ · x[n×k]` (weight gradient of [`matmul_nt`]).
pub(crate) fn matmul_tn_acc(y: &[f64], n: usize, m: usize, x: &[f64], k: usize, acc: &mut [f64]) {
    gemm(
        1.0,
        y,
        transposed(m, n),
        x,
        row_major(n, k),
        acc,
        row_major(m, k),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        // a: n×k, b: k×m
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                c[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    fn fill(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn products_match_naive() {
        let (n, k, m) = (7, 5, 4);
        let x = fill(n * k, 0.37);
        let w = fill(m * k, 0.91);
        let y = fill(n * m, 0.13);

        let mut out = vec![0.0; n * m];
        matmul_nt(&x, n, k, &w, m, &mut out);
        let expect = naive(&x, n, k, &transpose(&w, m, k), m);
        assert!(out.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));

        let mut back = vec![0.0; n * k];
        matmul_nn(&y, n, m, &w, k, &mut back);
        let expect = naive(&y, n, m, &w, k);
        assert!(back.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));

        let mut acc = vec![1.0; m * k];
        matmul_tn_acc(&y, n, m, &x, k, &mut acc);
        let expect = naive(&transpose(&y, n, m), m, n, &x, k);
        assert!(acc
            .iter()
            .zip(&expect)
            .all(|(a, b)| (a - 1.0 - b).abs() < 1e-12));
    }
}
