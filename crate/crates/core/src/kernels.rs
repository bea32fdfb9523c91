//! Dense kernels over row-major slices.
//!
//! Every reduction has a fixed association order so results are identical
//! across runs and machines.

use crate::tensor::Real;

#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Dot product with eight interleaved partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let o = c * 8;
        let (xa, xb) = (&a[o..o + 8], &b[o..o + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(crow, aik, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cij) in crow.iter_mut().enumerate() {
            *cij = *cij + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · d[m×n]`
pub fn gemm_tn<T: Real>(c: &mut [T], a: &[T], d: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &d[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(&mut c[kk * n..(kk + 1) * n], aik, drow);
        }
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gemm_variants_agree() {
        let a: alloc::vec::Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2×3
        let b: alloc::vec::Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm_nn(&mut c, &a, &b, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        for r in 0..3 {
            for s in 0..4 {
                bt[s * 3 + r] = b[r * 4 + s];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(&mut c2, &a, &bt, 2, 3, 4);
        assert_eq!(c, c2);
        let mut at = vec![0.0; 6];
        for r in 0..2 {
            for s in 0..3 {
                at[s * 2 + r] = a[r * 3 + s];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn(&mut c3, &at, &b, 3, 2, 4);
        assert_eq!(c, c3);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
