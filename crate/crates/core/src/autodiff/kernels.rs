//! Hot loops shared by the forward and reverse passes.
//!
//! Every output element of [`gemm`] is accumulated as
//! `((0 + a0*b0) + a1*b1) + ...` with the inner index ascending, whatever
//! path (tiled or scalar tail) produced it. Results are therefore
//! bit-identical to a naive triple loop.

const MR: usize = 4;
const NR: usize = 16;

/// `C[m×n] = A[m×k] · B[k×n]`, all row-major.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let mut panel = vec![0.0f64; k * NR];
    let mut j = 0;
    while j + NR <= n {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = panel[p * NR..(p + 1) * NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        row[q] += av * brow[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            i += MR;
        }
        for ii in i..m {
            let arow = &a[ii * k..(ii + 1) * k];
            let mut acc = [0.0f64; NR];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &panel[p * NR..(p + 1) * NR];
                for q in 0..NR {
                    acc[q] += av * brow[q];
                }
            }
            c[ii * n + j..ii * n + j + NR].copy_from_slice(&acc);
        }
        j += NR;
    }
    if j < n {
        for ii in 0..m {
            let arow = &a[ii * k..(ii + 1) * k];
            for jj in j..n {
                let mut s = 0.0;
                for (p, &av) in arow.iter().enumerate() {
                    s += av * b[p * n + jj];
                }
                c[ii * n + jj] = s;
            }
        }
    }
    c
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}
