//! Plain matrix kernels. All of them accumulate into `out` and visit the
//! reduction axis in a fixed order, so results do not depend on the number
//! of rows being processed.

use super::Real;

const LANES: usize = 8;

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [R::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..(c + 1) * LANES];
        let xb = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = R::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = R::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
pub fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const TILE_N: usize = 8;

/// Accumulates an `MR × TILE_N` output tile in registers from packed panels:
/// `MR` left-operand values and `TILE_N` right-operand values per reduction
/// index. Only the first `width` columns are written back.
#[inline(always)]
fn tile<R: Real, const MR: usize>(apanel: &[R], bpanel: &[R], out: &mut [R], n: usize, j0: usize, width: usize) {
    let mut acc = [[R::zero(); TILE_N]; MR];
    for (av, bv) in apanel.chunks_exact(MR).zip(bpanel.chunks_exact(TILE_N)) {
        let av: &[R; MR] = av.try_into().unwrap();
        let bv: &[R; TILE_N] = bv.try_into().unwrap();
        for r in 0..MR {
            for c in 0..TILE_N {
                acc[r][c] += av[r] * bv[c];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        let o = &mut out[r * n + j0..r * n + j0 + width];
        for c in 0..width {
            o[c] += row[c];
        }
    }
}

/// Shared driver: `out[m×n] += A[m×k] · B[k×n]` with `a_at(i, p)` and
/// `b_at(p, j)` reading the operands. Each output element is `out + Σ_p`
/// with `p` ascending, whatever the tiling.
fn gemm<R: Real>(
    a_at: impl Fn(usize, usize) -> R,
    b_at: impl Fn(usize, usize) -> R,
    out: &mut [R],
    m: usize,
    k: usize,
    n: usize,
) {
    let strips = n.div_ceil(TILE_N);
    let mut bpack = vec![R::zero(); strips * k * TILE_N];
    for s in 0..strips {
        let width = (n - s * TILE_N).min(TILE_N);
        let panel = &mut bpack[s * k * TILE_N..(s + 1) * k * TILE_N];
        for p in 0..k {
            for c in 0..width {
                panel[p * TILE_N + c] = b_at(p, s * TILE_N + c);
            }
        }
    }
    let mut apack = vec![R::zero(); 4 * k];
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(4);
        for p in 0..k {
            for r in 0..rows {
                apack[p * rows + r] = a_at(i + r, p);
            }
        }
        let apanel = &apack[..rows * k];
        let o = &mut out[i * n..(i + rows) * n];
        for s in 0..strips {
            let j0 = s * TILE_N;
            let w = (n - j0).min(TILE_N);
            let bpanel = &bpack[s * k * TILE_N..(s + 1) * k * TILE_N];
            match rows {
                4 => tile::<R, 4>(apanel, bpanel, o, n, j0, w),
                3 => tile::<R, 3>(apanel, bpanel, o, n, j0, w),
                2 => tile::<R, 2>(apanel, bpanel, o, n, j0, w),
                _ => tile::<R, 1>(apanel, bpanel, o, n, j0, w),
            }
        }
        i += rows;
    }
}

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_nn<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    gemm(|i, p| a[i * k + p], |p, j| b[p * n + j], out, m, k, n);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    gemm(|i, p| a[i * k + p], |p, j| b[j * k + p], out, m, k, n);
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    gemm(|i, p| a[p * k + i], |p, j| b[p * n + j], out, k, m, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c, m, k, n);
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&a, &transpose(&b, k, n), &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        matmul_tn(&transpose(&a, m, k), &b, &mut c3, k, m, n);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }
}
