use super::Real;
use crate::exec::Exec;

/// `a[m×k] · b[k×n]`, row-major.
pub fn matmul<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    exec.for_each_row(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Rows per partial sum in [`matmul_at_b`]. Fixed, so the summation order
/// and therefore the result do not depend on the execution mode.
const AT_B_CHUNK: usize = 512;

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result `k×n`.
pub fn matmul_at_b<T: Real>(exec: Exec, a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let chunks = m.div_ceil(AT_B_CHUNK);
    let partials = exec.map_range(chunks, |c| {
        let mut out = vec![T::zero(); k * n];
        for i in c * AT_B_CHUNK..((c + 1) * AT_B_CHUNK).min(m) {
            let g_row = &g[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
        out
    });
    let mut parts = partials.into_iter();
    let mut out = parts.next().unwrap_or_else(|| vec![T::zero(); k * n]);
    for part in parts {
        out.iter_mut().zip(&part).for_each(|(o, &v)| *o += v);
    }
    out
}

/// `g · bᵀ` where `g` is `m×n` and `b` is `k×n`; result `m×k`.
pub fn matmul_a_bt<T: Real>(exec: Exec, g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul(exec, g, &bt, m, n, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn transposed_products_match_naive() {
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).sin()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| i as f64 - 4.0).collect();

        let c = matmul(Exec::Sequential, &a, &b, m, k, n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let atg = matmul_at_b(Exec::Parallel, &a, &g, m, k, n);
        for (x, y) in atg.iter().zip(naive(&at, &g, k, m, n)) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let gbt = matmul_a_bt(Exec::Parallel, &g, &b, m, k, n);
        for (x, y) in gbt.iter().zip(naive(&g, &bt, m, n, k)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
