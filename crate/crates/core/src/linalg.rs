//! Dense row-major helpers. Everything here is plain `f64` slices; shapes are
//! passed explicitly and checked with debug assertions only.

/// `a (m×k) · b (k×n) -> (m×n)`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` with `a (m×k)`, `b (m×n)`, accumulated into `out (k×n)`.
pub fn matmul_at_b_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m×n) · bᵀ` with `b (k×n)` -> `(m×k)`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    softmax_in_place(&mut v);
    v
}

pub fn frobenius(a: &[f64]) -> f64 {
    norm(a)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalisation with gain. Returns the normalised rows and the
/// per-row RMS used, which the backward pass needs.
pub fn rmsnorm(x: &[f64], gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut rms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = dot(row, row) / d as f64;
        let s = (ms + RMS_EPS).sqrt();
        rms.push(s);
        for j in 0..d {
            out[r * d + j] = row[j] / s * gain[j];
        }
    }
    (out, rms)
}

/// Backward of [`rmsnorm`]. Accumulates into `dgain` and returns `dx`.
pub fn rmsnorm_backward(
    x: &[f64],
    gain: &[f64],
    rms: &[f64],
    dout: &[f64],
    dgain: &mut [f64],
) -> Vec<f64> {
    let d = gain.len();
    let mut dx = vec![0.0; x.len()];
    let mut dy = vec![0.0; d];
    let mut y = vec![0.0; d];
    for (r, &s) in rms.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dr = &dout[r * d..(r + 1) * d];
        for j in 0..d {
            y[j] = xr[j] / s;
            dy[j] = dr[j] * gain[j];
            dgain[j] += dr[j] * y[j];
        }
        let proj = dot(&dy, &y) / d as f64;
        for j in 0..d {
            dx[r * d + j] = (dy[j] - y[j] * proj) / s;
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3×2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // 2×3 == bᵀ
        assert_eq!(matmul_a_bt(&a, &bt, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        let mut out = vec![0.0; 9];
        matmul_at_b_acc(&mut out, &a, &a, 2, 3, 3);
        assert_eq!(out[0], 1.0 + 16.0);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), None);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
