//! Dense helpers for the small square matrices (d ≤ ~8) used throughout.
//!
//! Matrices are stored row-major in a flat `Vec<f64>` of length `d * d`.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = m * x` for a `d × d` matrix.
pub fn mat_vec(m: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|r| dot(&m[r * d..(r + 1) * d], x)).collect()
}

/// `out = mᵀ * x` for a `d × d` matrix.
pub fn mat_t_vec(m: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for r in 0..d {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for c in 0..d {
            out[c] += m[r * d + c] * xr;
        }
    }
    out
}

/// `xᵀ m y`.
pub fn bilinear(x: &[f64], m: &[f64], y: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for r in 0..d {
        if x[r] == 0.0 {
            continue;
        }
        acc += x[r] * dot(&m[r * d..(r + 1) * d], y);
    }
    acc
}

/// Frobenius inner product `⟨a, b⟩ = tr(aᵀ b)`.
pub fn frob(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

pub fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for k in 0..d {
            let a_rk = a[r * d + k];
            if a_rk == 0.0 {
                continue;
            }
            for c in 0..d {
                out[r * d + c] += a_rk * b[k * d + c];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            out[c * d + r] = a[r * d + c];
        }
    }
    out
}

pub fn diag(values: &[f64]) -> Vec<f64> {
    let d = values.len();
    let mut out = vec![0.0; d * d];
    for (i, v) in values.iter().enumerate() {
        out[i * d + i] = *v;
    }
    out
}

/// `m += alpha * x yᵀ`.
pub fn add_outer(m: &mut [f64], alpha: f64, x: &[f64], y: &[f64]) {
    let d = x.len();
    for r in 0..d {
        let s = alpha * x[r];
        if s == 0.0 {
            continue;
        }
        for c in 0..y.len() {
            m[r * d + c] += s * y[c];
        }
    }
}

/// Absolute cosine similarity; zero if either vector vanishes.
pub fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).abs()
}
