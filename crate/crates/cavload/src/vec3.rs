//! Minimal 3-vector helpers over `[f64; 3]`.
//!
//! The force loops are the hot path of the simulator; plain arrays keep them
//! allocation-free and easy for the compiler to vectorize.

pub type V3 = [f64; 3];

#[inline(always)]
pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline(always)]
pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline(always)]
pub fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline(always)]
pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline(always)]
pub fn norm2(a: V3) -> f64 {
    dot(a, a)
}

#[inline(always)]
pub fn norm(a: V3) -> f64 {
    norm2(a).sqrt()
}

#[inline(always)]
pub fn axpy(y: &mut V3, alpha: f64, x: V3) {
    y[0] += alpha * x[0];
    y[1] += alpha * x[1];
    y[2] += alpha * x[2];
}

pub fn normalized(a: V3) -> Option<V3> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

pub fn is_finite(a: V3) -> bool {
    a[0].is_finite() && a[1].is_finite() && a[2].is_finite()
}

/// Solve the 3x3 linear system `m x = b` by Gaussian elimination with
/// partial pivoting. Returns `None` when the matrix is numerically singular.
pub fn solve3(m: [[f64; 3]; 3], b: V3) -> Option<V3> {
    let mut a = [
        [m[0][0], m[0][1], m[0][2], b[0]],
        [m[1][0], m[1][1], m[1][2], b[1]],
        [m[2][0], m[2][1], m[2][2], b[2]],
    ];
    let scale_ref = a
        .iter()
        .flat_map(|row| row[..3].iter())
        .fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale_ref == 0.0 {
        return None;
    }
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-14 * scale_ref {
            return None;
        }
        a.swap(col, pivot_row);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = a[row][3];
        for k in (row + 1)..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    if is_finite(x) {
        Some(x)
    } else {
        None
    }
}
