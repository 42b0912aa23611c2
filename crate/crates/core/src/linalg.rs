//! Dense vector helpers on `f64` slices.
//!
//! Every reduction runs in index order so results are reproducible bit for
//! bit across runs and thread counts.

/// Norms at or below this floor are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unit vector along `v` together with `‖v‖`. Vectors with norm at or
/// below [`NORM_FLOOR`] map to the zero vector.
pub fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(v);
    if n <= NORM_FLOOR {
        return (vec![0.0; v.len()], n);
    }
    (v.iter().map(|x| x / n).collect(), n)
}

/// `out = M·x` for a row-major `rows × cols` matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&m[r * cols..(r + 1) * cols], x);
    }
}

/// `m += scale · a·bᵀ`.
pub fn add_outer(m: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut m[r * cols..(r + 1) * cols];
        for (slot, &bc) in row.iter_mut().zip(b) {
            *slot += scale * ar * bc;
        }
    }
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Rounds every component to the nearest `f32`.
pub fn quantize_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

pub fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}
