//! Rotary position embedding on adjacent pairs `(2i, 2i + 1)` of each head.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates every head of every row of `x` by its row's position.
///
/// Pair `i` of a head with dimension `head_dim` turns by
/// `pos * base^(-2i / head_dim)`.
pub fn apply_rotary(x: &Matrix, n_heads: usize, positions: &[usize]) -> Result<Matrix> {
    rotate(x, n_heads, positions, false)
}

/// Transpose of [`apply_rotary`]; maps gradients back through the rotation.
pub fn apply_rotary_inverse(x: &Matrix, n_heads: usize, positions: &[usize]) -> Result<Matrix> {
    rotate(x, n_heads, positions, true)
}

fn rotate(x: &Matrix, n_heads: usize, positions: &[usize], inverse: bool) -> Result<Matrix> {
    if n_heads == 0 || !x.cols.is_multiple_of(n_heads) {
        return Err(Error::InvalidConfig(format!(
            "{} columns do not split into {n_heads} heads",
            x.cols
        )));
    }
    let head_dim = x.cols / n_heads;
    if !head_dim.is_multiple_of(2) {
        return Err(Error::OddHeadDim(head_dim));
    }
    if positions.len() != x.rows {
        return Err(shape_err("rotary positions", &[x.rows], &[positions.len()]));
    }
    let freqs: Vec<f64> = (0..head_dim / 2)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = out.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (sign * pos as f64 * f).sin_cos();
            for h in 0..n_heads {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random(3, 8, 1.0, &mut rng);
        assert_eq!(apply_rotary(&x, 2, &[0, 0, 0]).unwrap(), x);
    }

    #[test]
    fn pair_norms_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::random(4, 16, 2.0, &mut rng);
        let y = apply_rotary(&x, 2, &[1, 17, 300, 4096]).unwrap();
        for (a, b) in x.data.chunks(2).zip(y.data.chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_position_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Matrix::random(1, 8, 1.0, &mut rng);
        let k = Matrix::random(1, 8, 1.0, &mut rng);
        let base = dot(
            &apply_rotary(&q, 1, &[7]).unwrap().data,
            &apply_rotary(&k, 1, &[3]).unwrap().data,
        );
        for c in [1usize, 10, 123] {
            let shifted = dot(
                &apply_rotary(&q, 1, &[7 + c]).unwrap().data,
                &apply_rotary(&k, 1, &[3 + c]).unwrap().data,
            );
            assert!((base - shifted).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_undoes_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::random(3, 8, 1.0, &mut rng);
        let pos = [2, 9, 40];
        let back = apply_rotary_inverse(&apply_rotary(&x, 2, &pos).unwrap(), 2, &pos).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let x = Matrix::zeros(1, 6);
        assert!(matches!(apply_rotary(&x, 2, &[1]), Err(Error::OddHeadDim(3))));
    }
}
