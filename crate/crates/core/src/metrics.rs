use crate::error::{HlaError, Result};
use crate::matrix::Matrix;

const REL_FLOOR: f64 = 1e-12;

/// Largest entrywise `|a-b| / max(1e-12, |a|, |b|)`.
pub fn max_rel_err(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(HlaError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(max_rel_err_slices(a.as_slice(), b.as_slice()))
}

pub fn max_rel_err_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

#[inline]
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / REL_FLOOR.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(v: &[f64]) -> Matrix {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn examples() {
        let x = m(&[1.0, -2.0, 3.5]);
        assert_eq!(max_rel_err(&x, &x).unwrap(), 0.0);
        let e = max_rel_err(&m(&[1.0]), &m(&[1.0 + 1e-10])).unwrap();
        assert!((e - 1e-10).abs() < 1e-15, "{e}");
        assert_eq!(max_rel_err(&m(&[0.0]), &m(&[0.0])).unwrap(), 0.0);
        assert!(max_rel_err(&m(&[0.0]), &m(&[0.0, 1.0])).is_err());
    }

    proptest! {
        #[test]
        fn symmetric(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            prop_assert_eq!(rel_err(a, b), rel_err(b, a));
        }

        #[test]
        fn zero_iff_equal(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let e = rel_err(a, b);
            prop_assert_eq!(e == 0.0, a == b);
        }
    }
}
