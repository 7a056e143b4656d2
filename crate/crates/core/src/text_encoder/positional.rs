use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Sinusoidal position table: `PE(i, 2k) = sin(i / 10000^(2k/w))`, `PE(i, 2k+1) = cos(...)`.
pub fn sinusoidal_table<T: Scalar>(positions: usize, width: usize) -> Matrix<T> {
    let mut pe = Matrix::zeros(positions, width);
    for i in 0..positions {
        for j in 0..width {
            let pair = (j / 2) as f64;
            let angle = i as f64 / 10000f64.powf(2.0 * pair / width as f64);
            pe[(i, j)] = T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Embeds a length-`p` id sequence and adds sinusoidal positions.
///
/// Returns the `p × w` matrix and a mask that is `false` at padding positions.
pub fn positional_encode<T: Scalar>(
    tokens: &[usize],
    table: &Matrix<T>,
) -> Result<(Matrix<T>, Vec<bool>)> {
    let w = table.cols();
    let mut out = sinusoidal_table::<T>(tokens.len(), w);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= table.rows() {
            return Err(Error::TokenOutOfRange {
                id: t,
                size: table.rows(),
            });
        }
        for (o, &e) in out.row_mut(i).iter_mut().zip(table.row(t)) {
            *o += e;
        }
    }
    Ok((out, tokens.iter().map(|&t| t != PAD_ID).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Matrix<f64> {
        let mut t = Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.1).collect());
        t.row_mut(PAD_ID).fill(0.0);
        t
    }

    #[test]
    fn all_padding_is_pure_position_signal() {
        let (x, mask) = positional_encode(&[0, 0, 0], &table()).unwrap();
        assert_eq!(x, sinusoidal_table(3, 4));
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn position_zero_even_channels_are_zero() {
        let pe = sinusoidal_table::<f64>(2, 6);
        for j in (0..6).step_by(2) {
            assert_eq!(pe[(0, j)], 0.0);
        }
        assert_eq!(pe[(0, 1)], 1.0);
    }

    #[test]
    fn same_token_rows_differ_by_position_only() {
        let (x, _) = positional_encode(&[2, 1, 2], &table()).unwrap();
        let pe = sinusoidal_table::<f64>(3, 4);
        for j in 0..4 {
            assert!(((x[(2, j)] - x[(0, j)]) - (pe[(2, j)] - pe[(0, j)])).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_token() {
        assert!(matches!(
            positional_encode(&[5], &table()),
            Err(Error::TokenOutOfRange { id: 5, size: 3 })
        ));
    }
}
