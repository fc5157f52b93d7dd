use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::StrataError;
use crate::tensor::Tensor3;

/// Tensor mode used for unfolding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Batch,
    Seq,
    Feature,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Batch, Mode::Seq, Mode::Feature];

    /// 1-based mode number.
    pub fn from_index(i: usize) -> Result<Mode, StrataError> {
        match i {
            1 => Ok(Mode::Batch),
            2 => Ok(Mode::Seq),
            3 => Ok(Mode::Feature),
            other => Err(StrataError::BadMode(other)),
        }
    }

    pub fn axis(self) -> usize {
        match self {
            Mode::Batch => 0,
            Mode::Seq => 1,
            Mode::Feature => 2,
        }
    }
}

/// Mode-`i` matricization: row = index along `mode`, column = row-major
/// combination of the two remaining indices in ascending mode order.
pub fn unfold(t: &Tensor3<f32>, mode: Mode) -> DMatrix<f64> {
    let [i1, i2, i3] = t.shape();
    match mode {
        Mode::Batch => DMatrix::from_fn(i1, i2 * i3, |a, col| t.get(a, col / i3, col % i3) as f64),
        Mode::Seq => DMatrix::from_fn(i2, i1 * i3, |b, col| t.get(col / i3, b, col % i3) as f64),
        Mode::Feature => DMatrix::from_fn(i3, i1 * i2, |c, col| t.get(col / i2, col % i2, c) as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_tensor() {
        let t = Tensor3::from_vec([1, 1, 1], vec![5.0f32]).unwrap();
        for m in Mode::ALL {
            assert_eq!(unfold(&t, m), DMatrix::from_element(1, 1, 5.0));
        }
    }

    #[test]
    fn mode3_fiber_enumeration() {
        let t = Tensor3::from_fn([2, 2, 2], |a, b, c| (4 * a + 2 * b + c) as f32).unwrap();
        let f = unfold(&t, Mode::Feature);
        assert_eq!(f.shape(), (2, 4));
        for c in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    assert_eq!(f[(c, a * 2 + b)], (4 * a + 2 * b + c) as f64);
                }
            }
        }
    }

    #[test]
    fn mode1_and_mode2_index_arithmetic() {
        let t = Tensor3::from_fn([2, 3, 4], |a, b, c| (100 * a + 10 * b + c) as f32).unwrap();
        let f1 = unfold(&t, Mode::Batch);
        let f2 = unfold(&t, Mode::Seq);
        assert_eq!(f1.shape(), (2, 12));
        assert_eq!(f2.shape(), (3, 8));
        assert_eq!(f1[(1, 2 * 4 + 3)], 123.0);
        assert_eq!(f2[(2, 4 + 3)], 123.0);
    }

    #[test]
    fn zero_tensor_and_bad_mode() {
        let t = Tensor3::filled([2, 3, 4], 0.0f32).unwrap();
        assert_eq!(unfold(&t, Mode::Seq), DMatrix::zeros(3, 8));
        assert_eq!(Mode::from_index(0), Err(StrataError::BadMode(0)));
        assert_eq!(Mode::from_index(4), Err(StrataError::BadMode(4)));
    }
}
