//! Dense row-major 3-D tensors and the masked activation/latent wrappers.

use nalgebra::DMatrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("tensor dimensions must all be >= 1, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("data length {got} does not match shape {shape:?}")]
    LengthMismatch { shape: [usize; 3], got: usize },
    #[error("mask has {got} entries, expected {expected}")]
    MaskShape { expected: usize, got: usize },
    #[error("mask selects no tokens")]
    EmptyMask,
    #[error("feature index map has length {got}, expected {expected}")]
    FeatureMapLength { expected: usize, got: usize },
    #[error("feature index map contains duplicate index {0}")]
    DuplicateFeature(usize),
}

/// Row-major tensor of shape `(d0, d1, d2)`; element `(a, b, c)` lives at
/// `(a * d1 + b) * d2 + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Tensor3<T> {
    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch { shape, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: T) -> Result<Self, TensorError> {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    data.push(f(a, b, c));
                }
            }
        }
        Self::from_vec(shape, data)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> T {
        self.data[(a * self.shape[1] + b) * self.shape[2] + c]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Number of (d0, d1) positions, i.e. tokens.
    pub fn n_tokens(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    /// The innermost fiber at token `t` (row-major token index).
    pub fn token(&self, t: usize) -> &[T] {
        let w = self.shape[2];
        &self.data[t * w..(t + 1) * w]
    }
}

fn check_mask(shape: [usize; 3], mask: &[bool]) -> Result<(), TensorError> {
    let expected = shape[0] * shape[1];
    if mask.len() != expected {
        return Err(TensorError::MaskShape { expected, got: mask.len() });
    }
    if !mask.iter().any(|&m| m) {
        return Err(TensorError::EmptyMask);
    }
    Ok(())
}

fn gather_rows(data: &Tensor3<f32>, mask: &[bool]) -> DMatrix<f64> {
    let kept: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    let width = data.shape()[2];
    DMatrix::from_fn(kept.len(), width, |r, c| data.token(kept[r])[c] as f64)
}

/// Residual-stream activations `(batch, seq, d_model)` with a token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    data: Tensor3<f32>,
    mask: Vec<bool>,
}

impl ActivationTensor {
    pub fn new(data: Tensor3<f32>, mask: Vec<bool>) -> Result<Self, TensorError> {
        check_mask(data.shape(), &mask)?;
        Ok(Self { data, mask })
    }

    /// All tokens kept.
    pub fn unmasked(data: Tensor3<f32>) -> Self {
        let mask = vec![true; data.n_tokens()];
        Self { data, mask }
    }

    pub fn data(&self) -> &Tensor3<f32> {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }

    pub fn d_model(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Rows at masked-in positions, in row-major scan order, upcast to f64.
    pub fn masked_rows(&self) -> DMatrix<f64> {
        gather_rows(&self.data, &self.mask)
    }

    pub fn into_parts(self) -> (Tensor3<f32>, Vec<bool>) {
        (self.data, self.mask)
    }
}

/// SAE latents `(batch, seq, d_sae)`, the input mask, and (after feature
/// downsampling) the original index of every retained feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Tensor3<f32>,
    mask: Vec<bool>,
    feature_index_map: Option<Vec<usize>>,
}

impl LatentTensor {
    pub fn new(
        data: Tensor3<f32>,
        mask: Vec<bool>,
        feature_index_map: Option<Vec<usize>>,
    ) -> Result<Self, TensorError> {
        check_mask(data.shape(), &mask)?;
        if let Some(map) = &feature_index_map {
            let d = data.shape()[2];
            if map.len() != d {
                return Err(TensorError::FeatureMapLength { expected: d, got: map.len() });
            }
            let mut seen = std::collections::HashSet::with_capacity(map.len());
            for &i in map {
                if !seen.insert(i) {
                    return Err(TensorError::DuplicateFeature(i));
                }
            }
        }
        Ok(Self { data, mask, feature_index_map })
    }

    pub fn data(&self) -> &Tensor3<f32> {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }

    pub fn d_sae(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn feature_index_map(&self) -> Option<&[usize]> {
        self.feature_index_map.as_deref()
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_rows(&self) -> DMatrix<f64> {
        gather_rows(&self.data, &self.mask)
    }

    /// Copy with masked-out tokens set to zero.
    pub fn with_masked_zeroed(&self) -> Tensor3<f32> {
        let mut out = self.data.clone();
        let w = self.d_sae();
        for (t, &keep) in self.mask.iter().enumerate() {
            if !keep {
                out.as_mut_slice()[t * w..(t + 1) * w].fill(0.0);
            }
        }
        out
    }
}
