use serde::{Deserialize, Serialize};

/// Dense row-major `f64` array with up to four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates two `[B, n]` tensors along the feature axis.
    pub fn concat_features(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape.len(), 2);
        assert_eq!(b.shape.len(), 2);
        assert_eq!(a.shape[0], b.shape[0]);
        let (batch, na, nb) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = Vec::with_capacity(batch * (na + nb));
        for i in 0..batch {
            data.extend_from_slice(&a.data[i * na..(i + 1) * na]);
            data.extend_from_slice(&b.data[i * nb..(i + 1) * nb]);
        }
        Tensor::new(vec![batch, na + nb], data)
    }

    /// Inverse of [`Tensor::concat_features`].
    pub fn split_features(t: &Tensor, na: usize) -> (Tensor, Tensor) {
        let (batch, n) = (t.shape[0], t.shape[1]);
        let nb = n - na;
        let mut a = Vec::with_capacity(batch * na);
        let mut b = Vec::with_capacity(batch * nb);
        for i in 0..batch {
            a.extend_from_slice(&t.data[i * n..i * n + na]);
            b.extend_from_slice(&t.data[i * n + na..(i + 1) * n]);
        }
        (
            Tensor::new(vec![batch, na], a),
            Tensor::new(vec![batch, nb], b),
        )
    }
}

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]);
        let c = Tensor::concat_features(&a, &b);
        assert_eq!(c.data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (a2, b2) = Tensor::split_features(&c, 2);
        assert_eq!((a2, b2), (a, b));
    }
}
