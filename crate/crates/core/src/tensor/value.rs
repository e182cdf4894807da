//! Dense row-major tensors of 64-bit reals.

use crate::error::{Error, Result};

/// A dense n-dimensional array, row-major. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(TensorValue { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorValue { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        TensorValue { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        TensorValue { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        TensorValue { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Report NaN/Inf entries; used before optimizer steps and at data load.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{what} at flat index {i}: {v}")));
            }
        }
        Ok(())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }
}

pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Right-aligned broadcast result shape, or a shape error.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        }
    }
    Ok(out)
}

/// Strides of `shape` expanded to `out_rank` dims, 0 where broadcast.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides_for(shape);
    let offset = rank - shape.len();
    let mut s = vec![0usize; rank];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by collapsing
/// broadcast dimensions.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let rank = grad_shape.len();
    let t_strides = broadcast_strides(target_shape, grad_shape);
    let mut coords = vec![0usize; rank];
    for &g in grad.iter() {
        let mut t_flat = 0;
        for d in 0..rank {
            t_flat += coords[d] * t_strides[d];
        }
        out[t_flat] += g;
        // advance coords
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_has_numel_one() {
        let s = TensorValue::scalar(3.5);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(TensorValue::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn broadcast_shapes_align_right() {
        assert_eq!(broadcast_shape(&[3, 1, 4], &[2, 4]).unwrap(), vec![3, 2, 4]);
        assert_eq!(broadcast_shape(&[5], &[]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[3, 2], &[4, 2]).is_err());
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_dims() {
        // grad shape [2,3] -> target [1,3]
        let g = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = reduce_to_shape(&g, &[2, 3], &[1, 3]);
        assert_eq!(r, vec![5.0, 7.0, 9.0]);
        // down to scalar-ish [1,1]
        let r2 = reduce_to_shape(&g, &[2, 3], &[1, 1]);
        assert_eq!(r2, vec![21.0]);
    }

    #[test]
    fn validate_finite_reports_nan() {
        let mut t = TensorValue::zeros(&[3]);
        t.data_mut()[1] = f64::NAN;
        assert!(t.validate_finite("t").is_err());
    }
}
