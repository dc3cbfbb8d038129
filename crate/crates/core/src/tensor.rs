//! Dense row-major tensors and the raw kernels shared by the autodiff tape.
//!
//! The element type is fixed at build time: `f64` by default, `f32` with the
//! `f32` cargo feature. Every equivalence test in this crate assumes `f64`.

use crate::error::{Result, SpdError};

#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;

/// Size in bytes of one tensor element.
pub const ELEM_SIZE: usize = std::mem::size_of::<Elem>();

/// Name of the element type, as written into checkpoint headers.
#[cfg(not(feature = "f32"))]
pub const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Elem>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Elem>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SpdError::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Elem) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: Elem) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<Elem>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SpdError::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Elem> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Elem {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(SpdError::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[Elem] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(SpdError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Elem) -> Elem) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Elem, Elem) -> Elem) -> Result<Self> {
        same_shape(self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: Elem) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape(self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> Elem {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Matrix product `self · rhs`.
    ///
    /// Each output element accumulates its products in ascending inner-index
    /// order, so results match a naive triple loop bit for bit.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(SpdError::Dimension(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[p * n..(p + 1) * n];
                for (c, &b) in crow.iter_mut().zip(brow) {
                    *c += a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + len > c {
            return Err(SpdError::Dimension(format!(
                "column slice {start}..{} out of {c}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Self::new(vec![r, len], out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            return Err(SpdError::Dimension(format!(
                "row slice {start}..{} out of {r}",
                start + len
            )));
        }
        Self::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    /// Slice of a rank-1 tensor.
    pub fn slice_vec(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() != 1 || start + len > self.numel() {
            return Err(SpdError::Dimension(format!(
                "vector slice {start}..{} of shape {:?}",
                start + len,
                self.shape
            )));
        }
        Self::new(vec![len], self.data[start..start + len].to_vec())
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Self> {
        let rows = match parts.first() {
            Some(p) => p.dims2()?.0,
            None => return Err(SpdError::Dimension("concat of nothing".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(SpdError::Dimension("concat_cols row mismatch".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Self::new(vec![rows, total], out)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.dims2()?.1,
            None => return Err(SpdError::Dimension("concat of nothing".into())),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(SpdError::Dimension("concat_rows column mismatch".into()));
            }
            rows += r;
            out.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], out)
    }

    pub fn concat_vec(parts: &[Tensor]) -> Result<Self> {
        let mut out = Vec::new();
        for p in parts {
            if p.rank() != 1 {
                return Err(SpdError::Dimension("concat_vec expects vectors".into()));
            }
            out.extend_from_slice(&p.data);
        }
        let n = out.len();
        Self::new(vec![n], out)
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over all elements.
    pub fn max_rel_diff(&self, other: &Tensor, floor: Elem) -> Result<Elem> {
        same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, Elem::max))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Elem> {
        same_shape(self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(0.0, Elem::max))
    }

    /// Raw little-endian bytes of the element buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(SpdError::Dimension(format!("shape mismatch: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_and_selection() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, SpdError::Dimension(_)));
    }

    #[test]
    fn slicing_and_concat_reassemble() {
        let t = Tensor::new(vec![2, 4], (0..8).map(|v| v as Elem).collect()).unwrap();
        let l = t.slice_cols(0, 1).unwrap();
        let r = t.slice_cols(1, 3).unwrap();
        assert_eq!(Tensor::concat_cols(&[l, r]).unwrap(), t);
        let top = t.slice_rows(0, 1).unwrap();
        let bottom = t.slice_rows(1, 1).unwrap();
        assert_eq!(Tensor::concat_rows(&[top, bottom]).unwrap(), t);
        assert!(t.slice_cols(3, 2).is_err());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
        assert_eq!(t.transpose().unwrap().shape(), &[3, 2]);
    }
}
