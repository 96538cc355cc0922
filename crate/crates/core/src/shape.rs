//! Tensor shapes.

use crate::error::{CfilError, Result};

/// Ordered list of positive extents. Layout is always row-major and batched
/// image tensors are ordered N x C x H x W.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(CfilError::Contract("shape must have at least one extent".into()));
        }
        let mut count: usize = 1;
        for &d in &dims {
            if d == 0 {
                return Err(CfilError::Contract(format!(
                    "shape extents must be >= 1, got {dims:?}"
                )));
            }
            count = count.checked_mul(d).ok_or_else(|| {
                CfilError::Capacity(format!("element count of {dims:?} overflows"))
            })?;
        }
        let _ = count;
        Ok(Shape { dims })
    }

    /// Panicking constructor for literals that are known valid.
    pub fn of(dims: &[usize]) -> Self {
        Shape::new(dims.to_vec()).expect("valid shape literal")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1 by construction
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_is_product() {
        let s = Shape::of(&[2, 3, 4]);
        assert_eq!(s.len(), 24);
        assert_eq!(s.rank(), 3);
        assert_eq!(s.to_string(), "2x3x4");
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Shape::new(vec![2, 0, 3]).is_err());
        assert!(Shape::new(vec![]).is_err());
    }

    #[test]
    fn overflow_rejected() {
        assert!(Shape::new(vec![usize::MAX, 2]).is_err());
    }
}
