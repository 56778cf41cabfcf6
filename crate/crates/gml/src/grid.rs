//! Dense numeric grids.
//!
//! A [`Grid`] is a rank-2 (default) or rank-3 scalar field in row-major
//! order: images, per-cell probability maps, and binary masks all share this
//! one representation. `ProbabilityGrid` and `MaskGrid` are role aliases, not
//! distinct types; their invariants (values in `[0,1]`, values in `{0,1}`)
//! are checked where an operation relies on them.

use crate::error::{GmlError, Result};

/// Dense row-major scalar field with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Role alias: a [`Grid`] whose values lie in `[0, 1]`.
pub type ProbabilityGrid = Grid;
/// Role alias: a [`Grid`] whose values lie in `{0, 1}`.
pub type MaskGrid = Grid;

impl Grid {
    /// Grid of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: f64) -> Result<Grid> {
        Self::check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Grid {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Grid> {
        Grid::new(shape, 0.0)
    }

    pub fn zeros_like(other: &Grid) -> Grid {
        Grid {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    /// Build a grid from row-major data; the length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Grid> {
        Self::check_shape(shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(GmlError::InvalidShape(format!(
                "data length {} does not match shape {:?} (expected {expect})",
                data.len(),
                shape
            )));
        }
        Ok(Grid {
            shape: shape.to_vec(),
            data,
        })
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() {
            return Err(GmlError::InvalidShape("empty shape".into()));
        }
        if shape.contains(&0) {
            return Err(GmlError::InvalidShape(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape == other.shape
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Elementwise map into a new grid.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn map2(a: &Grid, b: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        if !a.same_shape(b) {
            return Err(GmlError::ShapeMismatch(format!(
                "map2 on {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        Ok(Grid {
            shape: a.shape.clone(),
            data: a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    /// All values in `{0, 1}` (exact comparison).
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// All values in `[0, 1]`.
    pub fn is_probability(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

impl std::ops::Index<usize> for Grid {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Grid {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}
