//! Normalized 2D query coordinates.
//!
//! The whole pipeline addresses image content through coordinates in
//! `[-1, 1]^2` (row axis first), with pixel centers at
//! `-1 + (2i + 1) / n` for axis length `n`. Each query also carries a cell
//! size: the height/width of the pixel footprint it is meant to cover, in the
//! same normalized units.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A list of normalized query coordinates paired with per-query cell sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    coords: Array2<f64>,
    cells: Array2<f64>,
}

impl CoordGrid {
    /// Build a grid from explicit coordinates and cells, validating that
    /// coordinates are componentwise in `[-1, 1]` and cells are positive.
    pub fn new(coords: Array2<f64>, cells: Array2<f64>) -> Result<Self> {
        if coords.shape() != cells.shape() || coords.ncols() != 2 {
            return Err(Error::arg(format!(
                "coordinate grid wants matching Nx2 arrays, got {:?} and {:?}",
                coords.shape(),
                cells.shape()
            )));
        }
        if coords.iter().any(|&c| !(-1.0..=1.0).contains(&c) || c.is_nan()) {
            return Err(Error::arg("coordinates must lie in [-1, 1]"));
        }
        if cells.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::arg("cell sizes must be strictly positive"));
        }
        Ok(CoordGrid { coords, cells })
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn cells(&self) -> &Array2<f64> {
        &self.cells
    }

    /// (row coord, col coord) of query `i`.
    pub fn coord(&self, i: usize) -> (f64, f64) {
        (self.coords[[i, 0]], self.coords[[i, 1]])
    }

    /// (cell height, cell width) of query `i`.
    pub fn cell(&self, i: usize) -> (f64, f64) {
        (self.cells[[i, 0]], self.cells[[i, 1]])
    }

    /// Subset of queries, in the given index order.
    pub fn select(&self, idx: &[usize]) -> CoordGrid {
        let mut coords = Array2::zeros((idx.len(), 2));
        let mut cells = Array2::zeros((idx.len(), 2));
        for (row, &i) in idx.iter().enumerate() {
            coords[[row, 0]] = self.coords[[i, 0]];
            coords[[row, 1]] = self.coords[[i, 1]];
            cells[[row, 0]] = self.cells[[i, 0]];
            cells[[row, 1]] = self.cells[[i, 1]];
        }
        CoordGrid { coords, cells }
    }

    /// Contiguous range of queries `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> CoordGrid {
        CoordGrid {
            coords: self.coords.slice(ndarray::s![start..end, ..]).to_owned(),
            cells: self.cells.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }
}

/// Pixel-center coordinate along one axis: `-1 + (2i + 1) / n`.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Full-resolution grid for an `h x w` image: `h * w` pixel-center queries in
/// row-major order, every cell `(2/h, 2/w)`.
pub fn make_coord_grid(h: usize, w: usize) -> Result<CoordGrid> {
    if h == 0 || w == 0 {
        return Err(Error::arg(format!(
            "coordinate grid dimensions must be positive, got {h}x{w}"
        )));
    }
    let n = h * w;
    let mut coords = Array2::zeros((n, 2));
    let mut cells = Array2::zeros((n, 2));
    let (ch, cw) = (2.0 / h as f64, 2.0 / w as f64);
    for i in 0..h {
        let rc = pixel_center(i, h);
        for j in 0..w {
            let k = i * w + j;
            coords[[k, 0]] = rc;
            coords[[k, 1]] = pixel_center(j, w);
            cells[[k, 0]] = ch;
            cells[[k, 1]] = cw;
        }
    }
    Ok(CoordGrid { coords, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_center_is_origin() {
        let g = make_coord_grid(1, 1).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.coord(0), (0.0, 0.0));
        assert_eq!(g.cell(0), (2.0, 2.0));
    }

    #[test]
    fn two_by_two_centers() {
        let g = make_coord_grid(2, 2).unwrap();
        let rows: Vec<f64> = (0..4).map(|i| g.coord(i).0).collect();
        assert_eq!(rows, vec![-0.5, -0.5, 0.5, 0.5]);
        let cols: Vec<f64> = (0..4).map(|i| g.coord(i).1).collect();
        assert_eq!(cols, vec![-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(g.cell(0), (1.0, 1.0));
    }

    #[test]
    fn three_by_five_spacing() {
        let g = make_coord_grid(3, 5).unwrap();
        assert_eq!(g.len(), 15);
        for i in 0..15 {
            let (r, c) = g.coord(i);
            assert!(r > -1.0 && r < 1.0 && c > -1.0 && c < 1.0);
        }
        // arithmetic progression along each axis
        for j in 1..5 {
            let d = g.coord(j).1 - g.coord(j - 1).1;
            assert!((d - 2.0 / 5.0).abs() < 1e-12);
        }
        let d = g.coord(5).0 - g.coord(0).0;
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coords_symmetric_about_zero() {
        for (h, w) in [(1, 1), (2, 3), (7, 4), (13, 13)] {
            let g = make_coord_grid(h, w).unwrap();
            let sum: f64 = g.coords().iter().sum();
            assert!(sum.abs() < 1e-9, "sum {sum} for {h}x{w}");
        }
    }

    #[test]
    fn row_major_strictly_increasing() {
        let g = make_coord_grid(4, 6).unwrap();
        for i in 1..g.len() {
            let a = g.coord(i - 1);
            let b = g.coord(i);
            assert!(b > a, "row-major order violated at {i}");
        }
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(make_coord_grid(0, 3).is_err());
        assert!(make_coord_grid(3, 0).is_err());
    }

    #[test]
    fn out_of_range_coords_rejected() {
        let coords = ndarray::array![[0.0, 1.5]];
        let cells = ndarray::array![[0.1, 0.1]];
        assert!(CoordGrid::new(coords, cells).is_err());
        let coords = ndarray::array![[0.0, 0.5]];
        let cells = ndarray::array![[0.0, 0.1]];
        assert!(CoordGrid::new(coords, cells).is_err());
    }
}
