//! Simulation domain geometry and the field/permittivity maps living on it.
//!
//! Conventions used everywhere in this crate:
//!
//! * arrays are `(nx, nz)` in C order, indexed `[i, k]` with `i` along the
//!   transverse x axis and `k` along the propagation z axis;
//! * cell `(i, k)` sits at physical position `(i * dl_x, k * dl_z)`;
//! * the flat index of cell `(i, k)` is `i * nz + k`.

use ndarray::Array2;
use num_complex::Complex64;

use crate::{CoreError, Result};

/// Minimum cell count per axis.
pub const MIN_CELLS: usize = 8;

/// Required points-per-wavelength inside the densest material.
pub const POINTS_PER_WAVELENGTH: f64 = 10.0;

/// Rectangular simulation domain: cell counts and physical step sizes in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub nz: usize,
    pub dl_x: f64,
    pub dl_z: f64,
}

impl Grid2D {
    pub fn new(nx: usize, nz: usize, dl_x: f64, dl_z: f64) -> Result<Self> {
        if nx < MIN_CELLS || nz < MIN_CELLS {
            return Err(CoreError::InvalidArg(format!(
                "grid must be at least {MIN_CELLS}x{MIN_CELLS} cells, got {nx}x{nz}"
            )));
        }
        if !(dl_x > 0.0 && dl_x.is_finite()) || !(dl_z > 0.0 && dl_z.is_finite()) {
            return Err(CoreError::InvalidArg(format!(
                "step sizes must be positive and finite, got dl_x={dl_x}, dl_z={dl_z}"
            )));
        }
        Ok(Self { nx, nz, dl_x, dl_z })
    }

    /// Square grid with a uniform step.
    pub fn square(n: usize, dl: f64) -> Result<Self> {
        Self::new(n, n, dl, dl)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.nz
    }

    /// Checks `dl <= lambda / 10` on both axes: at least ten cells per
    /// vacuum wavelength for any wavelength simulated on the grid.
    pub fn check_resolution(&self, lambda: f64, eps_max: f64) -> Result<()> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CoreError::InvalidArg(format!(
                "wavelength must be positive and finite, got {lambda}"
            )));
        }
        if !(eps_max >= 1.0 && eps_max.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "relative permittivity must be finite and >= 1, got max {eps_max}"
            )));
        }
        let limit = lambda / POINTS_PER_WAVELENGTH;
        let dl = self.dl_x.max(self.dl_z);
        if dl > limit * (1.0 + 1e-12) {
            return Err(CoreError::Resolution {
                dl,
                lambda,
                eps_max,
            });
        }
        Ok(())
    }
}

/// Half-open rectangular cell-index region `[x0, x1) x [z0, z1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignBox {
    pub x0: usize,
    pub x1: usize,
    pub z0: usize,
    pub z1: usize,
}

impl DesignBox {
    pub fn new(x0: usize, x1: usize, z0: usize, z1: usize) -> Result<Self> {
        if x0 >= x1 || z0 >= z1 {
            return Err(CoreError::InvalidArg(format!(
                "degenerate design box [{x0},{x1})x[{z0},{z1})"
            )));
        }
        Ok(Self { x0, x1, z0, z1 })
    }

    /// Box covering an entire grid.
    pub fn full(grid: &Grid2D) -> Self {
        Self {
            x0: 0,
            x1: grid.nx,
            z0: 0,
            z1: grid.nz,
        }
    }

    pub fn fits(&self, grid: &Grid2D) -> bool {
        self.x1 <= grid.nx && self.z1 <= grid.nz
    }

    pub fn contains(&self, i: usize, k: usize) -> bool {
        i >= self.x0 && i < self.x1 && k >= self.z0 && k < self.z1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn depth(&self) -> usize {
        self.z1 - self.z0
    }

    pub fn area(&self) -> usize {
        self.width() * self.depth()
    }
}

/// Relative permittivity per cell plus the design region it was drawn in.
///
/// Generated maps are two-valued: every cell holds either `material_pair.0`
/// (air, always 1.0) or `material_pair.1`.
#[derive(Debug, Clone)]
pub struct PermittivityMap {
    pub grid: Grid2D,
    pub eps: Array2<f64>,
    pub design_box: DesignBox,
    pub material_pair: (f64, f64),
}

impl PermittivityMap {
    /// Homogeneous air-filled map with the given design box.
    pub fn homogeneous(grid: Grid2D, design_box: DesignBox) -> Result<Self> {
        if !design_box.fits(&grid) {
            return Err(CoreError::InvalidArg(
                "design box exceeds grid".to_string(),
            ));
        }
        Ok(Self {
            grid,
            eps: Array2::from_elem((grid.nx, grid.nz), 1.0),
            design_box,
            material_pair: (1.0, 1.0),
        })
    }

    pub fn new(
        grid: Grid2D,
        eps: Array2<f64>,
        design_box: DesignBox,
        material_pair: (f64, f64),
    ) -> Result<Self> {
        if eps.dim() != (grid.nx, grid.nz) {
            return Err(CoreError::ShapeMismatch(format!(
                "eps is {:?}, grid is ({}, {})",
                eps.dim(),
                grid.nx,
                grid.nz
            )));
        }
        if !design_box.fits(&grid) {
            return Err(CoreError::InvalidArg(
                "design box exceeds grid".to_string(),
            ));
        }
        if material_pair.0 != 1.0 || material_pair.1 < material_pair.0 {
            return Err(CoreError::InvalidArg(format!(
                "material pair must be (1.0, eps_material >= 1.0), got {material_pair:?}"
            )));
        }
        if eps.iter().any(|&v| !v.is_finite() || v < 1.0) {
            return Err(CoreError::NonFinite(
                "permittivity must be finite and >= 1 everywhere".to_string(),
            ));
        }
        Ok(Self {
            grid,
            eps,
            design_box,
            material_pair,
        })
    }

    pub fn eps_max(&self) -> f64 {
        self.eps.iter().fold(1.0_f64, |a, &b| a.max(b))
    }

    /// Material fraction inside the design box.
    pub fn fill_fraction(&self) -> f64 {
        let b = self.design_box;
        let mut filled = 0usize;
        for i in b.x0..b.x1 {
            for k in b.z0..b.z1 {
                if self.eps[[i, k]] > self.material_pair.0 {
                    filled += 1;
                }
            }
        }
        filled as f64 / b.area() as f64
    }
}

/// Complex scalar electric field over a grid; units are fixed by the unit
/// source amplitude of the solve that produced it.
#[derive(Debug, Clone)]
pub struct ComplexField {
    pub grid: Grid2D,
    pub values: Array2<Complex64>,
}

impl ComplexField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: Array2::from_elem((grid.nx, grid.nz), Complex64::new(0.0, 0.0)),
        }
    }

    pub fn new(grid: Grid2D, values: Array2<Complex64>) -> Result<Self> {
        if values.dim() != (grid.nx, grid.nz) {
            return Err(CoreError::ShapeMismatch(format!(
                "field is {:?}, grid is ({}, {})",
                values.dim(),
                grid.nx,
                grid.nz
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(CoreError::NonFinite("field has non-finite cells".to_string()));
        }
        Ok(Self { grid, values })
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }
}
