//! Uniform 3D grids and field states.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid spacing must be positive and axes nonempty")]
    BadSpec,
    #[error("sponge width {0} below the 8-cell minimum")]
    SpongeTooThin(usize),
    #[error("field length {found} does not match grid size {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot header: {0}")]
    Header(String),
}

/// Uniform cubic-cell grid over a rectangular box.
///
/// Nodes sit at `lower + (i + 1/2) h` per axis (cell centers), which keeps the
/// midpoint quadrature `sum × h³` exact for the cell decomposition and keeps
/// the origin off-node for `1/|x|`-type integrands.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub lower: [f64; 3],
    pub n: [usize; 3],
    /// Cell spacing, identical on all axes.
    pub h: f64,
    /// Time step for evolution.
    pub dt: f64,
    /// Boundary sponge width in cells (fixed-zero sponge).
    pub sponge_cells: usize,
}

impl GridSpec {
    pub fn new(lower: [f64; 3], n: [usize; 3], h: f64, dt: f64, sponge_cells: usize) -> Result<Self, GridError> {
        if h <= 0.0 || n.iter().any(|&k| k == 0) {
            return Err(GridError::BadSpec);
        }
        if sponge_cells < 8 {
            return Err(GridError::SpongeTooThin(sponge_cells));
        }
        Ok(GridSpec { lower, n, h, dt, sponge_cells })
    }

    /// Cube of side `extent` centered at `center`.
    pub fn centered_cube(center: [f64; 3], extent: f64, n: usize, dt: f64, sponge_cells: usize) -> Result<Self, GridError> {
        let h = extent / n as f64;
        let lower = [center[0] - extent / 2.0, center[1] - extent / 2.0, center[2] - extent / 2.0];
        Self::new(lower, [n, n, n], h, dt, sponge_cells)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n[1] + j) * self.n[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.n[2];
        let j = (idx / self.n[2]) % self.n[1];
        let i = idx / (self.n[1] * self.n[2]);
        (i, j, k)
    }

    /// Position of cell center `(i,j,k)`.
    #[inline]
    pub fn pos(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.lower[0] + (i as f64 + 0.5) * self.h,
            self.lower[1] + (j as f64 + 0.5) * self.h,
            self.lower[2] + (k as f64 + 0.5) * self.h,
        ]
    }

    #[inline]
    pub fn pos_of(&self, idx: usize) -> [f64; 3] {
        let (i, j, k) = self.coords(idx);
        self.pos(i, j, k)
    }

    /// Cell volume h³.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h * self.h * self.h
    }

    /// Distance (in cells) to the nearest boundary face.
    #[inline]
    pub fn boundary_depth(&self, i: usize, j: usize, k: usize) -> usize {
        let d = |a: usize, n: usize| a.min(n - 1 - a);
        d(i, self.n[0]).min(d(j, self.n[1])).min(d(k, self.n[2]))
    }
}

/// Complex scalar field and its time derivative on a grid.
#[derive(Debug, Clone)]
pub struct FieldState {
    pub t: f64,
    pub phi: Vec<Complex64>,
    pub pi: Vec<Complex64>,
}

impl FieldState {
    pub fn zero(grid: &GridSpec) -> Self {
        FieldState {
            t: 0.0,
            phi: vec![Complex64::new(0.0, 0.0); grid.len()],
            pi: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn check_size(&self, grid: &GridSpec) -> Result<(), GridError> {
        if self.phi.len() != grid.len() || self.pi.len() != grid.len() {
            return Err(GridError::SizeMismatch { expected: grid.len(), found: self.phi.len() });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().chain(self.pi.iter()).all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Write a snapshot: one line of JSON header (grid spec + time), then the
    /// payload as interleaved re/im little-endian f64, phi first then pi.
    pub fn write_snapshot<W: Write>(&self, grid: &GridSpec, mut out: W) -> Result<(), GridError> {
        self.check_size(grid)?;
        let header = serde_json::json!({ "grid": grid, "t": self.t, "fields": ["phi", "pi"] });
        out.write_all(header.to_string().as_bytes())?;
        out.write_all(b"\n")?;
        for field in [&self.phi, &self.pi] {
            for z in field {
                out.write_all(&z.re.to_le_bytes())?;
                out.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<(GridSpec, FieldState), GridError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GridError::Header("missing newline after JSON header".into()))?;
        let header: serde_json::Value =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| GridError::Header(e.to_string()))?;
        let grid: GridSpec = serde_json::from_value(header["grid"].clone())
            .map_err(|e| GridError::Header(e.to_string()))?;
        let t = header["t"].as_f64().ok_or_else(|| GridError::Header("missing t".into()))?;
        let payload = &bytes[nl + 1..];
        let need = grid.len() * 2 * 2 * 8;
        if payload.len() != need {
            return Err(GridError::Header(format!("payload length {} != expected {}", payload.len(), need)));
        }
        let read_field = |off: usize| -> Vec<Complex64> {
            (0..grid.len())
                .map(|i| {
                    let at = off + i * 16;
                    let re = f64::from_le_bytes(payload[at..at + 8].try_into().unwrap());
                    let im = f64::from_le_bytes(payload[at + 8..at + 16].try_into().unwrap());
                    Complex64::new(re, im)
                })
                .collect()
        };
        let phi = read_field(0);
        let pi = read_field(grid.len() * 16);
        Ok((grid, FieldState { t, phi, pi }))
    }
}
