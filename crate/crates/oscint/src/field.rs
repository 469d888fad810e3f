//! Spatial sample grids and sampled complex fields.
//!
//! [`GridRegion`] is a tensor grid given by per-axis node coordinates
//! (row-major enumeration, last axis fastest — same convention as the
//! frequency meshes).  [`FieldSample`] couples a grid with complex values
//! and provides weighted `L^p` norms, masked norms, and CSV / binary
//! export for offline analysis.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{OscError, Result};

#[derive(Debug, Clone)]
pub struct GridRegion {
    /// Strictly increasing node coordinates per axis.
    pub axes: Vec<Vec<f64>>,
}

impl GridRegion {
    pub fn from_axes(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(OscError::Domain("grid needs at least one axis".into()));
        }
        for (k, ax) in axes.iter().enumerate() {
            if ax.is_empty() {
                return Err(OscError::Domain(format!("axis {k} has no nodes")));
            }
            if ax.windows(2).any(|w| w[1] <= w[0]) {
                return Err(OscError::Domain(format!(
                    "axis {k} coordinates must increase strictly"
                )));
            }
        }
        Ok(Self { axes })
    }

    /// Midpoint tensor grid over a box.
    pub fn box_grid(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() {
            return Err(OscError::Inconsistent("box_grid argument lengths disagree".into()));
        }
        let mut axes = Vec::with_capacity(lo.len());
        for k in 0..lo.len() {
            if counts[k] == 0 || hi[k] <= lo[k] {
                return Err(OscError::Domain(format!(
                    "axis {k}: need a positive count over a nondegenerate interval"
                )));
            }
            let step = (hi[k] - lo[k]) / counts[k] as f64;
            axes.push(
                (0..counts[k])
                    .map(|i| lo[k] + (i as f64 + 0.5) * step)
                    .collect(),
            );
        }
        Self::from_axes(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-index of a flat index (row-major, last axis fastest).
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let d = self.dim();
        let mut idx = vec![0usize; d];
        for k in (0..d).rev() {
            let m = self.axes[k].len();
            idx[k] = flat % m;
            flat /= m;
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0usize;
        for (k, &i) in multi.iter().enumerate() {
            flat = flat * self.axes[k].len() + i;
        }
        flat
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        idx.iter()
            .enumerate()
            .map(|(k, &i)| self.axes[k][i])
            .collect()
    }

    /// Local cell width along each axis (midpoint rule; boundary cells use
    /// their one-sided neighbor distance, single-node axes width 1).
    pub fn cell_widths(&self) -> Vec<Vec<f64>> {
        self.axes
            .iter()
            .map(|ax| {
                let m = ax.len();
                (0..m)
                    .map(|i| {
                        if m == 1 {
                            1.0
                        } else if i == 0 {
                            ax[1] - ax[0]
                        } else if i == m - 1 {
                            ax[m - 1] - ax[m - 2]
                        } else {
                            0.5 * (ax[i + 1] - ax[i - 1])
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FieldSample {
    pub grid: GridRegion,
    /// Row-major values, last axis fastest.
    pub values: Vec<Complex64>,
}

impl FieldSample {
    pub fn new(grid: GridRegion, values: Vec<Complex64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(OscError::Inconsistent(format!(
                "grid has {} nodes but {} values supplied",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Weighted `L^p` norm (cell-volume weights); `p = infinity` gives the
    /// max modulus.
    pub fn lp_norm(&self, p: f64) -> f64 {
        self.masked_lp_norm(p, |_| true)
    }

    pub fn l2_norm(&self) -> f64 {
        self.lp_norm(2.0)
    }

    /// `L^p` norm restricted to grid nodes satisfying the predicate.
    pub fn masked_lp_norm<F: Fn(&[f64]) -> bool>(&self, p: f64, mask: F) -> f64 {
        if p < 1.0 && !p.is_infinite() {
            return f64::NAN;
        }
        let widths = self.grid.cell_widths();
        let d = self.grid.dim();
        let mut acc = 0.0f64;
        let mut sup = 0.0f64;
        let mut idx = vec![0usize; d];
        let mut node = vec![0.0f64; d];
        for v in &self.values {
            for k in 0..d {
                node[k] = self.grid.axes[k][idx[k]];
            }
            if mask(&node) {
                let a = v.norm();
                if p.is_infinite() {
                    sup = sup.max(a);
                } else {
                    let mut cell = 1.0;
                    for k in 0..d {
                        cell *= widths[k][idx[k]];
                    }
                    acc += a.powf(p) * cell;
                }
            }
            // Increment, last axis fastest.
            let mut k = d;
            while k > 0 {
                k -= 1;
                idx[k] += 1;
                if idx[k] < self.grid.axes[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
        if p.is_infinite() {
            sup
        } else {
            acc.powf(1.0 / p)
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// CSV export: one row per node, coordinates then re/im/modulus.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let d = self.grid.dim();
        for k in 0..d {
            write!(out, "x{k},")?;
        }
        writeln!(out, "re,im,abs")?;
        for (flat, v) in self.values.iter().enumerate() {
            let node = self.grid.node(flat);
            for c in &node {
                write!(out, "{c},")?;
            }
            writeln!(out, "{},{},{}", v.re, v.im, v.norm())?;
        }
        Ok(())
    }

    /// Binary export: magic `OSCFLD1\0`, little-endian u32 dim, per axis a
    /// u64 count plus f64 coordinates, then re/im f64 pairs row-major.
    pub fn write_binary<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(b"OSCFLD1\0")?;
        out.write_all(&(self.grid.dim() as u32).to_le_bytes())?;
        for ax in &self.grid.axes {
            out.write_all(&(ax.len() as u64).to_le_bytes())?;
            for &c in ax {
                out.write_all(&c.to_le_bytes())?;
            }
        }
        for v in &self.values {
            out.write_all(&v.re.to_le_bytes())?;
            out.write_all(&v.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != b"OSCFLD1\0" {
            return Err(OscError::Inconsistent("not a field sample file".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        if dim == 0 || dim > 16 {
            return Err(OscError::Inconsistent(format!("implausible dimension {dim}")));
        }
        let mut b8 = [0u8; 8];
        let mut axes = Vec::with_capacity(dim);
        for _ in 0..dim {
            input.read_exact(&mut b8)?;
            let count = u64::from_le_bytes(b8) as usize;
            let mut ax = Vec::with_capacity(count);
            for _ in 0..count {
                input.read_exact(&mut b8)?;
                ax.push(f64::from_le_bytes(b8));
            }
            axes.push(ax);
        }
        let grid = GridRegion::from_axes(axes)?;
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            input.read_exact(&mut b8)?;
            let re = f64::from_le_bytes(b8);
            input.read_exact(&mut b8)?;
            let im = f64::from_le_bytes(b8);
            values.push(Complex64::new(re, im));
        }
        Self::new(grid, values)
    }
}
