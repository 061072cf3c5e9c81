use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// A planar location (longitude/latitude degrees or abstract units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Bounds {
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.xmin, self.xmax, self.ymin, self.ymax]
                .iter()
                .all(|v| v.is_finite()),
            "bounds must be finite"
        );
        ensure!(
            self.xmax > self.xmin && self.ymax > self.ymin,
            "degenerate bounds [{}, {}] x [{}, {}]",
            self.xmin,
            self.xmax,
            self.ymin,
            self.ymax
        );
        Ok(())
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }
}

/// A regular raster. Pixel `(row, col)` is centered at
/// `(x0 + col·dx, y0 + row·dy)`; rows are stored first-to-last in row-major
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
}

impl PixelGrid {
    /// Pixel centers spanning `bounds` exactly (first and last centers on the
    /// edges).
    pub fn spanning(bounds: Bounds, height: usize, width: usize) -> Result<Self> {
        bounds.validate()?;
        ensure!(height >= 2 && width >= 2, "grid needs at least 2x2 pixels");
        Ok(PixelGrid {
            height,
            width,
            x0: bounds.xmin,
            y0: bounds.ymin,
            dx: (bounds.xmax - bounds.xmin) / (width - 1) as f64,
            dy: (bounds.ymax - bounds.ymin) / (height - 1) as f64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.height > 0 && self.width > 0, "empty pixel grid");
        ensure!(
            self.dx > 0.0 && self.dy > 0.0 && self.dx.is_finite() && self.dy.is_finite(),
            "pixel spacing must be positive"
        );
        ensure!(
            self.x0.is_finite() && self.y0.is_finite(),
            "grid origin must be finite"
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, row: usize, col: usize) -> Point {
        Point::new(self.x0 + col as f64 * self.dx, self.y0 + row as f64 * self.dy)
    }

    /// All pixel centers in row-major order.
    pub fn centers(&self) -> Vec<Point> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.center(r, c))
            .collect()
    }

    /// Index of the nearest pixel center, clamped to the grid. Ties go to the
    /// lower index.
    pub fn nearest(&self, p: Point) -> usize {
        let snap = |v: f64, n: usize| -> usize {
            // round-half-down: an exact .5 goes to the lower cell
            let f = v.clamp(0.0, (n - 1) as f64);
            let lo = f.floor();
            if f - lo > 0.5 {
                lo as usize + 1
            } else {
                lo as usize
            }
        };
        let c = snap((p.x - self.x0) / self.dx, self.width);
        let r = snap((p.y - self.y0) / self.dy, self.height);
        r * self.width + c
    }

    /// Pixel whose cell (center ± half spacing) contains `p`, if any.
    pub fn cell_of(&self, p: Point) -> Option<usize> {
        let c = ((p.x - self.x0) / self.dx + 0.5).floor();
        let r = ((p.y - self.y0) / self.dy + 0.5).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some(r as usize * self.width + c as usize)
    }

    /// Bounds of the pixel cells (edges, not centers).
    pub fn extent(&self) -> Bounds {
        Bounds::new(
            self.x0 - 0.5 * self.dx,
            self.x0 + (self.width as f64 - 0.5) * self.dx,
            self.y0 - 0.5 * self.dy,
            self.y0 + (self.height as f64 - 0.5) * self.dy,
        )
    }
}
