//! Pixel-aligned pointmaps and bilinear sampling.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed outside `[0, W-1] x [0, H-1]` before a sample is rejected.
pub const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("pixel ({x}, {y}) outside domain [0, {max_x}] x [0, {max_y}]")]
    OutOfDomain {
        x: f64,
        y: f64,
        max_x: f64,
        max_y: f64,
    },
}

/// Continuous pixel coordinate; `x` indexes columns, `y` rows.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelLocation {
    pub x: f64,
    pub y: f64,
}

impl PixelLocation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// H×W grid of 3D points in the camera coordinates of one frame, stored
/// row-major (`index = y * width + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct PointMapGrid {
    width: usize,
    height: usize,
    frame_index: usize,
    points: Vec<Vector3<f64>>,
}

/// Bilinear sample together with its partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearSample {
    pub value: Vector3<f64>,
    /// `(flat pixel index, weight)` for the four cell corners. Weights sum
    /// to one; `d value / d corner_value = weight * I`.
    pub corners: [(usize, f64); 4],
    pub d_dx: Vector3<f64>,
    pub d_dy: Vector3<f64>,
}

impl PointMapGrid {
    /// # Panics
    /// When `points.len() != width * height` or either dimension is zero.
    pub fn new(width: usize, height: usize, frame_index: usize, points: Vec<Vector3<f64>>) -> Self {
        assert!(width > 0 && height > 0, "empty pointmap grid");
        assert_eq!(points.len(), width * height, "pointmap size mismatch");
        Self {
            width,
            height,
            frame_index,
            points,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        frame_index: usize,
        mut f: impl FnMut(usize, usize) -> Vector3<f64>,
    ) -> Self {
        let mut points = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                points.push(f(x, y));
            }
        }
        Self::new(width, height, frame_index, points)
    }

    pub fn constant(width: usize, height: usize, frame_index: usize, v: Vector3<f64>) -> Self {
        Self::new(width, height, frame_index, vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.points
    }

    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.points[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn contains(&self, u: PixelLocation) -> bool {
        u.x >= -DOMAIN_SLACK
            && u.y >= -DOMAIN_SLACK
            && u.x <= (self.width - 1) as f64 + DOMAIN_SLACK
            && u.y <= (self.height - 1) as f64 + DOMAIN_SLACK
    }

    /// Corner indices and weights of the cell containing `u`.
    pub fn corner_weights(&self, u: PixelLocation) -> Result<[(usize, f64); 4], SampleError> {
        corner_weights_for(self.width, self.height, u)
    }

    /// Bilinear interpolation of the four grid points around `u`.
    pub fn sample(&self, u: PixelLocation) -> Result<Vector3<f64>, SampleError> {
        let c = self.corner_weights(u)?;
        Ok(c.iter()
            .fold(Vector3::zeros(), |acc, &(i, w)| acc + self.points[i] * w))
    }

    pub fn sample_with_grad(&self, u: PixelLocation) -> Result<BilinearSample, SampleError> {
        let corners = self.corner_weights(u)?;
        let value = corners
            .iter()
            .fold(Vector3::zeros(), |acc, &(i, w)| acc + self.points[i] * w);
        let (d_dx, d_dy) = if self.width == 1 || self.height == 1 {
            self.degenerate_axis_grad(u)
        } else {
            let [p00, p10, p01, p11] = corners.map(|(i, _)| self.points[i]);
            // Weights encode the fractional position; recover it from them.
            let fx = corners[1].1 + corners[3].1;
            let fy = corners[2].1 + corners[3].1;
            (
                (p10 - p00) * (1.0 - fy) + (p11 - p01) * fy,
                (p01 - p00) * (1.0 - fx) + (p11 - p10) * fx,
            )
        };
        Ok(BilinearSample {
            value,
            corners,
            d_dx,
            d_dy,
        })
    }

    fn degenerate_axis_grad(&self, u: PixelLocation) -> (Vector3<f64>, Vector3<f64>) {
        let along = |n: usize, v: f64, at: &dyn Fn(usize) -> Vector3<f64>| {
            if n == 1 {
                Vector3::zeros()
            } else {
                let i0 = (v.clamp(0.0, (n - 1) as f64).floor() as usize).min(n - 2);
                at(i0 + 1) - at(i0)
            }
        };
        let row = (u.y.clamp(0.0, (self.height - 1) as f64).round()) as usize;
        let col = (u.x.clamp(0.0, (self.width - 1) as f64).round()) as usize;
        (
            along(self.width, u.x, &|x| self.get(x, row)),
            along(self.height, u.y, &|y| self.get(col, y)),
        )
    }
}

/// Bilinear corner weights for a `width` × `height` grid, as flat
/// row-major pixel indices. Points on the far boundary use the last cell.
pub fn corner_weights_for(
    width: usize,
    height: usize,
    u: PixelLocation,
) -> Result<[(usize, f64); 4], SampleError> {
    let (max_x, max_y) = ((width - 1) as f64, (height - 1) as f64);
    let inside = u.x >= -DOMAIN_SLACK
        && u.y >= -DOMAIN_SLACK
        && u.x <= max_x + DOMAIN_SLACK
        && u.y <= max_y + DOMAIN_SLACK;
    if !inside {
        return Err(SampleError::OutOfDomain {
            x: u.x,
            y: u.y,
            max_x,
            max_y,
        });
    }
    let (x0, x1, fx) = cell_axis(u.x, width);
    let (y0, y1, fy) = cell_axis(u.y, height);
    Ok([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

fn cell_axis(v: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let v = v.clamp(0.0, (n - 1) as f64);
    let i0 = (v.floor() as usize).min(n - 2);
    (i0, i0 + 1, v - i0 as f64)
}

/// Initial 3D position of a query pixel: the first-frame pointmap sampled
/// at that pixel.
pub fn init_query(grid0: &PointMapGrid, q: PixelLocation) -> Result<Vector3<f64>, SampleError> {
    grid0.sample(q)
}
