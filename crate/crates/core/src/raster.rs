//! Small grid operations shared by the backbones and the attribution methods.

use ndarray::{Array2, ArrayView2};

/// Denominator guard for every normalization in the crate.
pub const EPS: f64 = 1e-8;

/// Elementwise `max(x, 0)`.
pub fn rectify(grid: &Array2<f64>) -> Array2<f64> {
    grid.mapv(|v| v.max(0.0))
}

/// Min-max normalization to `[0, 1]`.
///
/// A grid whose range is below [`EPS`] becomes all zeros when its values are
/// (numerically) zero and all ones otherwise, so the result always has max 1
/// unless the input carries no signal at all. Returns the normalized grid and
/// whether the input was degenerate (identically zero).
pub fn min_max_normalize(grid: &Array2<f64>) -> (Array2<f64>, bool) {
    let (lo, hi) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if grid.is_empty() {
        return (grid.clone(), true);
    }
    let range = hi - lo;
    if range < EPS {
        if hi.abs() < EPS {
            return (Array2::zeros(grid.raw_dim()), true);
        }
        return (Array2::ones(grid.raw_dim()), false);
    }
    (grid.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0)), false)
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
///
/// Resizing to the same shape is the identity.
pub fn resize_bilinear(grid: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = grid.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return grid.to_owned();
    }
    let ys = axis_weights(in_h, out_h);
    let xs = axis_weights(in_w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let top = grid[[y0, x0]] * (1.0 - wx) + grid[[y0, x1]] * wx;
            let bottom = grid[[y1, x0]] * (1.0 - wx) + grid[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Mean over all cells.
pub fn mean(grid: ArrayView2<'_, f64>) -> f64 {
    if grid.is_empty() {
        return 0.0;
    }
    grid.sum() / grid.len() as f64
}
