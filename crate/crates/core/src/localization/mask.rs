use ndarray::Array2;

use super::BoundingBox;

/// `value >= tau`, cellwise.
pub fn binarize(map: &Array2<f64>, tau: f64) -> Array2<bool> {
    map.mapv(|v| v >= tau)
}

/// Tightest box around the largest 8-connected component. Among equally
/// large components the one reached first in row-major order wins.
pub fn largest_component_bbox(mask: &Array2<bool>) -> Option<BoundingBox> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    let mut best: Option<(usize, BoundingBox)> = None;
    for y0 in 0..h {
        for x0 in 0..w {
            if !mask[[y0, x0]] || seen[[y0, x0]] {
                continue;
            }
            seen[[y0, x0]] = true;
            stack.push((y0, x0));
            let (mut area, mut bx) = (0usize, [x0, y0, x0, y0]);
            while let Some((y, x)) = stack.pop() {
                area += 1;
                bx = [bx[0].min(x), bx[1].min(y), bx[2].max(x), bx[3].max(y)];
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            if best.as_ref().is_none_or(|(a, _)| area > *a) {
                let bbox = BoundingBox {
                    x_min: bx[0] as u32,
                    y_min: bx[1] as u32,
                    x_max: bx[2] as u32 + 1,
                    y_max: bx[3] as u32 + 1,
                };
                best = Some((area, bbox));
            }
        }
    }
    best.map(|(_, b)| b)
}
