use crate::geometry::{BinaryMask, BoxXyxy};

/// Fills every pixel whose center lies inside any of the polygons (even-odd rule
/// per polygon). Each polygon is a flat `[x0, y0, x1, y1, ...]` list.
pub fn rasterize_polygons(polygons: &[Vec<f64>], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let mut crossings = Vec::new();
    for poly in polygons {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..height {
            let yc = y as f64 + 0.5;
            crossings.clear();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                // Half-open in y so shared vertices are counted once.
                if (y0 <= yc) != (y1 <= yc) {
                    crossings.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for pair in crossings.chunks_exact(2) {
                // pixel x is inside when x0 <= x + 0.5 < x1
                let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let end = (pair[1] - 0.5).ceil().clamp(0.0, width as f64) as usize;
                for x in start..end {
                    mask.set(y, x, true);
                }
            }
        }
    }
    mask
}

/// Pixels whose centers fall inside the box.
pub fn rasterize_box(b: &BoxXyxy, height: usize, width: usize) -> BinaryMask {
    let span = |lo: f64, hi: f64, n: usize| {
        let s = (lo - 0.5).ceil().max(0.0) as usize;
        let e = (hi - 0.5).ceil().clamp(0.0, n as f64) as usize;
        s..e.max(s)
    };
    let (xs, ys) = (span(b.x1, b.x2, width), span(b.y1, b.y2, height));
    let mut m = BinaryMask::new(height, width);
    for y in ys {
        for x in xs.clone() {
            m.set(y, x, true);
        }
    }
    m
}
