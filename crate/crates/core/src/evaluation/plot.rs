//! Top-down ego-frame overlays: forward (+x) points up, left (+y) points left.

use crate::scenario::{RaterReference, RgbImage};

pub const PLOT_SIZE: u32 = 256;
const MARGIN: f64 = 16.0;
const BACKGROUND: [u8; 3] = [255, 255, 255];
const GRID: [u8; 3] = [225, 225, 225];
const EGO: [u8; 3] = [0, 0, 0];
pub const GT_COLOR: [u8; 3] = [0, 160, 0];
pub const PRED_COLOR: [u8; 3] = [220, 0, 0];
pub const REF_COLOR: [u8; 3] = [150, 150, 150];

struct View {
    cx: f64,
    cy: f64,
    scale: f64,
}

impl View {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> View {
        let (mut lo, mut hi) = ([0.0f64; 2], [0.0f64; 2]);
        for p in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(10.0);
        View {
            cx: 0.5 * (lo[0] + hi[0]),
            cy: 0.5 * (lo[1] + hi[1]),
            scale: (PLOT_SIZE as f64 - 2.0 * MARGIN) / span,
        }
    }

    /// Ego-frame metres to pixel coordinates.
    fn px(&self, p: [f64; 2]) -> (i64, i64) {
        let c = PLOT_SIZE as f64 / 2.0;
        let u = c - (p[1] - self.cy) * self.scale;
        let v = c - (p[0] - self.cx) * self.scale;
        (u.round() as i64, v.round() as i64)
    }
}

fn plot(img: &mut RgbImage, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width && (y as u32) < img.height {
        img.put(x as u32, y as u32, rgb);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        plot(img, x, y, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn dot(img: &mut RgbImage, (x, y): (i64, i64), r: i64, rgb: [u8; 3]) {
    for j in -r..=r {
        for i in -r..=r {
            if i * i + j * j <= r * r {
                plot(img, x + i, y + j, rgb);
            }
        }
    }
}

fn polyline(img: &mut RgbImage, view: &View, pts: &[[f64; 2]], rgb: [u8; 3]) {
    let mut prev = view.px([0.0, 0.0]);
    for &p in pts {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let q = view.px(p);
        line(img, prev, q, rgb);
        dot(img, q, 1, rgb);
        prev = q;
    }
}

/// Draws references (gray), ground truth (green) and prediction (red) from
/// the ego origin, over a 10 m grid.
pub fn render_trajectory_plot(gt: &[[f64; 2]], pred: &[[f64; 2]], references: &[RaterReference]) -> RgbImage {
    let mut img = RgbImage::new(PLOT_SIZE, PLOT_SIZE);
    img.data.chunks_exact_mut(3).for_each(|p| p.copy_from_slice(&BACKGROUND));
    let all = gt
        .iter()
        .chain(pred)
        .copied()
        .chain(references.iter().flat_map(|r| r.trajectory.waypoints().iter().copied()));
    let view = View::fit(all);

    let reach = PLOT_SIZE as f64 / view.scale;
    let lines = (reach / 10.0).ceil() as i64 + 1;
    for k in -lines..=lines {
        let m = 10.0 * k as f64;
        let gx = 10.0 * (view.cx / 10.0).round() + m;
        let gy = 10.0 * (view.cy / 10.0).round() + m;
        let (_, v) = view.px([gx, 0.0]);
        line(&mut img, (0, v), (PLOT_SIZE as i64 - 1, v), GRID);
        let (u, _) = view.px([0.0, gy]);
        line(&mut img, (u, 0), (u, PLOT_SIZE as i64 - 1), GRID);
    }
    for r in references {
        polyline(&mut img, &view, r.trajectory.waypoints(), REF_COLOR);
    }
    polyline(&mut img, &view, gt, GT_COLOR);
    polyline(&mut img, &view, pred, PRED_COLOR);
    dot(&mut img, view.px([0.0, 0.0]), 3, EGO);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Trajectory;

    fn count(img: &RgbImage, rgb: [u8; 3]) -> usize {
        img.data.chunks_exact(3).filter(|p| *p == rgb).count()
    }

    #[test]
    fn colors_and_orientation() {
        let gt: Vec<[f64; 2]> = (1..=20).map(|k| [2.0 * k as f64, 0.0]).collect();
        let pred: Vec<[f64; 2]> = (1..=20).map(|k| [2.0 * k as f64, 0.3 * k as f64]).collect();
        let refs = vec![RaterReference {
            trajectory: Trajectory::new((1..=20).map(|k| [2.0 * k as f64, -0.3 * k as f64]).collect()).unwrap(),
            score: 6.0,
        }];
        let img = render_trajectory_plot(&gt, &pred, &refs);
        assert_eq!((img.width, img.height), (PLOT_SIZE, PLOT_SIZE));
        for c in [GT_COLOR, PRED_COLOR, REF_COLOR, EGO] {
            assert!(count(&img, c) > 10, "{c:?} missing");
        }
        // left turn (positive y) is drawn left of the straight line
        let row = (0..PLOT_SIZE).find(|&y| (0..PLOT_SIZE).any(|x| img.pixel(x, y) == PRED_COLOR)).unwrap();
        let pred_x = (0..PLOT_SIZE).find(|&x| img.pixel(x, row) == PRED_COLOR).unwrap();
        let ego_y = (0..PLOT_SIZE).rev().find(|&y| (0..PLOT_SIZE).any(|x| img.pixel(x, y) == EGO)).unwrap();
        assert!(row < ego_y, "forward is up");
        assert!(pred_x < PLOT_SIZE / 2, "left is left");
    }

    #[test]
    fn non_finite_points_do_not_panic() {
        let gt: Vec<[f64; 2]> = (1..=20).map(|k| [k as f64, 0.0]).collect();
        let mut pred = gt.clone();
        pred[5] = [f64::NAN, f64::INFINITY];
        let img = render_trajectory_plot(&gt, &pred, &[]);
        assert!(count(&img, GT_COLOR) > 0);
    }
}
