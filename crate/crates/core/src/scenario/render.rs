//! Procedural camera views: sky, ground, road band, lane marks, roadside
//! blocks and a hazard glyph whose shape encodes the hazard kind and whose
//! colour encodes the risk tier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CameraName, HazardKind, HazardMeta, ManeuverKind, RgbImage, RiskTier, ViewGroup, Visibility, IMAGE_SIZE};

type Rgb = [u8; 3];

const HORIZON: i32 = 96;
const ROAD: Rgb = [88, 88, 92];
const MARK: Rgb = [235, 235, 235];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(size: u32) -> Self {
        Canvas {
            img: RgbImage::new(size, size),
        }
    }

    fn size(&self) -> i32 {
        self.img.width as i32
    }

    fn fill_rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, c: Rgb) {
        let n = self.size();
        for y in y0.max(0)..y1.min(n) {
            for x in x0.max(0)..x1.min(n) {
                self.img.put(x as u32, y as u32, c);
            }
        }
    }

    fn fill_circle(&mut self, cx: i32, cy: i32, r: i32, c: Rgb) {
        let n = self.size();
        for y in (cy - r).max(0)..(cy + r + 1).min(n) {
            for x in (cx - r).max(0)..(cx + r + 1).min(n) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    self.img.put(x as u32, y as u32, c);
                }
            }
        }
    }

    /// Fills a convex polygon given in either winding order.
    fn fill_convex(&mut self, pts: &[(f64, f64)], c: Rgb) {
        let n = self.size();
        let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as i32;
        let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(n as f64) as i32;
        let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as i32;
        let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(n as f64) as i32;
        for y in min_y..max_y {
            for x in min_x..max_x {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut pos = false;
                let mut neg = false;
                for i in 0..pts.len() {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % pts.len()];
                    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                    pos |= cross > 0.0;
                    neg |= cross < 0.0;
                }
                if !(pos && neg) {
                    self.img.put(x as u32, y as u32, c);
                }
            }
        }
    }
}

fn tier_colour(tier: RiskTier) -> Rgb {
    match tier {
        RiskTier::Low => [60, 200, 70],
        RiskTier::Medium => [245, 200, 40],
        RiskTier::High => [230, 35, 35],
    }
}

fn draw_ground_and_sky(cv: &mut Canvas, vis: Visibility) {
    let (sky, ground) = match vis {
        Visibility::Clear => ([135, 190, 235], [92, 140, 80]),
        Visibility::Rain => ([110, 118, 138], [70, 100, 70]),
        Visibility::Fog => ([170, 172, 176], [120, 130, 118]),
        Visibility::Night => ([14, 14, 36], [28, 34, 28]),
    };
    let n = cv.size();
    cv.fill_rect(0, 0, n, HORIZON, sky);
    cv.fill_rect(0, HORIZON, n, n, ground);
}

fn draw_road(cv: &mut Canvas, camera: CameraName, maneuver: ManeuverKind) {
    let n = cv.size() as f64;
    match camera.group() {
        ViewGroup::Front | ViewGroup::Rear => {
            let shift = match camera {
                CameraName::FrontLeft | CameraName::RearRight => 70.0,
                CameraName::FrontRight | CameraName::RearLeft => -70.0,
                _ => 0.0,
            };
            let h = HORIZON as f64;
            cv.fill_convex(
                &[(30.0 + shift, n), (194.0 + shift, n), (124.0 + shift * 0.3, h), (100.0 + shift * 0.3, h)],
                ROAD,
            );
            // dashed centre line
            let mut y = h + 6.0;
            while y < n {
                let t = (y - h) / (n - h);
                let cx = 112.0 + shift * (0.3 + 0.7 * t);
                let w = 1.0 + 3.0 * t;
                let len = 4.0 + 14.0 * t;
                cv.fill_convex(&[(cx - w, y), (cx + w, y), (cx + w, y + len), (cx - w, y + len)], MARK);
                y += len * 2.0;
            }
            if camera == CameraName::Front {
                match maneuver {
                    ManeuverKind::TurnLeft => {
                        cv.fill_convex(&[(0.0, 118.0), (110.0, 118.0), (110.0, 140.0), (0.0, 150.0)], ROAD)
                    }
                    ManeuverKind::TurnRight => {
                        cv.fill_convex(&[(114.0, 118.0), (n, 118.0), (n, 150.0), (114.0, 140.0)], ROAD)
                    }
                    ManeuverKind::Stop => cv.fill_convex(&[(60.0, 170.0), (164.0, 170.0), (168.0, 178.0), (56.0, 178.0)], MARK),
                    ManeuverKind::GoStraight => {}
                }
            }
        }
        ViewGroup::SideLeft | ViewGroup::SideRight => {
            cv.fill_rect(0, 150, n as i32, n as i32, ROAD);
            let mut x = 0;
            while x < n as i32 {
                cv.fill_rect(x, 184, x + 18, 190, MARK);
                x += 36;
            }
        }
    }
}

fn draw_roadside(cv: &mut Canvas, rng: &mut ChaCha8Rng, vis: Visibility) {
    let blocks = rng.random_range(2..6);
    for _ in 0..blocks {
        let w = rng.random_range(14..44);
        let h = rng.random_range(20..70);
        let x = rng.random_range(0..(cv.size() - w));
        let shade: u8 = rng.random_range(90..170);
        let c = if vis == Visibility::Night {
            [shade / 4, shade / 4, shade / 3]
        } else {
            [shade, shade, shade.saturating_add(10)]
        };
        cv.fill_rect(x, HORIZON - h, x + w, HORIZON, c);
    }
}

fn draw_hazard(cv: &mut Canvas, meta: &HazardMeta, rng: &mut ChaCha8Rng) {
    let c = tier_colour(meta.tier);
    let r = (900.0 / meta.distance_m).clamp(10.0, 60.0);
    let cx = 112.0 + rng.random_range(-30.0..30.0);
    let cy = (HORIZON as f64 + 10.0 + 1400.0 / meta.distance_m).min(200.0);
    match meta.kind {
        HazardKind::Pedestrian | HazardKind::Animal => {
            cv.fill_circle(cx as i32, cy as i32, r as i32, c);
            if meta.kind == HazardKind::Pedestrian {
                cv.fill_rect((cx - r * 0.2) as i32, (cy + r) as i32, (cx + r * 0.2) as i32, (cy + 2.0 * r) as i32, c);
            }
        }
        HazardKind::ConstructionZone | HazardKind::Debris => {
            let k = if meta.kind == HazardKind::Debris { 0.6 } else { 1.0 };
            let triangle = |off: f64| [(cx + off - r * k, cy + r * k), (cx + off + r * k, cy + r * k), (cx + off, cy - r * k)];
            cv.fill_convex(&triangle(0.0), c);
            if meta.kind == HazardKind::ConstructionZone {
                cv.fill_convex(&triangle(-2.2 * r), c);
                cv.fill_convex(&triangle(2.2 * r), c);
            }
        }
        HazardKind::Cyclist => {
            cv.fill_convex(&[(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], c);
        }
        HazardKind::NarrowLane => {
            cv.fill_rect((cx - 2.0 * r) as i32, (cy - 0.3 * r) as i32, (cx + 0.2 * r) as i32, (cy + 0.3 * r) as i32, c);
        }
        HazardKind::CrossingVehicle | HazardKind::CutInVehicle | HazardKind::DenseTraffic | HazardKind::EmergencyVehicle => {
            let (w, h) = (1.6 * r, r);
            cv.fill_rect((cx - w) as i32, (cy - h) as i32, (cx + w) as i32, (cy + h) as i32, c);
            if meta.kind == HazardKind::EmergencyVehicle {
                cv.fill_rect((cx - 0.4 * w) as i32, (cy - 1.5 * h) as i32, (cx + 0.4 * w) as i32, (cy - h) as i32, [40, 60, 240]);
            }
            if meta.kind == HazardKind::DenseTraffic {
                cv.fill_rect((cx - 3.4 * w) as i32, (cy - h) as i32, (cx - 1.4 * w) as i32, (cy + h) as i32, c);
            }
        }
    }
}

fn apply_visibility(cv: &mut Canvas, vis: Visibility, rng: &mut ChaCha8Rng) {
    match vis {
        Visibility::Clear | Visibility::Night => {}
        Visibility::Fog => {
            for px in cv.img.data.iter_mut() {
                *px = ((*px as u16 * 2 + 200 * 3) / 5) as u8;
            }
        }
        Visibility::Rain => {
            let n = cv.size();
            for _ in 0..120 {
                let x = rng.random_range(0..n);
                let y = rng.random_range(0..n - 8);
                for k in 0..8 {
                    let xx = (x + k / 3).min(n - 1);
                    cv.img.put(xx as u32, (y + k) as u32, [180, 190, 210]);
                }
            }
        }
    }
}

/// Renders one camera view of a scenario.
pub fn render_view(camera: CameraName, meta: &HazardMeta, render_seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(render_seed.wrapping_add(camera.index() as u64 * 0x9E37_79B9));
    let mut cv = Canvas::new(IMAGE_SIZE);
    draw_ground_and_sky(&mut cv, meta.visibility);
    draw_roadside(&mut cv, &mut rng, meta.visibility);
    draw_road(&mut cv, camera, meta.maneuver);
    if camera == meta.camera {
        draw_hazard(&mut cv, meta, &mut rng);
    }
    apply_visibility(&mut cv, meta.visibility, &mut rng);
    cv.img
}
