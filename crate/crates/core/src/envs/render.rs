//! Coarse egocentric rendering.
//!
//! Navigation: a 16x16 raycast view. Each column casts one ray across a
//! +/-60 degree fan around the heading; the first wall cell hit paints a
//! vertical band in its palette color, shaded by 1/(1+distance). The
//! target sphere paints green when its ray hit is closer than the wall.
//! The bottom four rows are floor.
//!
//! Locomotion: sky over a striped floor whose perspective stripes encode
//! the body's world position (there are no walls to see).

use crate::envs::arena::{Arena, Cell};
use crate::envs::{PIXELS_H, PIXELS_W, PIXEL_DIM};

/// Half-angle of the view fan, radians (60 degrees).
const FAN_HALF: f64 = std::f64::consts::PI / 3.0;
/// Rows [0, FLOOR_ROW) show the scene; rows [FLOOR_ROW, 16) are floor.
const FLOOR_ROW: usize = 12;

/// Wall palette indexed by map color digit. Green is reserved for the
/// target, so no palette entry is green-dominant.
const PALETTE: [[f64; 3]; 10] = [
    [0.50, 0.50, 0.50], // 0: plain grey (`#`)
    [0.90, 0.20, 0.20], // 1: red
    [0.20, 0.30, 0.90], // 2: blue
    [0.90, 0.90, 0.20], // 3: yellow
    [0.80, 0.20, 0.80], // 4: magenta
    [0.20, 0.80, 0.80], // 5: cyan
    [0.90, 0.55, 0.10], // 6: orange
    [0.55, 0.25, 0.75], // 7: purple
    [0.60, 0.40, 0.20], // 8: brown
    [0.95, 0.95, 0.95], // 9: white
];

const TARGET_COLOR: [f64; 3] = [0.10, 0.90, 0.10];
const SKY: [f64; 3] = [0.08, 0.08, 0.10];

fn put(pixels: &mut [f64], col: usize, row: usize, rgb: [f64; 3]) {
    let base = (row * PIXELS_W + col) * 3;
    pixels[base] = rgb[0].clamp(0.0, 1.0);
    pixels[base + 1] = rgb[1].clamp(0.0, 1.0);
    pixels[base + 2] = rgb[2].clamp(0.0, 1.0);
}

/// Distance and hit info for one ray through the grid.
#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub wall_dist: f64,
    pub wall_color: u8,
    /// Distance to the target sphere, if the ray meets it at all.
    pub target_dist: Option<f64>,
}

impl RayHit {
    /// A ray "sees" the target when the sphere hit is nearer than the wall.
    pub fn sees_target(&self) -> bool {
        matches!(self.target_dist, Some(t) if t < self.wall_dist)
    }
}

/// March a ray from `(ox, oy)` along `angle` to the first wall cell, and
/// intersect it with the target sphere of radius `radius` at `target`.
pub fn cast_ray(arena: &Arena, ox: f64, oy: f64, angle: f64, target: [f64; 2], radius: f64) -> RayHit {
    let dx = libm::cos(angle);
    let dy = libm::sin(angle);

    // Grid walk (DDA): track the ray parameter t at each cell boundary.
    let mut cx = ox.floor() as i64;
    let mut cy = oy.floor() as i64;
    let step_x: i64 = if dx >= 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy >= 0.0 { 1 } else { -1 };
    let inv_dx = if dx.abs() < 1e-12 { f64::INFINITY } else { 1.0 / dx.abs() };
    let inv_dy = if dy.abs() < 1e-12 { f64::INFINITY } else { 1.0 / dy.abs() };
    let mut t_next_x = if inv_dx.is_infinite() {
        f64::INFINITY
    } else if dx > 0.0 {
        ((cx + 1) as f64 - ox) / dx
    } else {
        (cx as f64 - ox) / dx
    };
    let mut t_next_y = if inv_dy.is_infinite() {
        f64::INFINITY
    } else if dy > 0.0 {
        ((cy + 1) as f64 - oy) / dy
    } else {
        (cy as f64 - oy) / dy
    };

    let mut wall_dist = 50.0;
    let mut wall_color = 0u8;
    for _ in 0..4 * (arena.width() + arena.height()) {
        let t;
        if t_next_x < t_next_y {
            t = t_next_x;
            t_next_x += inv_dx;
            cx += step_x;
        } else {
            t = t_next_y;
            t_next_y += inv_dy;
            cy += step_y;
        }
        if let Cell::Wall(color) = arena.cell(cx, cy) {
            wall_dist = t.max(1e-6);
            wall_color = color;
            break;
        }
    }

    // Ray-sphere: |o + t d - c|^2 = r^2 with |d| = 1.
    let fx = ox - target[0];
    let fy = oy - target[1];
    let b = fx * dx + fy * dy;
    let c = fx * fx + fy * fy - radius * radius;
    let disc = b * b - c;
    let target_dist = if disc >= 0.0 {
        let root = disc.sqrt();
        let t0 = -b - root;
        let t1 = -b + root;
        if t0 > 0.0 {
            Some(t0)
        } else if t1 > 0.0 {
            // Eye inside the sphere: it fills the view.
            Some(1e-6)
        } else {
            None
        }
    } else {
        None
    };

    RayHit {
        wall_dist,
        wall_color,
        target_dist,
    }
}

/// Ray angle for a pixel column: the fan spans heading +/- FAN_HALF.
pub fn column_angle(heading: f64, col: usize) -> f64 {
    heading - FAN_HALF + 2.0 * FAN_HALF * (col as f64 + 0.5) / PIXELS_W as f64
}

fn shade(d: f64) -> f64 {
    1.0 / (1.0 + d)
}

/// Vertical band rows for an object at distance `d` with size factor `k`:
/// nearer objects paint taller bands, centered on the horizon row.
fn band(d: f64, k: f64) -> (usize, usize) {
    let hh = (k / d.max(0.5)).min(6.0);
    let mid = FLOOR_ROW as f64 / 2.0;
    let top = (mid - hh).floor().clamp(0.0, mid) as usize;
    let bot = (mid + hh).ceil().clamp(mid, FLOOR_ROW as f64) as usize;
    (top, bot.max(top + 1))
}

/// Egocentric raycast render of a navigation scene.
pub fn render_arena(
    arena: &Arena,
    pos: [f64; 2],
    heading: f64,
    target: [f64; 2],
    target_radius: f64,
) -> Vec<f64> {
    let mut pixels = vec![0.0; PIXEL_DIM];
    for col in 0..PIXELS_W {
        let hit = cast_ray(arena, pos[0], pos[1], column_angle(heading, col), target, target_radius);

        for row in 0..FLOOR_ROW {
            put(&mut pixels, col, row, SKY);
        }
        let base = PALETTE[hit.wall_color as usize];
        let s = shade(hit.wall_dist);
        let (top, bot) = band(hit.wall_dist, 6.0);
        for row in top..bot {
            put(&mut pixels, col, row, [base[0] * s, base[1] * s, base[2] * s]);
        }
        if hit.sees_target() {
            let td = hit.target_dist.unwrap();
            let ts = shade(td);
            let (ttop, tbot) = band(td, 3.0);
            for row in ttop..tbot {
                put(
                    &mut pixels,
                    col,
                    row,
                    [TARGET_COLOR[0] * ts, TARGET_COLOR[1] * ts, TARGET_COLOR[2] * ts],
                );
            }
        }
        for row in FLOOR_ROW..PIXELS_H {
            let v = 0.32 - 0.04 * (row - FLOOR_ROW) as f64;
            put(&mut pixels, col, row, [v, v, v]);
        }
    }
    pixels
}

/// Locomotion render: body-tinted sky, then perspective floor stripes
/// whose phase tracks the world x position.
pub fn render_locomotion(x: f64, body: crate::envs::Body) -> Vec<f64> {
    let sky = match body {
        crate::envs::Body::BipedLike => [0.25, 0.35, 0.55],
        crate::envs::Body::QuadLike => [0.38, 0.30, 0.50],
    };
    let mut pixels = vec![0.0; PIXEL_DIM];
    for row in 0..PIXELS_H / 2 {
        for col in 0..PIXELS_W {
            put(&mut pixels, col, row, sky);
        }
    }
    for row in PIXELS_H / 2..PIXELS_H {
        // Ground distance ahead for this pixel row (nearer at the bottom).
        let depth = 12.0 / (row as f64 - 7.0);
        let phase = (x + depth) / 4.0;
        let s = 0.5 + 0.5 * libm::sin(std::f64::consts::TAU * phase);
        let rgb = [0.20 + 0.60 * s, 0.15 + 0.50 * s, 0.10 + 0.30 * s];
        for col in 0..PIXELS_W {
            put(&mut pixels, col, row, rgb);
        }
    }
    pixels
}

/// True for pixels painted as target: green well above the other channels.
pub fn is_green(rgb: &[f64]) -> bool {
    rgb[1] > 0.05 && rgb[1] > 2.0 * rgb[0] && rgb[1] > 2.0 * rgb[2]
}

/// Count target-colored pixels in a flattened render.
pub fn green_pixel_count(pixels: &[f64]) -> usize {
    pixels.chunks(3).filter(|p| is_green(p)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::arena::ArenaKind;

    #[test]
    fn target_dead_ahead_paints_center_columns_green() {
        let arena = Arena::shipped(ArenaKind::Box9);
        // Center of the box, looking straight +x at a target 1 unit away.
        let pos = [5.5, 5.5];
        let target = [6.5, 5.5];
        let pixels = render_arena(&arena, pos, 0.0, target, 0.5);
        for col in [7, 8] {
            let mut green_in_col = 0;
            for row in 0..FLOOR_ROW {
                let base = (row * PIXELS_W + col) * 3;
                if is_green(&pixels[base..base + 3]) {
                    green_in_col += 1;
                }
            }
            assert!(green_in_col > 0, "column {col} shows no target");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let arena = Arena::shipped(ArenaKind::LMaze);
        let a = render_arena(&arena, [1.5, 2.0], 1.1, [6.5, 6.5], 0.5);
        let b = render_arena(&arena, [1.5, 2.0], 1.1, [6.5, 6.5], 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn occluded_target_shows_zero_green_pixels() {
        // Agent in the L-maze vertical leg looking away from the target
        // around the corner: brute-force ray oracle agrees with the image.
        let arena = Arena::shipped(ArenaKind::LMaze);
        let pos = [1.5, 1.5];
        let target = [6.5, 6.5];
        let heading = -std::f64::consts::FRAC_PI_2; // facing the top wall
        for col in 0..PIXELS_W {
            let hit = cast_ray(&arena, pos[0], pos[1], column_angle(heading, col), target, 0.5);
            assert!(!hit.sees_target(), "oracle: column {col} should be blind");
        }
        let pixels = render_arena(&arena, pos, heading, target, 0.5);
        assert_eq!(green_pixel_count(&pixels), 0);
    }

    #[test]
    fn wall_through_every_ray_oracle_matches_image() {
        // Sweep many poses; whenever no ray sees the target the image has
        // no green, and whenever some ray does the image has some.
        let arena = Arena::shipped(ArenaKind::SMaze);
        let target = [10.5, 6.5];
        let mut both_cases = [false, false];
        for i in 0..10 {
            for j in 0..6 {
                let pos = [1.5 + i as f64, 1.5 + j as f64];
                if !arena.is_free_pos(pos[0], pos[1]) {
                    continue;
                }
                for k in 0..8 {
                    let heading = k as f64 * std::f64::consts::FRAC_PI_4;
                    let visible = (0..PIXELS_W).any(|c| {
                        cast_ray(&arena, pos[0], pos[1], column_angle(heading, c), target, 0.5)
                            .sees_target()
                    });
                    let greens = green_pixel_count(&render_arena(&arena, pos, heading, target, 0.5));
                    assert_eq!(visible, greens > 0, "pos {pos:?} heading {heading}");
                    both_cases[visible as usize] = true;
                }
            }
        }
        assert!(both_cases[0] && both_cases[1], "sweep must exercise both outcomes");
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let arena = Arena::shipped(ArenaKind::Box5);
        let pixels = render_arena(&arena, [3.5, 3.5], 0.7, [2.0, 2.0], 0.5);
        assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        let loco = render_locomotion(123.4, crate::envs::Body::BipedLike);
        assert!(loco.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(loco.len(), PIXEL_DIM);
    }

    #[test]
    fn locomotion_stripes_track_position() {
        let a = render_locomotion(0.0, crate::envs::Body::QuadLike);
        let b = render_locomotion(1.0, crate::envs::Body::QuadLike);
        assert_ne!(a, b, "moving must change the floor pattern");
        let c = render_locomotion(0.0, crate::envs::Body::QuadLike);
        assert_eq!(a, c);
    }
}
