//! Scene rasterizer and ground-truth mask extraction.
//!
//! Frames are square RGB images in [0, 1].  Pixel (row, col) covers the
//! world point x = (col + 0.5) / W, y = 1 - (row + 0.5) / H, so row 0 is
//! the far edge of the table.  Painting order is background, regions (pale
//! tints), objects ascending by id, gripper marker last.  Ground-truth
//! masks rasterize the target footprint (minus pixels occluded by objects
//! painted later) and the placement rectangle with the same pixel-center
//! rule; the gripper marker is an overlay and never occludes.

use ndarray::{Array2, Array3};

use super::{ObjectInstance, Scene};

/// One rendered view of the scene.
#[derive(Clone, Debug)]
pub struct Observation {
    /// RGB image, shape `[H, W, 3]`, values in [0, 1].
    pub image: Array3<f64>,
    /// Proprioception: gripper x, gripper y, grip closed, holding.
    pub state: [f64; 4],
    /// Target-object visibility mask, shape `[H, W]`, values {0, 1}.
    pub object_mask: Array2<u8>,
    /// Placement-region mask, shape `[H, W]`, values {0, 1}.
    pub placement_mask: Array2<u8>,
}

pub fn pixel_to_world(row: usize, col: usize, size: usize) -> [f64; 2] {
    [
        (col as f64 + 0.5) / size as f64,
        1.0 - (row as f64 + 0.5) / size as f64,
    ]
}

/// Named palette for the catalog's color keywords; unknown keywords fall
/// back to a hash-derived hue so rendering never fails.
pub fn color_rgb(keyword: &str) -> [f64; 3] {
    match keyword {
        "red" => [0.82, 0.13, 0.13],
        "blue" => [0.16, 0.32, 0.78],
        "green" => [0.16, 0.62, 0.22],
        "yellow" => [0.90, 0.83, 0.12],
        "orange" => [0.92, 0.53, 0.10],
        "purple" => [0.55, 0.20, 0.70],
        "pink" => [0.93, 0.55, 0.70],
        "brown" => [0.48, 0.32, 0.16],
        "black" => [0.12, 0.12, 0.12],
        "white" => [0.93, 0.93, 0.90],
        "gray" => [0.55, 0.55, 0.55],
        "cyan" => [0.15, 0.75, 0.80],
        "magenta" => [0.80, 0.18, 0.72],
        "beige" => [0.85, 0.78, 0.62],
        other => hsv_to_rgb(hash_unit(other) * 360.0, 0.7, 0.8),
    }
}

/// Hue for the small category marker painted at each object's center.
/// Derived from the category string alone so the renderer needs no catalog.
pub fn category_hue(category: &str) -> f64 {
    hash_unit(category) * 360.0
}

fn hash_unit(s: &str) -> f64 {
    let h = crate::embed::fnv1a64(s.as_bytes());
    // Golden-ratio scramble spreads nearby hashes across the unit interval.
    let phi = 0x9e37_79b9_7f4a_7c15_u64;
    (h.wrapping_mul(phi) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn region_tint(name: &str) -> [f64; 3] {
    match name {
        "sink" => [0.72, 0.80, 0.92],
        "stove" => [0.92, 0.78, 0.72],
        "shelf" => [0.76, 0.88, 0.74],
        other => hsv_to_rgb(hash_unit(other) * 360.0, 0.18, 0.92),
    }
}

const BACKGROUND: [f64; 3] = [0.88, 0.87, 0.85];

/// Body color at a footprint-relative offset: base color keyed by the
/// color attribute, modulated by a material pattern, with a hue-coded
/// category marker at the center.
fn sprite_color(obj: &ObjectInstance, dx: f64, dy: f64) -> [f64; 3] {
    let mut c = color_rgb(&obj.attributes.color.keyword);
    let r = obj.footprint.radius;
    let stripe = |coord: f64, period: f64| ((coord / period).floor() as i64).rem_euclid(2) == 0;
    match obj.attributes.material.keyword.as_str() {
        "steel" => {
            if stripe(dy, r * 0.35) {
                c = lighten(c, 0.18);
            }
        }
        "wood" => {
            if stripe(dx, r * 0.30) {
                c = darken(c, 0.18);
            }
        }
        "glass" => c = blend(c, BACKGROUND, 0.45),
        "ceramic" => c = lighten(c, 0.10),
        "rubber" => c = darken(c, 0.22),
        "stone" => {
            if stripe(dx + dy, r * 0.28) {
                c = darken(c, 0.30);
            }
        }
        "copper" => c = blend(c, [0.85, 0.45, 0.20], 0.40),
        _ => {}
    }
    if (dx * dx + dy * dy).sqrt() < 0.45 * r {
        c = hsv_to_rgb(category_hue(&obj.category), 0.85, 0.95);
    }
    c
}

fn lighten(c: [f64; 3], amount: f64) -> [f64; 3] {
    [
        c[0] + (1.0 - c[0]) * amount,
        c[1] + (1.0 - c[1]) * amount,
        c[2] + (1.0 - c[2]) * amount,
    ]
}

fn darken(c: [f64; 3], amount: f64) -> [f64; 3] {
    [c[0] * (1.0 - amount), c[1] * (1.0 - amount), c[2] * (1.0 - amount)]
}

fn blend(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Ground-truth masks for the scene's target spec: the target object's
/// visible footprint and the placement region rectangle.
pub fn rasterize_masks(scene: &Scene, size: usize) -> (Array2<u8>, Array2<u8>) {
    let mut object_mask = Array2::<u8>::zeros((size, size));
    let mut placement_mask = Array2::<u8>::zeros((size, size));
    let target = scene.target_object();
    let region = scene.target_region();
    for row in 0..size {
        for col in 0..size {
            let p = pixel_to_world(row, col, size);
            if let Some(t) = target {
                let covered = scene
                    .objects
                    .iter()
                    .any(|o| o.id > t.id && o.contains(p));
                if t.contains(p) && !covered {
                    object_mask[[row, col]] = 1;
                }
            }
            if let Some(r) = region {
                if r.contains(p) {
                    placement_mask[[row, col]] = 1;
                }
            }
        }
    }
    (object_mask, placement_mask)
}

/// Render the scene to an observation at the given square resolution.
pub fn render(scene: &Scene, size: usize) -> Observation {
    let mut image = Array3::<f64>::zeros((size, size, 3));
    for row in 0..size {
        for col in 0..size {
            let p = pixel_to_world(row, col, size);
            let mut c = BACKGROUND;
            for region in &scene.regions {
                if region.contains(p) {
                    c = region_tint(&region.name);
                }
            }
            for obj in &scene.objects {
                let dx = p[0] - obj.position[0];
                let dy = p[1] - obj.position[1];
                if obj.footprint.contains(dx, dy) {
                    c = sprite_color(obj, dx, dy);
                }
            }
            let gx = p[0] - scene.robot.gripper[0];
            let gy = p[1] - scene.robot.gripper[1];
            let arm = 0.030;
            let bar = 0.008;
            if (gx.abs() <= bar && gy.abs() <= arm) || (gy.abs() <= bar && gx.abs() <= arm) {
                c = if scene.robot.grip_closed {
                    [0.05, 0.05, 0.05]
                } else {
                    [0.25, 0.25, 0.25]
                };
            }
            if (gx * gx + gy * gy).sqrt() <= 0.010 {
                c = [0.90, 0.10, 0.10];
            }
            image[[row, col, 0]] = c[0];
            image[[row, col, 1]] = c[1];
            image[[row, col, 2]] = c[2];
        }
    }
    let (object_mask, placement_mask) = rasterize_masks(scene, size);
    let state = [
        scene.robot.gripper[0],
        scene.robot.gripper[1],
        if scene.robot.grip_closed { 1.0 } else { 0.0 },
        if scene.robot.held_object.is_some() { 1.0 } else { 0.0 },
    ];
    Observation {
        image,
        state,
        object_mask,
        placement_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::simple_scene;
    use super::super::{Footprint, FootprintKind};
    use super::*;

    #[test]
    fn disc_mask_area_matches_analytic_area() {
        let mut scene = simple_scene();
        scene.objects[0].position = [0.5, 0.5];
        scene.objects[0].footprint = Footprint {
            kind: FootprintKind::Disc,
            radius: 0.1,
        };
        scene.objects.truncate(1);
        let (mask, _) = rasterize_masks(&scene, 64);
        let count: u32 = mask.iter().map(|&v| v as u32).sum();
        let analytic = std::f64::consts::PI * 0.1 * 0.1 * 64.0 * 64.0;
        assert!(
            (count as f64) > analytic * 0.9 && (count as f64) < analytic * 1.1,
            "count {count} vs analytic {analytic}"
        );
    }

    #[test]
    fn placement_mask_is_exact_rectangle_rasterization() {
        let scene = simple_scene();
        let size = 64;
        let (_, mask) = rasterize_masks(&scene, size);
        let region = scene.target_region().unwrap();
        for row in 0..size {
            for col in 0..size {
                let expect = region.contains(pixel_to_world(row, col, size));
                assert_eq!(mask[[row, col]] == 1, expect);
            }
        }
    }

    #[test]
    fn occluding_object_removes_covered_target_pixels() {
        let mut scene = simple_scene();
        scene.objects[0].position = [0.5, 0.4];
        scene.objects[1].position = [0.55, 0.4];
        scene.objects[1].footprint = Footprint {
            kind: FootprintKind::Disc,
            radius: 0.06,
        };
        // Overlapping at rest is invalid for sampled scenes; rendering of a
        // mid-manipulation overlap must still mask only visible pixels.
        let (mask, _) = rasterize_masks(&scene, 64);
        for row in 0..64 {
            for col in 0..64 {
                if mask[[row, col]] == 1 {
                    let p = pixel_to_world(row, col, 64);
                    assert!(!scene.objects[1].contains(p));
                }
            }
        }
        let count: u32 = mask.iter().map(|&v| v as u32).sum();
        assert!(count > 0);
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let scene = simple_scene();
        let a = render(&scene, 64);
        let b = render(&scene, 64);
        assert_eq!(a.image, b.image);
        assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.state, [0.5, 0.05, 0.0, 0.0]);
    }

    #[test]
    fn distinct_colors_render_distinct_bodies() {
        let red = color_rgb("red");
        let blue = color_rgb("blue");
        assert_ne!(red, blue);
        let fallback = color_rgb("unlisted-hue");
        assert!(fallback.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn held_object_draws_at_gripper() {
        let mut scene = simple_scene();
        scene.robot.gripper = [0.5, 0.4];
        scene.robot.grip_closed = true;
        scene.robot.held_object = Some(0);
        scene.objects[0].held = true;
        scene.objects[0].position = scene.robot.gripper;
        let obs = render(&scene, 64);
        assert_eq!(obs.state[2], 1.0);
        assert_eq!(obs.state[3], 1.0);
        // The object mask is centered on the gripper.
        let count: u32 = obs.object_mask.iter().map(|&v| v as u32).sum();
        assert!(count > 0);
    }
}
