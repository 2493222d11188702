//! Visual-force goal types, affordance/depth target encoding, goal decoding
//! from model outputs, and field-of-view filtering.

use crate::error::{Error, Result};
use crate::geometry::{
    self, project, unproject, CameraIntrinsics, FingertipPair, Vec2, Vec3,
};

/// Action primitive appended to the text prompt; selects which goal the
/// model should emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Approach,
    Grasp,
    Ungrasp,
    Lift,
    Pull,
    Push,
}

impl Primitive {
    pub const ALL: [Primitive; 6] = [
        Primitive::Approach,
        Primitive::Grasp,
        Primitive::Ungrasp,
        Primitive::Lift,
        Primitive::Pull,
        Primitive::Push,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Primitive::Approach => "approach",
            Primitive::Grasp => "grasp",
            Primitive::Ungrasp => "ungrasp",
            Primitive::Lift => "lift",
            Primitive::Pull => "pull",
            Primitive::Push => "push",
        }
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Primitive {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "approach" => Ok(Primitive::Approach),
            "grasp" => Ok(Primitive::Grasp),
            "ungrasp" => Ok(Primitive::Ungrasp),
            "lift" => Ok(Primitive::Lift),
            "pull" => Ok(Primitive::Pull),
            "push" => Ok(Primitive::Push),
            other => Err(Error::goal(format!("unknown action primitive '{other}'"))),
        }
    }
}

/// Prompt fed to the model: `"<task text>, <primitive>"`.
pub fn full_prompt(task_text: &str, primitive: Primitive) -> String {
    format!("{task_text}, {primitive}")
}

/// Dense row-major H x W scalar grid (logits, depth maps, masks).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid2D {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid2D { h, w, data: vec![0.0; h * w] }
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Grid2D { h, w, data: vec![value; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::goal(format!(
                "grid data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Grid2D { h, w, data })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.w + col] = value;
    }

    /// Row-major argmax; ties resolve to the smallest index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }
}

/// Kinematic goal: pixel target, depth, yaw, gripper width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicGoal {
    /// Pixel coordinate (u, v) of the goal gripper centroid.
    pub c_xy: Vec2,
    /// Depth of the goal centroid, meters.
    pub c_z: f64,
    /// Gripper yaw with respect to the camera frame, radians.
    pub yaw: f64,
    /// Fingertip separation, meters.
    pub width: f64,
}

/// Force goal: applied wrench force (camera frame) and compressive grip force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceGoal {
    pub applied: Vec3,
    pub grip: f64,
}

impl ForceGoal {
    pub fn zero() -> Self {
        ForceGoal { applied: Vec3::zeros(), grip: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualForceGoal {
    pub kinematic: KinematicGoal,
    pub force: ForceGoal,
}

/// Multi-hot affordance supervision: a rasterized disc around each goal pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceTarget {
    pub grid: Grid2D,
    pub radius: f64,
}

impl AffordanceTarget {
    pub fn ones(&self) -> usize {
        self.grid.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Default affordance disc radius in pixels.
pub const AFFORDANCE_RADIUS: f64 = 10.0;

/// Rasterize the multi-hot target: pixel p is 1 iff ||p - c_xy|| <= radius
/// on the integer lattice, clipped to the grid.
pub fn encode_affordance_target(
    c_xy: &Vec2,
    h: usize,
    w: usize,
    radius: f64,
) -> Result<AffordanceTarget> {
    if c_xy.x < 0.0 || c_xy.x >= w as f64 || c_xy.y < 0.0 || c_xy.y >= h as f64 {
        return Err(Error::goal(format!(
            "affordance center ({}, {}) outside {w}x{h} grid",
            c_xy.x, c_xy.y
        )));
    }
    let mut grid = Grid2D::zeros(h, w);
    let r2 = radius * radius;
    let u_lo = ((c_xy.x - radius).floor().max(0.0)) as usize;
    let u_hi = ((c_xy.x + radius).ceil().min(w as f64 - 1.0)) as usize;
    let v_lo = ((c_xy.y - radius).floor().max(0.0)) as usize;
    let v_hi = ((c_xy.y + radius).ceil().min(h as f64 - 1.0)) as usize;
    for v in v_lo..=v_hi {
        for u in u_lo..=u_hi {
            let du = u as f64 - c_xy.x;
            let dv = v as f64 - c_xy.y;
            if du * du + dv * dv <= r2 {
                grid.set(v, u, 1.0);
            }
        }
    }
    Ok(AffordanceTarget { grid, radius })
}

/// Assemble a goal from raw model outputs: argmax of the affordance logits
/// picks the pixel, the depth map is read at that pixel, the pooled heads
/// pass through.
pub fn decode_goal(
    affordance_logits: &Grid2D,
    depth_map: &Grid2D,
    width: f64,
    yaw: f64,
    applied: Vec3,
    grip: f64,
) -> Result<VisualForceGoal> {
    if affordance_logits.h != depth_map.h || affordance_logits.w != depth_map.w {
        return Err(Error::goal(format!(
            "affordance {}x{} and depth {}x{} shapes differ",
            affordance_logits.h, affordance_logits.w, depth_map.h, depth_map.w
        )));
    }
    let (row, col) = affordance_logits.argmax();
    let c_z = depth_map.at(row, col);
    if c_z <= 0.0 || !c_z.is_finite() {
        return Err(Error::goal(format!(
            "invalid goal: depth {c_z} at argmax pixel ({col}, {row})"
        )));
    }
    Ok(VisualForceGoal {
        kinematic: KinematicGoal {
            c_xy: Vec2::new(col as f64, row as f64),
            c_z,
            yaw,
            width,
        },
        force: ForceGoal { applied, grip },
    })
}

/// 3D fingertip pair implied by a goal, in the camera frame.
pub fn goal_to_fingertip_points(
    g: &VisualForceGoal,
    k: &CameraIntrinsics,
) -> Result<FingertipPair> {
    let centroid = unproject(&g.kinematic.c_xy, g.kinematic.c_z, k)?;
    geometry::goal_to_fingertips(&centroid, g.kinematic.width, g.kinematic.yaw)
}

/// True iff the fingertip centroid projects inside the image with positive
/// depth. Keyed on the centroid only, matching the single-point target.
pub fn in_fov(c: &FingertipPair, k: &CameraIntrinsics) -> bool {
    let centroid = c.centroid();
    if centroid.z <= 0.0 {
        return false;
    }
    match project(&centroid, k) {
        Ok(px) => k.contains_pixel(&px),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::goal_to_fingertips;
    use proptest::prelude::*;

    /// Brute-force lattice disc count, the independent oracle for the
    /// rasterizer: scans the whole grid.
    fn disc_count_oracle(cx: f64, cy: f64, h: usize, w: usize, r: f64) -> usize {
        let mut n = 0;
        for v in 0..h {
            for u in 0..w {
                let du = u as f64 - cx;
                let dv = v as f64 - cy;
                if du * du + dv * dv <= r * r {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn affordance_center_disc_has_317_ones() {
        let t = encode_affordance_target(&Vec2::new(112.0, 112.0), 224, 224, 10.0).unwrap();
        assert_eq!(t.ones(), 317);
        assert_eq!(disc_count_oracle(112.0, 112.0, 224, 224, 10.0), 317);
    }

    #[test]
    fn affordance_zero_radius_single_pixel() {
        let t = encode_affordance_target(&Vec2::new(50.0, 60.0), 224, 224, 0.0).unwrap();
        assert_eq!(t.ones(), 1);
        assert_eq!(t.grid.at(60, 50), 1.0);
    }

    #[test]
    fn affordance_corner_disc_clipped() {
        // Quarter disc at the (0, 0) corner. The closed-disc lattice count
        // in the first quadrant is 90, consistent with the 317 full-disc
        // count via N = 4*interior + 4*arm + 1 = 4*69 + 4*10 + 1.
        let t = encode_affordance_target(&Vec2::new(0.0, 0.0), 224, 224, 10.0).unwrap();
        let oracle = disc_count_oracle(0.0, 0.0, 224, 224, 10.0);
        assert_eq!(oracle, 90);
        assert_eq!(t.ones(), oracle);
    }

    #[test]
    fn affordance_center_outside_grid_errors() {
        assert!(encode_affordance_target(&Vec2::new(-1.0, 0.0), 224, 224, 10.0).is_err());
        assert!(encode_affordance_target(&Vec2::new(0.0, 224.0), 224, 224, 10.0).is_err());
    }

    #[test]
    fn decode_goal_unique_max() {
        let mut logits = Grid2D::zeros(224, 224);
        logits.set(50, 100, 5.0);
        let depth = Grid2D::filled(224, 224, 0.4);
        let g = decode_goal(&logits, &depth, 0.05, 0.1, Vec3::zeros(), 1.0).unwrap();
        assert_eq!((g.kinematic.c_xy.x, g.kinematic.c_xy.y), (100.0, 50.0));
        assert_eq!(g.kinematic.c_z, 0.4);
        assert_eq!(g.kinematic.width, 0.05);
        assert_eq!(g.force.grip, 1.0);
    }

    #[test]
    fn decode_goal_uniform_ties_break_row_major() {
        let logits = Grid2D::filled(8, 8, 1.0);
        let depth = Grid2D::filled(8, 8, 0.5);
        let g = decode_goal(&logits, &depth, 0.0, 0.0, Vec3::zeros(), 0.0).unwrap();
        assert_eq!((g.kinematic.c_xy.x, g.kinematic.c_xy.y), (0.0, 0.0));
    }

    #[test]
    fn decode_goal_picks_larger_of_two_peaks() {
        let mut logits = Grid2D::zeros(224, 224);
        logits.set(10, 10, 5.0);
        logits.set(200, 200, 6.0);
        let depth = Grid2D::filled(224, 224, 0.4);
        let g = decode_goal(&logits, &depth, 0.0, 0.0, Vec3::zeros(), 0.0).unwrap();
        assert_eq!((g.kinematic.c_xy.x, g.kinematic.c_xy.y), (200.0, 200.0));
    }

    #[test]
    fn decode_goal_invalid_depth_flags() {
        let mut logits = Grid2D::zeros(4, 4);
        logits.set(2, 2, 1.0);
        let depth = Grid2D::zeros(4, 4);
        assert!(decode_goal(&logits, &depth, 0.0, 0.0, Vec3::zeros(), 0.0).is_err());
    }

    #[test]
    fn goal_to_fingertip_points_composes_unproject() {
        let k = CameraIntrinsics::new(200.0, 200.0, 112.0, 112.0, 224, 224).unwrap();
        let g = VisualForceGoal {
            kinematic: KinematicGoal {
                c_xy: Vec2::new(112.0, 112.0),
                c_z: 0.5,
                yaw: 0.0,
                width: 0.08,
            },
            force: ForceGoal::zero(),
        };
        let pair = goal_to_fingertip_points(&g, &k).unwrap();
        assert!((pair.left - Vec3::new(-0.04, 0.0, 0.5)).norm() < 1e-12);
        assert!((pair.right - Vec3::new(0.04, 0.0, 0.5)).norm() < 1e-12);

        let g0 = VisualForceGoal {
            kinematic: KinematicGoal { width: 0.0, ..g.kinematic },
            force: ForceGoal::zero(),
        };
        let pair = goal_to_fingertip_points(&g0, &k).unwrap();
        assert!((pair.left - pair.right).norm() < 1e-15);
    }

    #[test]
    fn in_fov_cases() {
        let k = CameraIntrinsics::new(200.0, 200.0, 112.0, 112.0, 224, 224).unwrap();
        let center = goal_to_fingertips(&Vec3::new(0.0, 0.0, 0.5), 0.05, 0.0).unwrap();
        assert!(in_fov(&center, &k));

        // Projects far right of the image: u = 200*10/0.1 + 112.
        let far = goal_to_fingertips(&Vec3::new(10.0, 0.0, 0.1), 0.05, 0.0).unwrap();
        assert!(!in_fov(&far, &k));

        let behind = goal_to_fingertips(&Vec3::new(0.0, 0.0, -0.2), 0.05, 0.0).unwrap();
        assert!(!in_fov(&behind, &k));
    }

    proptest! {
        #[test]
        fn affordance_count_matches_oracle(
            cx in 0.0f64..64.0, cy in 0.0f64..64.0, r in 0.0f64..15.0
        ) {
            let (h, w) = (64usize, 64usize);
            prop_assume!(cx < w as f64 && cy < h as f64);
            let t = encode_affordance_target(&Vec2::new(cx, cy), h, w, r).unwrap();
            prop_assert_eq!(t.ones(), disc_count_oracle(cx, cy, h, w, r));
        }

        #[test]
        fn decode_attains_grid_maximum(values in proptest::collection::vec(-5.0f64..5.0, 64)) {
            let logits = Grid2D::from_vec(8, 8, values.clone()).unwrap();
            let depth = Grid2D::filled(8, 8, 0.5);
            let g = decode_goal(&logits, &depth, 0.0, 0.0, Vec3::zeros(), 0.0).unwrap();
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let row = g.kinematic.c_xy.y as usize;
            let col = g.kinematic.c_xy.x as usize;
            prop_assert_eq!(logits.at(row, col), max);
        }

        #[test]
        fn fingertip_goal_pixel_round_trip(
            u in 20.0f64..204.0, v in 20.0f64..204.0, z in 0.2f64..1.5,
            w in 0.005f64..0.09, yaw in -1.3f64..1.3
        ) {
            let k = CameraIntrinsics::new(200.0, 200.0, 112.0, 112.0, 224, 224).unwrap();
            let g = VisualForceGoal {
                kinematic: KinematicGoal { c_xy: Vec2::new(u, v), c_z: z, yaw, width: w },
                force: ForceGoal::zero(),
            };
            let pair = goal_to_fingertip_points(&g, &k).unwrap();
            // Collapse back through fingertips_to_goal + project.
            let params = crate::geometry::fingertips_to_goal(&pair);
            prop_assert!((params.width - w).abs() < 1e-6);
            prop_assert!((params.yaw - yaw).abs() < 1e-6);
            let px = project(&params.centroid, &k).unwrap();
            prop_assert!((px.x - u).abs() < 1e-6);
            prop_assert!((px.y - v).abs() < 1e-6);
            prop_assert!((params.centroid.z - z).abs() < 1e-6);
        }
    }
}
