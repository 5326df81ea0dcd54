//! Seeded articulated-body generator.
//!
//! Joint angles are drawn per bone from an action's ranges and chained down
//! the kinematic tree. Body frame: x toward the subject's left, y up, the
//! subject facing +z. The camera sits at the origin looking down +z and the
//! pelvis lies on the optical axis at the sampled distance, so the body is
//! turned around to face the camera before the random yaw is applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{make_pseudo_gt, Dataset, DatasetMeta, PoseSample};
use crate::error::{Error, Result};
use crate::geom::{add, mat_mul, mat_vec, rot_x, rot_y, rot_z, scale, Mat3, Vec3, IDENTITY};
use crate::graph::skeleton::{DEFAULT_BONE_LENGTHS_MM, LEFT_RIGHT_PAIRS, N_JOINTS, PARENTS, REST_DIRECTIONS};
use crate::graph::{build_synthetic_body_mesh, hierarchy_checksum, CoarseningHierarchy};

/// Degree range `[lo, hi]`.
pub type Range = [f64; 2];

/// Per-bone angle ranges in degrees, indexed by child joint, each entry
/// `[flexion, abduction, twist]`.
///
/// Flexion turns about the lateral axis and is positive when it brings an
/// upward bone forward (so forward hip flexion is negative). Abduction turns
/// about the facing axis and is positive away from the midline for left-side
/// bones. Ranges are written for the left side; right-side bones mirror
/// abduction and twist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    pub ranges_deg: Vec<[Range; 3]>,
}

pub const BUILTIN_ACTIONS: [&str; 4] = ["walk", "reach", "sit", "bend"];

pub fn builtin_action(name: &str) -> Option<ActionSpec> {
    type Joint = [Range; 3];
    let still: Joint = [[0.0, 0.0]; 3];
    let (thigh, shin, spine, thorax, upper, fore): (Joint, Joint, Joint, Joint, Joint, Joint) = match name {
        "walk" => (
            [[-40.0, 30.0], [-5.0, 15.0], [-10.0, 10.0]],
            [[0.0, 70.0], [0.0, 0.0], [0.0, 0.0]],
            [[-5.0, 15.0], [-8.0, 8.0], [-15.0, 15.0]],
            [[-5.0, 10.0], [-5.0, 5.0], [-10.0, 10.0]],
            [[-50.0, 40.0], [0.0, 30.0], [-20.0, 20.0]],
            [[-90.0, 0.0], [0.0, 0.0], [-30.0, 30.0]],
        ),
        "reach" => (
            [[-20.0, 10.0], [-5.0, 10.0], [-5.0, 5.0]],
            [[0.0, 30.0], [0.0, 0.0], [0.0, 0.0]],
            [[0.0, 30.0], [-15.0, 15.0], [-30.0, 30.0]],
            [[0.0, 20.0], [-10.0, 10.0], [-20.0, 20.0]],
            [[-160.0, -40.0], [0.0, 80.0], [-40.0, 40.0]],
            [[-70.0, 0.0], [0.0, 0.0], [-40.0, 40.0]],
        ),
        "sit" => (
            [[-100.0, -60.0], [0.0, 25.0], [-10.0, 10.0]],
            [[60.0, 110.0], [0.0, 0.0], [0.0, 0.0]],
            [[-5.0, 25.0], [-5.0, 5.0], [-10.0, 10.0]],
            [[0.0, 15.0], [-5.0, 5.0], [-10.0, 10.0]],
            [[-60.0, 20.0], [0.0, 30.0], [-20.0, 20.0]],
            [[-110.0, -20.0], [0.0, 0.0], [-30.0, 30.0]],
        ),
        "bend" => (
            [[-30.0, 10.0], [0.0, 15.0], [-5.0, 5.0]],
            [[0.0, 40.0], [0.0, 0.0], [0.0, 0.0]],
            [[20.0, 70.0], [-10.0, 10.0], [-15.0, 15.0]],
            [[0.0, 30.0], [-10.0, 10.0], [-10.0, 10.0]],
            [[-100.0, 0.0], [0.0, 40.0], [-20.0, 20.0]],
            [[-100.0, 0.0], [0.0, 0.0], [-30.0, 30.0]],
        ),
        _ => return None,
    };
    let mut r = vec![still; N_JOINTS];
    r[2] = thigh;
    r[5] = thigh;
    r[3] = shin;
    r[6] = shin;
    r[7] = spine;
    r[8] = thorax;
    r[9] = [[-15.0, 25.0], [-5.0, 5.0], [-20.0, 20.0]];
    r[10] = [[-20.0, 20.0], [-10.0, 10.0], [-30.0, 30.0]];
    r[11] = [[-10.0, 10.0], [-10.0, 10.0], [0.0, 0.0]];
    r[14] = r[11];
    r[12] = upper;
    r[15] = upper;
    r[13] = fore;
    r[16] = fore;
    Some(ActionSpec { name: name.to_string(), ranges_deg: r })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    /// Distance from the camera centre to the pelvis, millimetres.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Indexed by child joint; entry 0 is ignored.
    pub bone_lengths_mm: [f64; N_JOINTS],
    pub actions: Vec<ActionSpec>,
    pub yaw_range_deg: Range,
    pub focal: f64,
    pub distance_range_mm: Range,
    pub n_mesh_vertices: usize,
    pub mesh_seed: u64,
    pub noise_std_2d: f64,
    pub subject: String,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            bone_lengths_mm: DEFAULT_BONE_LENGTHS_MM,
            actions: BUILTIN_ACTIONS.iter().filter_map(|a| builtin_action(a)).collect(),
            yaw_range_deg: [-45.0, 45.0],
            focal: 1145.0,
            distance_range_mm: [4000.0, 6000.0],
            n_mesh_vertices: 6890,
            mesh_seed: 0,
            noise_std_2d: 0.0,
            subject: "synthetic".into(),
        }
    }
}

fn is_right(bone: usize) -> bool {
    LEFT_RIGHT_PAIRS.iter().any(|&(_, r)| r == bone)
}

impl SyntheticGenConfig {
    /// Longest pelvis-to-joint chain, an upper bound on the body's reach.
    fn reach(&self) -> f64 {
        (1..N_JOINTS)
            .map(|mut j| {
                let mut len = 0.0;
                while j != 0 {
                    len += self.bone_lengths_mm[j];
                    j = PARENTS[j];
                }
                len
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(b) = (1..N_JOINTS).find(|&b| !(self.bone_lengths_mm[b] > 0.0 && self.bone_lengths_mm[b].is_finite())) {
            return bad(format!("bone length for joint {b} must be positive"));
        }
        let [lo, hi] = self.distance_range_mm;
        // 200 mm covers the widest tube around any joint.
        if !(lo <= hi && hi.is_finite() && lo > self.reach() + 200.0) {
            return bad(format!("distance range [{lo}, {hi}] does not keep the body in front of the camera"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return bad("focal length must be positive".into());
        }
        if !(self.noise_std_2d >= 0.0 && self.noise_std_2d.is_finite()) {
            return bad("noise_std_2d must be a finite non-negative number".into());
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.actions.is_empty() {
            return bad("at least one action is required".into());
        }
        let ranges = self.actions.iter().flat_map(|a| a.ranges_deg.iter().flatten()).chain([&self.yaw_range_deg]);
        if ranges.clone().any(|r| !(r[0] <= r[1] && r[0].is_finite() && r[1].is_finite())) {
            return bad("angle ranges must be finite with lo <= hi".into());
        }
        if let Some(a) = self.actions.iter().find(|a| a.ranges_deg.len() != N_JOINTS) {
            return bad(format!("action `{}` needs {N_JOINTS} range entries", a.name));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Chains local rotations down the tree; returns joints in the body frame.
fn forward_kinematics(root: &Mat3, local: &[Mat3; N_JOINTS], lengths: &[f64; N_JOINTS]) -> [Vec3; N_JOINTS] {
    let mut rot = [IDENTITY; N_JOINTS];
    let mut pos = [[0.0; 3]; N_JOINTS];
    rot[0] = *root;
    for c in 1..N_JOINTS {
        let p = PARENTS[c];
        rot[c] = mat_mul(&rot[p], &local[c]);
        pos[c] = add(pos[p], mat_vec(&rot[c], scale(REST_DIRECTIONS[c], lengths[c])));
    }
    pos
}

/// Root-relative camera-frame joints (mm) to normalized 2D coordinates: the
/// pixel projection divided by the focal length and rescaled by the pelvis
/// distance in metres, which keeps magnitudes close to the 3D ones.
pub fn project(joints3d: &[Vec3], camera: &Camera) -> Vec<[f64; 2]> {
    let d = camera.distance;
    joints3d
        .iter()
        .map(|j| {
            let k = d / ((d + j[2]) * 1000.0);
            [j[0] * k, j[1] * k]
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SyntheticGenConfig, hierarchy: &CoarseningHierarchy) -> Result<Dataset> {
    cfg.validate()?;
    if hierarchy.source.n_nodes() != cfg.n_mesh_vertices {
        return Err(Error::NodeCountMismatch { expected: cfg.n_mesh_vertices, found: hierarchy.source.n_nodes() });
    }
    let mesh = build_synthetic_body_mesh(cfg.n_mesh_vertices, cfg.mesh_seed)?;
    if mesh.graph != hierarchy.source {
        return Err(Error::Config("hierarchy was not built from the generator's mesh".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_std_2d).map_err(|e| Error::Config(e.to_string()))?;
    let face_camera = rot_y(std::f64::consts::PI);

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let action = &cfg.actions[rng.gen_range(0..cfg.actions.len())];
        let yaw = uniform(&mut rng, cfg.yaw_range_deg).to_radians();
        let distance = uniform(&mut rng, cfg.distance_range_mm);
        let mut local = [IDENTITY; N_JOINTS];
        for (b, l) in local.iter_mut().enumerate().skip(1) {
            let [f, a, t] = action.ranges_deg[b].map(|r| uniform(&mut rng, r).to_radians());
            let s = if is_right(b) { -1.0 } else { 1.0 };
            *l = mat_mul(&mat_mul(&rot_x(f), &rot_z(s * a)), &rot_y(s * t));
        }
        let root = mat_mul(&rot_y(yaw), &face_camera);
        let joints3d = forward_kinematics(&root, &local, &cfg.bone_lengths_mm).to_vec();

        let camera = Camera { focal: cfg.focal, distance };
        let mut joints2d = project(&joints3d, &camera);
        for p in joints2d.iter_mut().flatten() {
            *p += noise.sample(&mut rng);
        }
        let vertices = mesh.vertex_positions(&joints3d);
        let (top, mid) = make_pseudo_gt(&vertices, hierarchy)?;
        samples.push(PoseSample {
            joints2d,
            joints3d,
            mesh_mid: Some(mid),
            mesh_top: Some(top),
            action: action.name.clone(),
            subject: cfg.subject.clone(),
            camera: Some(camera),
        });
    }

    let meta = DatasetMeta {
        generator: Some(cfg.clone()),
        hierarchy_checksum: Some(hierarchy_checksum(hierarchy)),
        n_mesh_top: Some(hierarchy.selected[0].graph.n_nodes()),
        n_mesh_mid: hierarchy.selected.get(1).map(|s| s.graph.n_nodes()),
        ..DatasetMeta::standard()
    };
    Ok(Dataset { meta, samples })
}
