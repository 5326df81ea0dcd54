//! Tube-segment body mesh attached to the skeleton.
//!
//! Every bone carries a cylinder of 8-vertex rings. Rings are connected
//! around and along the bone, and the first ring of a bone is stitched to the
//! last full ring of its parent bone so the whole surface is one component.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::skeleton::{DEFAULT_BONE_LENGTHS_MM, N_JOINTS, PARENTS};
use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RING: usize = 8;

/// Tube radius per bone (indexed by child joint), millimetres.
const BONE_RADII_MM: [f64; N_JOINTS] =
    [0.0, 90.0, 75.0, 55.0, 90.0, 75.0, 55.0, 130.0, 140.0, 55.0, 95.0, 70.0, 45.0, 38.0, 70.0, 45.0, 38.0];

/// Where a vertex sits relative to its bone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VertexAnchor {
    /// Child joint of the carrying bone.
    pub bone: usize,
    /// Fraction of the way from the parent joint to the child joint.
    pub along: f64,
    /// Angle around the bone axis, radians.
    pub angle: f64,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct BodyMesh {
    pub graph: Graph,
    /// `n_vertices × 17` linear blend weights; each row sums to one.
    pub skinning: Tensor<f64>,
    pub anchors: Vec<VertexAnchor>,
}

pub fn build_synthetic_body_mesh(n_vertices: usize, seed: u64) -> Result<BodyMesh> {
    if n_vertices < 200 {
        return Err(Error::InvalidArgument(format!("synthetic mesh needs at least 200 vertices, got {n_vertices}")));
    }
    let counts = allocate(n_vertices);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut offsets = [0usize; N_JOINTS];
    let mut anchors = Vec::with_capacity(n_vertices);
    for bone in 1..N_JOINTS {
        offsets[bone] = anchors.len();
        let m = counts[bone];
        let rings = m.div_ceil(RING);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU / RING as f64);
        for k in 0..m {
            let (r, a) = (k / RING, k % RING);
            let jitter: f64 = rng.gen_range(0.95..1.05);
            anchors.push(VertexAnchor {
                bone,
                along: (r as f64 + 0.5) / rings as f64,
                angle: phase + std::f64::consts::TAU * a as f64 / RING as f64,
                radius: BONE_RADII_MM[bone] * jitter,
            });
        }
    }

    let mut edges = BTreeSet::new();
    let mut link = |a: usize, b: usize| {
        edges.insert((a.min(b), a.max(b)));
    };
    for bone in 1..N_JOINTS {
        let (base, m) = (offsets[bone], counts[bone]);
        for k in 0..m {
            let (r, a) = (k / RING, k % RING);
            let ring_len = RING.min(m - r * RING);
            if a + 1 < ring_len {
                link(base + k, base + k + 1);
            } else if ring_len == RING {
                link(base + k, base + r * RING);
            }
            if k + RING < m {
                link(base + k, base + k + RING);
            }
        }
    }
    // stitch bones at shared joints
    for bone in 1..N_JOINTS {
        let joint = PARENTS[bone];
        let anchor_ring = if joint == 0 {
            if bone == 1 {
                continue;
            }
            offsets[1]
        } else {
            let full = counts[joint] / RING;
            offsets[joint] + (full - 1) * RING
        };
        for a in 0..RING {
            link(offsets[bone] + a, anchor_ring + a);
        }
    }
    let graph = Graph::new(n_vertices, edges.into_iter().map(|(i, j)| (i, j, 1.0)))?;

    let mut skinning = Tensor::zeros([n_vertices, N_JOINTS]);
    for (v, anchor) in anchors.iter().enumerate() {
        skinning.set(&[v, PARENTS[anchor.bone]], 1.0 - anchor.along);
        skinning.set(&[v, anchor.bone], anchor.along);
    }
    Ok(BodyMesh { graph, skinning, anchors })
}

/// Vertices per bone: one ring minimum, the rest proportional to tube area
/// with largest-remainder rounding.
fn allocate(n_vertices: usize) -> [usize; N_JOINTS] {
    let mut counts = [0usize; N_JOINTS];
    let weights: Vec<f64> = (1..N_JOINTS).map(|b| DEFAULT_BONE_LENGTHS_MM[b] * BONE_RADII_MM[b]).collect();
    let total: f64 = weights.iter().sum();
    let extra = n_vertices - RING * (N_JOINTS - 1);
    let mut assigned = 0;
    let mut remainders = Vec::with_capacity(N_JOINTS - 1);
    for (i, w) in weights.iter().enumerate() {
        let share = extra as f64 * w / total;
        let whole = share.floor() as usize;
        counts[i + 1] = RING + whole;
        assigned += whole;
        remainders.push((share - whole as f64, i + 1));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, bone) in remainders.iter().take(extra - assigned) {
        counts[bone] += 1;
    }
    counts
}

impl BodyMesh {
    pub fn n_vertices(&self) -> usize {
        self.anchors.len()
    }

    /// Surface positions for a posed skeleton: the skinned point on each bone
    /// plus the vertex's radial offset in a bone frame derived from the pose.
    pub fn vertex_positions(&self, joints: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let frames = bone_frames(joints);
        self.anchors
            .iter()
            .map(|a| {
                let (p, c) = (joints[PARENTS[a.bone]], joints[a.bone]);
                let (e1, e2) = frames[a.bone];
                let (cs, sn) = (a.angle.cos(), a.angle.sin());
                std::array::from_fn(|k| {
                    (1.0 - a.along) * p[k] + a.along * c[k] + a.radius * (cs * e1[k] + sn * e2[k])
                })
            })
            .collect()
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalized(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-9).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

/// Orthonormal pair perpendicular to each bone, anchored to the torso's
/// facing direction so the frame depends only on joint positions.
fn bone_frames(joints: &[[f64; 3]]) -> [([f64; 3], [f64; 3]); N_JOINTS] {
    let lateral = normalized(sub(joints[4], joints[1])).unwrap_or([1.0, 0.0, 0.0]);
    let up = sub(joints[8], joints[0]);
    let facing = normalized(cross(lateral, up)).unwrap_or([0.0, 0.0, 1.0]);
    let mut frames = [([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]); N_JOINTS];
    for bone in 1..N_JOINTS {
        let Some(axis) = normalized(sub(joints[bone], joints[PARENTS[bone]])) else { continue };
        let e1 = [facing, lateral, [0.0, 1.0, 0.0]]
            .into_iter()
            .find_map(|r| {
                let d = dot(r, axis);
                normalized([r[0] - d * axis[0], r[1] - d * axis[1], r[2] - d * axis[2]])
            })
            .unwrap_or([1.0, 0.0, 0.0]);
        frames[bone] = (e1, cross(axis, e1));
    }
    frames
}
