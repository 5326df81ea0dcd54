//! The 17-joint Human3.6M skeleton.
//!
//! Joint order:
//!
//! | idx | joint      | idx | joint       |
//! |-----|------------|-----|-------------|
//! | 0   | pelvis     | 9   | neck        |
//! | 1   | r_hip      | 10  | head        |
//! | 2   | r_knee     | 11  | l_shoulder  |
//! | 3   | r_ankle    | 12  | l_elbow     |
//! | 4   | l_hip      | 13  | l_wrist     |
//! | 5   | l_knee     | 14  | r_shoulder  |
//! | 6   | l_ankle    | 15  | r_elbow     |
//! | 7   | spine      | 16  | r_wrist     |
//! | 8   | thorax     |     |             |

use super::Graph;

pub const N_JOINTS: usize = 17;
pub const PELVIS: usize = 0;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

/// Parent of each joint in the kinematic tree; the pelvis is its own root.
pub const PARENTS: [usize; N_JOINTS] = [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

/// `(parent, child)` bones; bone `b` ends at joint `b + 1`.
pub fn bones() -> impl Iterator<Item = (usize, usize)> {
    (1..N_JOINTS).map(|c| (PARENTS[c], c))
}

/// `(left, right)` joint pairs used by horizontal flipping.
pub const LEFT_RIGHT_PAIRS: [(usize, usize); 6] = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)];

/// Joint permutation that swaps every lateral pair.
pub fn flip_permutation() -> [usize; N_JOINTS] {
    let mut perm: [usize; N_JOINTS] = std::array::from_fn(|i| i);
    for (l, r) in LEFT_RIGHT_PAIRS {
        perm[l] = r;
        perm[r] = l;
    }
    perm
}

pub fn build_skeleton_graph() -> Graph {
    Graph::new(N_JOINTS, bones().map(|(p, c)| (p, c, 1.0)))
        .and_then(|g| g.with_names(JOINT_NAMES.iter().map(|s| s.to_string()).collect()))
        .expect("static skeleton is valid")
}

/// Default bone lengths in millimetres, indexed by child joint (entry 0 unused).
pub const DEFAULT_BONE_LENGTHS_MM: [f64; N_JOINTS] =
    [0.0, 130.0, 450.0, 440.0, 130.0, 450.0, 440.0, 230.0, 250.0, 110.0, 120.0, 150.0, 280.0, 250.0, 150.0, 280.0, 250.0];

/// Rest-pose bone directions (x toward the subject's left, y up), indexed by
/// child joint. Arms hang down.
pub const REST_DIRECTIONS: [[f64; 3]; N_JOINTS] = [
    [0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
];

/// Rest pose joint positions for the given bone lengths.
pub fn rest_pose(bone_lengths: &[f64; N_JOINTS]) -> [[f64; 3]; N_JOINTS] {
    let mut pos = [[0.0; 3]; N_JOINTS];
    for c in 1..N_JOINTS {
        let p = PARENTS[c];
        for k in 0..3 {
            pos[c][k] = pos[p][k] + REST_DIRECTIONS[c][k] * bone_lengths[c];
        }
    }
    pos
}
