//! Pose samples, datasets and pseudo-groundtruth mesh targets.

mod io;
mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::graph::skeleton::{JOINT_NAMES, LEFT_RIGHT_PAIRS, N_JOINTS, PELVIS};
use crate::graph::{pool_positions, CoarseningHierarchy};
use crate::tensor::Tensor;

pub use io::{load_dataset, read_dataset, samples_checksum, save_dataset, write_dataset, DATASET_VERSION};
pub use synthetic::{builtin_action, generate_synthetic, project, ActionSpec, Camera, SyntheticGenConfig, BUILTIN_ACTIONS};

/// One training or evaluation example. 3D quantities are millimetres in the
/// camera frame, pelvis at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub joints2d: Vec<[f64; 2]>,
    pub joints3d: Vec<Vec3>,
    pub mesh_mid: Option<Vec<Vec3>>,
    pub mesh_top: Option<Vec<Vec3>>,
    pub action: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
}

impl PoseSample {
    pub fn validate(&self) -> Result<()> {
        if self.joints2d.len() != N_JOINTS || self.joints3d.len() != N_JOINTS {
            return Err(Error::NodeCountMismatch {
                expected: N_JOINTS,
                found: self.joints2d.len().min(self.joints3d.len()),
            });
        }
        let finite = self.joints2d.iter().flatten().all(|v| v.is_finite())
            && self.joints3d.iter().flatten().all(|v| v.is_finite())
            && [&self.mesh_mid, &self.mesh_top].iter().all(|m| m.iter().flatten().flatten().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("sample contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Everything a dataset file records besides its samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: Option<SyntheticGenConfig>,
    pub hierarchy_checksum: Option<String>,
    pub joint_names: Vec<String>,
    pub left_right_pairs: Vec<(usize, usize)>,
    pub n_mesh_mid: Option<usize>,
    pub n_mesh_top: Option<usize>,
    /// Effective run configuration of the command that wrote the file.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl DatasetMeta {
    pub fn standard() -> Self {
        Self {
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            left_right_pairs: LEFT_RIGHT_PAIRS.to_vec(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<PoseSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks shared joint order and mesh sizes.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.validate()?;
            for (mesh, n) in [(&s.mesh_mid, self.meta.n_mesh_mid), (&s.mesh_top, self.meta.n_mesh_top)] {
                if let (Some(m), Some(n)) = (mesh, n) {
                    if m.len() != n {
                        return Err(Error::NodeCountMismatch { expected: n, found: m.len() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Seeded permutation split into `(train, test)` index lists.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
        let test = idx.split_off(self.len() - n_test);
        (idx, test)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { meta: self.meta.clone(), samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}

/// Subtracts the pelvis from every joint.
pub fn root_center(joints3d: &[Vec3]) -> Vec<Vec3> {
    let root = joints3d[PELVIS];
    joints3d.iter().map(|j| [j[0] - root[0], j[1] - root[1], j[2] - root[2]]).collect()
}

/// Pools dense mesh vertices into the two selected coarse levels, returned
/// as `(top, mid)` (about 96 and 48 vertices).
pub fn make_pseudo_gt(vertices: &[Vec3], hierarchy: &CoarseningHierarchy) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if vertices.len() != hierarchy.source.n_nodes() {
        return Err(Error::NodeCountMismatch { expected: hierarchy.source.n_nodes(), found: vertices.len() });
    }
    let [top, mid] = &hierarchy.selected[..] else {
        return Err(Error::InvalidArgument("pseudo-groundtruth needs exactly two selected levels".into()));
    };
    let positions = Tensor::new([vertices.len(), 3], vertices.iter().flatten().copied().collect())?;
    let pool = |map: &[usize]| -> Result<Vec<Vec3>> {
        let t = pool_positions(map, &positions)?;
        Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    };
    Ok((pool(&top.map_from_source)?, pool(&mid.map_from_source)?))
}
