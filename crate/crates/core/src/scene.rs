//! In-memory form of the input archive.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::BoardSpec;
use crate::geometry::Intrinsics;
use crate::graph::CovisibilityMatrix;
use crate::pointmap::{canonical_pointmap, GroundMask, MatchSet, Pointmap, ViewRecord};

/// Everything the archive stores about one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub id: usize,
    pub camera: usize,
    pub pose_index: usize,
    pub width: usize,
    pub height: usize,
    /// Pairwise estimates of this view's pointmap, fused on load.
    pub estimates: Vec<Pointmap>,
    pub intrinsics_prior: Option<Intrinsics>,
    pub ground_mask: Option<GroundMask>,
    /// Checkerboard inner corners, row-major, when the board was detected.
    pub corners: Option<Vec<Vector2<f64>>>,
}

impl ViewData {
    pub fn to_record(&self) -> Result<ViewRecord> {
        Ok(ViewRecord {
            id: self.id,
            camera: self.camera,
            pose_index: self.pose_index,
            canonical: canonical_pointmap(&self.estimates)?,
            intrinsics_prior: self.intrinsics_prior,
            ground_mask: self.ground_mask.clone(),
        })
    }
}

/// Views, correspondences, co-visibility scores and optional board layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInputs {
    pub views: Vec<ViewData>,
    pub matches: Vec<MatchSet>,
    pub scores: CovisibilityMatrix,
    pub board: Option<BoardSpec>,
}

impl SceneInputs {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.views.len() {
            return Err(Error::DimensionMismatch(format!(
                "score matrix is {0}x{0} for {1} views",
                self.scores.len(),
                self.views.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, v) in self.views.iter().enumerate() {
            if v.id != i {
                return Err(Error::Parse(format!("view ids must be 0..n in order, found {} at {i}", v.id)));
            }
            if !seen.insert((v.camera, v.pose_index)) {
                return Err(Error::Parse(format!(
                    "camera {} has two images at pose index {}",
                    v.camera, v.pose_index
                )));
            }
            if v.estimates.is_empty() {
                return Err(Error::MissingChannel(format!("view {i} has no pointmap estimate")));
            }
            for e in &v.estimates {
                if (e.width, e.height) != (v.width, v.height) {
                    return Err(Error::DimensionMismatch(format!("view {i} estimate size")));
                }
                e.validate()?;
            }
            if let Some(m) = &v.ground_mask {
                if (m.width, m.height) != (v.width, v.height) || m.floor.len() != v.width * v.height {
                    return Err(Error::DimensionMismatch(format!("view {i} ground mask size")));
                }
            }
            if let (Some(c), Some(b)) = (&v.corners, &self.board) {
                if c.len() != b.rows * b.cols {
                    return Err(Error::DimensionMismatch(format!(
                        "view {i} has {} corners, board has {}",
                        c.len(),
                        b.rows * b.cols
                    )));
                }
            }
        }
        for m in &self.matches {
            let a = self.views.get(m.view_a).ok_or_else(|| {
                Error::MissingChannel(format!("matches reference absent view {}", m.view_a))
            })?;
            let b = self.views.get(m.view_b).ok_or_else(|| {
                Error::MissingChannel(format!("matches reference absent view {}", m.view_b))
            })?;
            m.validate((a.width, a.height), (b.width, b.height))?;
        }
        Ok(())
    }

    /// Fuses every view's estimates into its canonical pointmap.
    pub fn view_records(&self) -> Result<Vec<ViewRecord>> {
        self.views.par_iter().map(ViewData::to_record).collect()
    }

    pub fn camera_count(&self) -> usize {
        self.views.iter().map(|v| v.camera + 1).max().unwrap_or(0)
    }
}
