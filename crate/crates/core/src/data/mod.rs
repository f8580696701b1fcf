//! Image and label grids, CT preprocessing and the synthetic case generator.
//!
//! Grids are stored with axis 0 varying fastest, the NRRD `sizes` order:
//! element `(i0, i1, i2)` lives at `i0 + n0 * (i1 + n1 * i2)`. A 2-D grid of
//! shape `[W, H]` is therefore exactly the row-major `[H, W]` image the
//! network consumes.

mod preprocess;
mod synth;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use preprocess::{clip_normalize, preprocess, respace, respace_labels, respaced_extents, CLIP_HIGH, CLIP_LOW};
pub use synth::{split_for, synth_case, synth_dataset, SplitRatios, SynthConfig};

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Physical placement shared by images and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: Vec<usize>,
    /// Voxel size per axis in mm.
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    /// Axis runs in the negative world direction (negative diagonal entry
    /// of the direction matrix).
    pub flipped: Vec<bool>,
}

impl Geometry {
    pub fn new(shape: &[usize], spacing: &[f64]) -> Result<Self> {
        let g = Self {
            shape: shape.to_vec(),
            spacing: spacing.to_vec(),
            origin: vec![0.0; shape.len()],
            flipped: vec![false; shape.len()],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.shape.len();
        if !(2..=3).contains(&r) {
            return Err(Error::dim("geometry", format!("rank must be 2 or 3, got shape {:?}", self.shape)));
        }
        if self.shape.contains(&0) {
            return Err(Error::dim("geometry", format!("zero extent in {:?}", self.shape)));
        }
        if self.spacing.len() != r || self.origin.len() != r || self.flipped.len() != r {
            return Err(Error::dim(
                "geometry",
                format!("shape {:?} with spacing {:?}, origin {:?}", self.shape, self.spacing, self.origin),
            ));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter(format!("origin must be finite, got {:?}", self.origin)));
        }
        Ok(())
    }

    /// Same grid layout (extents) as `other`.
    pub fn same_shape(&self, other: &Geometry) -> bool {
        self.shape == other.shape
    }

    /// Spatial extents in row-major order (slowest axis first), as used by
    /// the tensor side.
    pub fn row_major_extents(&self) -> Vec<usize> {
        self.shape.iter().rev().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.numel() {
            return Err(Error::dim(
                "volume",
                format!("{} values for shape {:?}", data.len(), geometry.shape),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("volume value {i} is not finite")));
        }
        Ok(Self { geometry, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.geometry.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.geometry.spacing
    }

    /// `[1, 1, spatial...]` tensor in row-major spatial order.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let mut shape = vec![1, 1];
        shape.extend(self.geometry.row_major_extents());
        Tensor::new(&shape, self.data.iter().map(|&v| S::lit(v as f64)).collect()).expect("shape matches data")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub geometry: Geometry,
    pub data: Vec<u8>,
    pub num_classes: usize,
}

impl LabelMap {
    pub fn new(geometry: Geometry, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.numel() {
            return Err(Error::dim(
                "label_map",
                format!("{} values for shape {:?}", data.len(), geometry.shape),
            ));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Parameter(format!("num_classes must be in [1, 256], got {num_classes}")));
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Label {
                value: v as usize,
                num_classes,
            });
        }
        Ok(Self {
            geometry,
            data,
            num_classes,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.geometry.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.geometry.spacing
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// Fails unless `self` and `image` share extents.
    pub fn check_aligned(&self, image: &Volume) -> Result<()> {
        if self.geometry.same_shape(&image.geometry) {
            Ok(())
        } else {
            Err(Error::dim(
                "sample",
                format!("label shape {:?} vs image shape {:?}", self.shape(), image.shape()),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub label: LabelMap,
    pub case_id: String,
    pub split: Split,
}

impl Sample {
    pub fn new(image: Volume, label: LabelMap, case_id: impl Into<String>, split: Split) -> Result<Self> {
        label.check_aligned(&image)?;
        Ok(Self {
            image,
            label,
            case_id: case_id.into(),
            split,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(Geometry::new(&[2, 3], &[1.0, 1.0]).is_ok());
        assert!(matches!(Geometry::new(&[2, 3], &[1.0, 0.0]), Err(Error::Parameter(_))));
        assert!(matches!(Geometry::new(&[4], &[1.0]), Err(Error::Dimension { .. })));
        let g = Geometry::new(&[2, 2], &[1.0, 1.0]).unwrap();
        assert_eq!(
            LabelMap::new(g.clone(), vec![0, 1, 2, 3], 3),
            Err(Error::Label { value: 3, num_classes: 3 })
        );
        assert!(Volume::new(g, vec![0.0, f32::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn tensor_layout_is_row_major() {
        // shape [W=3, H=2]: axis 0 fastest
        let g = Geometry::new(&[3, 2], &[1.0, 1.0]).unwrap();
        let v = Volume::new(g, (0..6).map(|i| i as f32).collect()).unwrap();
        let t = v.to_tensor::<f64>();
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(t.at(&[0, 0, 1, 0]), 3.0);
    }
}
