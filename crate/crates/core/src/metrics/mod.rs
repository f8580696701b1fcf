//! Overlap and surface-distance segmentation metrics.
//!
//! Masks are flat boolean grids with axis 0 varying fastest, paired with a
//! per-axis spacing in mm. Any rank is accepted.

mod distance;
mod overlap;
mod report;
mod surface;

pub use distance::{directed_distances, distance_to_set, percentile, Hausdorff, hausdorff, nsd};
pub use overlap::{dsc_iou, dsc_iou_masks};
pub use report::{evaluate_pair, ClassMetrics, MetricsConfig, MetricsReport, CONNECTIVITY};
pub use surface::{surface_extract, Surface};
