//! Point-wise refinement: kernel point convolution over radius
//! neighborhoods followed by a batch norm, ReLU and classifier head.

pub mod conv;
pub mod head;
pub mod kernel_points;
pub mod neighbors;

pub use conv::{kpconv_apply, kpconv_backward, kpconv_forward, Influences, KPConv, KPConvSaved};
pub use head::PointHead;
pub use kernel_points::{generate_kernel_points, generate_kernel_points_traced, KernelDisposition};
pub use neighbors::{radius_neighbors, NeighborLists};

/// Defaults for the refinement layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KPConvConfig {
    pub kernel_points: usize,
    pub radius: f64,
    pub sigma: f64,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for KPConvConfig {
    fn default() -> Self {
        KPConvConfig {
            kernel_points: 15,
            radius: 0.6,
            sigma: 0.3,
            out_channels: 128,
            seed: 0,
        }
    }
}

impl KPConvConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.kernel_points == 0 || self.out_channels == 0 {
            return Err(crate::Error::argument("kpconv needs K >= 1 and C_out >= 1"));
        }
        if !(self.radius > 0.0 && self.sigma > 0.0) {
            return Err(crate::Error::argument("kpconv radius and sigma must be positive"));
        }
        Ok(())
    }

    pub fn disposition(&self) -> crate::Result<KernelDisposition> {
        self.validate()?;
        // f32-representable geometry so checkpoints restore it exactly
        let radius = f64::from(self.radius as f32);
        let mut d = generate_kernel_points(self.kernel_points, radius, self.seed)?;
        d.sigma = f64::from(self.sigma as f32);
        Ok(d)
    }
}
