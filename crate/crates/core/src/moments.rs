use crate::error::{Error, Result};
use crate::tape::Var;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-instance, per-channel statistics of a feature map, both shaped `(N, C)`.
#[derive(Clone, Copy, Debug)]
pub struct Moments<'t> {
    pub mean: Var<'t>,
    /// `sqrt(population variance + epsilon)`.
    pub std: Var<'t>,
}

impl<'t> Moments<'t> {
    /// Mean reshaped to `(N, C, 1, 1)` for broadcasting over a map.
    pub fn mean_map(&self) -> Result<Var<'t>> {
        let s = self.mean.shape();
        self.mean.reshape(&[s[0], s[1], 1, 1])
    }

    pub fn std_map(&self) -> Result<Var<'t>> {
        let s = self.std.shape();
        self.std.reshape(&[s[0], s[1], 1, 1])
    }
}

pub(crate) fn check_feature_map(op: &'static str, x: &Var<'_>) -> Result<[usize; 4]> {
    match x.shape()[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects an (N, C, H, W) feature map"),
        }),
    }
}

/// Spatial mean and standard deviation (population variance) of every
/// `(n, c)` plane.
pub fn instance_moments<'t>(x: Var<'t>, epsilon: f64) -> Result<Moments<'t>> {
    let [n, c, _, _] = check_feature_map("instance_moments", &x)?;
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Domain {
            op: "instance_moments",
            reason: format!("epsilon must be non-negative, got {epsilon}"),
        });
    }
    let mean = x.mean_axes(&[2, 3])?;
    let var = x.sub(mean)?.square().mean_axes(&[2, 3])?;
    let std = var.add_scalar(epsilon).sqrt()?;
    Ok(Moments {
        mean: mean.reshape(&[n, c])?,
        std: std.reshape(&[n, c])?,
    })
}
