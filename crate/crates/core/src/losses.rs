//! Content and style losses on the LL bands of encoder taps.
//!
//! ```text
//! L_c = ‖LL(relu4_1(I_cs)) − LL(relu4_1(I_c))‖₂
//! L_s = Σ_k ‖μ(LL(relu_k_1(I_cs))) − μ(LL(relu_k_1(I_s)))‖₂
//!         + ‖σ(LL(relu_k_1(I_cs))) − σ(LL(relu_k_1(I_s)))‖₂
//! L   = L_c + λ_s · L_s
//! ```
//!
//! Norms are plain Euclidean norms per instance, averaged over the batch.

use crate::error::{Error, Result};
use crate::moments::instance_moments;
use crate::tape::Var;
use crate::wavelet::wavelet_pool;

pub const DEFAULT_LAMBDA_S: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: DEFAULT_LAMBDA_S,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_s: f64) -> Result<Self> {
        if lambda_s.is_nan() || lambda_s < 0.0 || lambda_s.is_infinite() {
            return Err(Error::Config(format!("lambda_s must be >= 0, got {lambda_s}")));
        }
        Ok(Self { lambda_s })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub per_layer_style: [f64; 4],
    pub total: f64,
}

/// LL band of a tap.
pub fn ll_of_tap(feature: Var<'_>) -> Result<Var<'_>> {
    Ok(wavelet_pool(feature)?.ll)
}

/// Euclidean norm of each instance's slice of `diff`, averaged over the batch.
fn batch_norm_l2(diff: Var<'_>) -> Result<Var<'_>> {
    let shape = diff.shape();
    let axes: Vec<usize> = (1..shape.len()).collect();
    let per_instance = diff.square().sum_axes(&axes)?.sqrt()?;
    Ok(per_instance.sum().scale(1.0 / shape[0] as f64))
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Distance between the deepest taps' LL bands.
pub fn content_loss<'t>(taps_out: &[Var<'t>; 4], taps_content: &[Var<'t>; 4]) -> Result<Var<'t>> {
    same_shape("content_loss", &taps_out[3], &taps_content[3])?;
    let diff = ll_of_tap(taps_out[3])?.sub(ll_of_tap(taps_content[3])?)?;
    batch_norm_l2(diff)
}

/// Moment distance of LL bands at every tap: the total and each layer's term.
pub fn style_loss<'t>(
    taps_out: &[Var<'t>; 4],
    taps_style: &[Var<'t>; 4],
    epsilon: f64,
) -> Result<(Var<'t>, [Var<'t>; 4])> {
    let mut layers = Vec::with_capacity(4);
    for (out, style) in taps_out.iter().zip(taps_style) {
        let (so, ss) = (out.shape(), style.shape());
        if so.len() != 4 || ss.len() != 4 || so[..2] != ss[..2] {
            return Err(Error::ShapeMismatch {
                op: "style_loss",
                lhs: so,
                rhs: ss,
            });
        }
        let mo = instance_moments(ll_of_tap(*out)?, epsilon)?;
        let ms = instance_moments(ll_of_tap(*style)?, epsilon)?;
        let term = batch_norm_l2(mo.mean.sub(ms.mean)?)?.add(batch_norm_l2(mo.std.sub(ms.std)?)?)?;
        layers.push(term);
    }
    let total = layers[0].add(layers[1])?.add(layers[2])?.add(layers[3])?;
    Ok((total, layers.try_into().expect("four layers")))
}

pub fn total_loss(content: f64, style: f64, w: LossWeights) -> f64 {
    content + w.lambda_s * style
}

pub fn total_loss_var<'t>(content: Var<'t>, style: Var<'t>, w: LossWeights) -> Result<Var<'t>> {
    content.add(style.scale(w.lambda_s))
}

impl LossReport {
    pub fn from_terms(content: f64, per_layer_style: [f64; 4], w: LossWeights) -> Self {
        let style = per_layer_style.iter().sum();
        Self {
            content,
            style,
            per_layer_style,
            total: total_loss(content, style, w),
        }
    }
}
