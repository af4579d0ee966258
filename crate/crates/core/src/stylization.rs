//! Instance normalization, factorized instance normalization (FIN), the
//! self-attention generator for spatial style parameters, and AdaIN.
//!
//! FIN restyles a normalized content map in two affine stages:
//!
//! ```text
//! FIN(F_c) = γ_s ⊙ (γ_ind ⊙ F̄_c + β_ind) + β_s
//! ```
//!
//! `γ_ind, β_ind` are learned per channel and independent of the style.
//! `γ_s, β_s` vary over channels *and* space; with attention enabled they are
//! `ReLU(W ⊗ SA(F̄_c, F̄_s))` for two 1×1 convolutions `W_γ, W_β`.

use crate::error::{Error, Result};
use crate::moments::{check_feature_map, instance_moments};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standardizes every `(n, c)` plane to zero mean and unit population variance.
pub fn instance_normalize<'t>(x: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    let m = instance_moments(x, epsilon)?;
    x.sub(m.mean_map()?)?.div(m.std_map()?)
}

/// Replaces the content's per-channel moments with the style's.
pub fn adain<'t>(content: Var<'t>, style: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    let [_, cc, _, _] = check_feature_map("adain", &content)?;
    let [_, cs, _, _] = check_feature_map("adain", &style)?;
    if cc != cs {
        return Err(Error::ShapeMismatch {
            op: "adain",
            lhs: content.shape(),
            rhs: style.shape(),
        });
    }
    let target = instance_moments(style, epsilon)?;
    instance_normalize(content, epsilon)?
        .mul(target.std_map()?)?
        .add(target.mean_map()?)
}

/// Style-independent per-channel affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FinParams {
    /// `(C,)`
    pub gamma_ind: Tensor,
    /// `(C,)`
    pub beta_ind: Tensor,
}

impl FinParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma_ind: Tensor::ones(&[channels]),
            beta_ind: Tensor::zeros(&[channels]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FinVars<'t> {
    pub gamma_ind: Var<'t>,
    pub beta_ind: Var<'t>,
}

/// Style-dependent spatial parameters, each shaped like the content map.
#[derive(Clone, Copy, Debug)]
pub struct StyleParams<'t> {
    pub gamma_s: Var<'t>,
    pub beta_s: Var<'t>,
}

/// Learnable parameters of one SAFIN module over `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SafinWeights {
    pub fin: FinParams,
    /// Query projection `(C', C, 1, 1)`, `C' = max(1, C / 8)`.
    pub w_f: Tensor,
    /// Key projection `(C', C, 1, 1)`.
    pub w_g: Tensor,
    /// Value projection `(C, C, 1, 1)`.
    pub w_h: Tensor,
    pub w_gamma: Tensor,
    pub w_beta: Tensor,
}

pub const SAFIN_PARAM_NAMES: [&str; 7] =
    ["gamma_ind", "beta_ind", "w_f", "w_g", "w_h", "w_gamma", "w_beta"];

pub fn attention_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

/// 1×1 kernel drawn uniformly from ±1/√fan_in.
fn pointwise_kernel(out: usize, inp: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = 1.0 / (inp as f64).sqrt();
    Tensor::from_fn(&[out, inp, 1, 1], |_| rng.uniform(-bound, bound))
}

impl SafinWeights {
    /// Seeded initialization; FIN starts at the identity.
    pub fn init(channels: usize, rng: &mut SplitMix64) -> Self {
        let reduced = attention_channels(channels);
        Self {
            fin: FinParams::identity(channels),
            w_f: pointwise_kernel(reduced, channels, rng),
            w_g: pointwise_kernel(reduced, channels, rng),
            w_h: pointwise_kernel(channels, channels, rng),
            w_gamma: pointwise_kernel(channels, channels, rng),
            w_beta: pointwise_kernel(channels, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.fin.gamma_ind.len()
    }

    /// Tensors in [`SAFIN_PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.fin.gamma_ind,
            &self.fin.beta_ind,
            &self.w_f,
            &self.w_g,
            &self.w_h,
            &self.w_gamma,
            &self.w_beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.fin.gamma_ind,
            &mut self.fin.beta_ind,
            &mut self.w_f,
            &mut self.w_g,
            &mut self.w_h,
            &mut self.w_gamma,
            &mut self.w_beta,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let r = attention_channels(c);
        let expect: [&[usize]; 7] = [
            &[c],
            &[c],
            &[r, c, 1, 1],
            &[r, c, 1, 1],
            &[c, c, 1, 1],
            &[c, c, 1, 1],
            &[c, c, 1, 1],
        ];
        for ((name, t), shape) in SAFIN_PARAM_NAMES.iter().zip(self.tensors()).zip(expect) {
            if t.shape() != shape {
                return Err(Error::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: format!("{name} should be {shape:?}"),
                });
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> SafinVars<'t> {
        let vars = self.tensors().map(|t| tape.param(t.clone()));
        SafinVars::from_vars(&vars)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SafinVars<'t> {
    pub fin: FinVars<'t>,
    pub w_f: Var<'t>,
    pub w_g: Var<'t>,
    pub w_h: Var<'t>,
    pub w_gamma: Var<'t>,
    pub w_beta: Var<'t>,
}

impl<'t> SafinVars<'t> {
    /// Rebuilds from seven vars in [`SAFIN_PARAM_NAMES`] order.
    pub fn from_vars(v: &[Var<'t>]) -> Self {
        assert_eq!(v.len(), 7, "SAFIN has seven parameter tensors");
        Self {
            fin: FinVars {
                gamma_ind: v[0],
                beta_ind: v[1],
            },
            w_f: v[2],
            w_g: v[3],
            w_h: v[4],
            w_gamma: v[5],
            w_beta: v[6],
        }
    }

    pub fn vars(&self) -> [Var<'t>; 7] {
        [
            self.fin.gamma_ind,
            self.fin.beta_ind,
            self.w_f,
            self.w_g,
            self.w_h,
            self.w_gamma,
            self.w_beta,
        ]
    }
}

fn channel_map<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let c = v.shape()[0];
    v.reshape(&[1, c, 1, 1])
}

/// `γ_s ⊙ (γ_ind ⊙ F̄_c + β_ind) + β_s`.
pub fn fin_apply<'t>(
    f_c_bar: Var<'t>,
    fin: &FinVars<'t>,
    style: &StyleParams<'t>,
) -> Result<Var<'t>> {
    let shape = f_c_bar.shape();
    let [_, c, _, _] = check_feature_map("fin_apply", &f_c_bar)?;
    for p in [fin.gamma_ind, fin.beta_ind] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "fin_apply",
                lhs: shape,
                rhs: p.shape(),
            });
        }
    }
    for s in [style.gamma_s, style.beta_s] {
        if s.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "fin_apply",
                lhs: shape,
                rhs: s.shape(),
            });
        }
    }
    let inner = f_c_bar
        .mul(channel_map(fin.gamma_ind)?)?
        .add(channel_map(fin.beta_ind)?)?;
    inner.mul(style.gamma_s)?.add(style.beta_s)
}

/// `(C, H, W)` plane of instance `n` as an `(H·W, C)` matrix of position vectors.
fn positions<'t>(x: Var<'t>, n: usize) -> Result<Var<'t>> {
    let [_, c, h, w] = check_feature_map("self_attention", &x)?;
    x.narrow_batch(n)?.reshape(&[c, h * w])?.transpose()
}

/// Self-attention output and the per-instance attention matrices
/// `(H_c·W_c, H_s·W_s)`.
pub fn self_attention_with_maps<'t>(
    f_c_bar: Var<'t>,
    f_s_bar: Var<'t>,
    w: &SafinVars<'t>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let [nc, cc, hc, wc] = check_feature_map("self_attention", &f_c_bar)?;
    let [ns, cs, _, _] = check_feature_map("self_attention", &f_s_bar)?;
    if nc != ns || cc != cs {
        return Err(Error::ShapeMismatch {
            op: "self_attention",
            lhs: f_c_bar.shape(),
            rhs: f_s_bar.shape(),
        });
    }
    let query = f_c_bar.conv2d(w.w_f, 1, 0)?;
    let key = f_s_bar.conv2d(w.w_g, 1, 0)?;
    let value = f_s_bar.conv2d(w.w_h, 1, 0)?;
    if value.shape()[1] != cc {
        return Err(Error::ShapeMismatch {
            op: "self_attention",
            lhs: f_c_bar.shape(),
            rhs: value.shape(),
        });
    }

    let mut outputs = Vec::with_capacity(nc);
    let mut maps = Vec::with_capacity(nc);
    for n in 0..nc {
        let q = positions(query, n)?;
        let k = positions(key, n)?;
        let v = positions(value, n)?;
        let attention = q.matmul(k.transpose()?)?.softmax_rows()?;
        let mixed = attention.matmul(v)?;
        outputs.push(mixed.transpose()?.reshape(&[1, cc, hc, wc])?);
        maps.push(attention);
    }
    Ok((Var::concat_batch(&outputs)?, maps))
}

/// For each content position, the softmax-weighted mix of projected style
/// positions.
pub fn self_attention<'t>(
    f_c_bar: Var<'t>,
    f_s_bar: Var<'t>,
    w: &SafinVars<'t>,
) -> Result<Var<'t>> {
    Ok(self_attention_with_maps(f_c_bar, f_s_bar, w)?.0)
}

/// `γ_s = ReLU(W_γ ⊗ SA(F̄_c, F̄_s))`, `β_s = ReLU(W_β ⊗ SA(F̄_c, F̄_s))`.
pub fn safin_params<'t>(
    f_c_bar: Var<'t>,
    f_s_bar: Var<'t>,
    w: &SafinVars<'t>,
) -> Result<StyleParams<'t>> {
    let attended = self_attention(f_c_bar, f_s_bar, w)?;
    Ok(StyleParams {
        gamma_s: attended.conv2d(w.w_gamma, 1, 0)?.relu(),
        beta_s: attended.conv2d(w.w_beta, 1, 0)?.relu(),
    })
}

/// Attention-free parameters: the same projections applied to the spatial
/// mean of the raw style map, constant over the content grid.
pub fn fin_only_params<'t>(
    f_c_bar: Var<'t>,
    f_s: Var<'t>,
    w: &SafinVars<'t>,
) -> Result<StyleParams<'t>> {
    let shape = f_c_bar.shape();
    let [nc, cc, _, _] = check_feature_map("fin_only_params", &f_c_bar)?;
    let [ns, cs, _, _] = check_feature_map("fin_only_params", &f_s)?;
    if nc != ns || cc != cs {
        return Err(Error::ShapeMismatch {
            op: "fin_only_params",
            lhs: shape,
            rhs: f_s.shape(),
        });
    }
    // normalized maps have zero spatial mean, so pool the raw style features
    let pooled = f_s.mean_axes(&[2, 3])?;
    Ok(StyleParams {
        gamma_s: pooled.conv2d(w.w_gamma, 1, 0)?.relu().expand(&shape)?,
        beta_s: pooled.conv2d(w.w_beta, 1, 0)?.relu().expand(&shape)?,
    })
}

/// Normalizes both maps, generates style parameters (by attention or by the
/// FIN-only fallback), and applies FIN to the content.
pub fn safin_forward<'t>(
    f_c: Var<'t>,
    f_s: Var<'t>,
    w: &SafinVars<'t>,
    epsilon: f64,
    attention_enabled: bool,
) -> Result<Var<'t>> {
    let f_c_bar = instance_normalize(f_c, epsilon)?;
    let style = if attention_enabled {
        let f_s_bar = instance_normalize(f_s, epsilon)?;
        safin_params(f_c_bar, f_s_bar, w)?
    } else {
        fin_only_params(f_c_bar, f_s, w)?
    };
    fin_apply(f_c_bar, &w.fin, &style)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;

    fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.off_kink(0.1, 2.0))
    }

    #[test]
    fn normalize_examples() {
        let tape = Tape::new();
        let c = instance_normalize(tape.constant(Tensor::full(&[1, 2, 2, 2], 4.0)), 1e-5).unwrap();
        assert!(c.value().data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = instance_normalize(x, 0.0).unwrap().value();
        for (got, want) in y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn fin_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64).sin()));
        let fin = FinVars {
            gamma_ind: tape.constant(Tensor::ones(&[3])),
            beta_ind: tape.constant(Tensor::zeros(&[3])),
        };
        let style = StyleParams {
            gamma_s: tape.constant(Tensor::ones(&[2, 3, 2, 2])),
            beta_s: tape.constant(Tensor::zeros(&[2, 3, 2, 2])),
        };
        assert!(fin_apply(x, &fin, &style).unwrap().value().bit_eq(&x.value()));

        let scalar = |v: f64, shape: &[usize]| tape.constant(Tensor::full(shape, v));
        let out = fin_apply(
            scalar(0.5, &[1, 1, 1, 1]),
            &FinVars {
                gamma_ind: scalar(2.0, &[1]),
                beta_ind: scalar(1.0, &[1]),
            },
            &StyleParams {
                gamma_s: scalar(3.0, &[1, 1, 1, 1]),
                beta_s: scalar(-1.0, &[1, 1, 1, 1]),
            },
        )
        .unwrap();
        assert_eq!(out.value().data(), &[5.0]);

        // zero content isolates γ_s ⊙ β_ind + β_s
        let mut rng = SplitMix64::new(2);
        let gs = random(&[1, 2, 2, 2], &mut rng);
        let bs = random(&[1, 2, 2, 2], &mut rng);
        let bind = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let out = fin_apply(
            tape.constant(Tensor::zeros(&[1, 2, 2, 2])),
            &FinVars {
                gamma_ind: scalar(1.5, &[2]),
                beta_ind: tape.constant(bind.clone()),
            },
            &StyleParams {
                gamma_s: tape.constant(gs.clone()),
                beta_s: tape.constant(bs.clone()),
            },
        )
        .unwrap()
        .value();
        for i in 0..8 {
            let want = gs.data()[i] * bind.data()[i / 4] + bs.data()[i];
            assert_eq!(out.data()[i], want);
        }
    }

    #[test]
    fn fin_rejects_mismatched_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let fin = FinVars {
            gamma_ind: tape.constant(Tensor::ones(&[3])),
            beta_ind: tape.constant(Tensor::zeros(&[3])),
        };
        let style = StyleParams {
            gamma_s: x,
            beta_s: x,
        };
        assert!(matches!(fin_apply(x, &fin, &style), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_position_attention_is_exact() {
        let mut rng = SplitMix64::new(4);
        let w = SafinWeights::init(8, &mut rng);
        let tape = Tape::new();
        let wv = w.bind(&tape);
        let c = tape.constant(random(&[1, 8, 1, 1], &mut rng));
        let s_val = random(&[1, 8, 1, 1], &mut rng);
        let s = tape.constant(s_val.clone());
        let (out, maps) = self_attention_with_maps(c, s, &wv).unwrap();
        assert_eq!(maps[0].value().data(), &[1.0]);
        let projected = s.conv2d(wv.w_h, 1, 0).unwrap().value();
        assert!(out.value().bit_eq(&projected));
    }

    #[test]
    fn attention_is_row_stochastic_across_sizes() {
        let mut rng = SplitMix64::new(5);
        let w = SafinWeights::init(16, &mut rng);
        let tape = Tape::new();
        let wv = w.bind(&tape);
        let c = tape.constant(random(&[2, 16, 4, 2], &mut rng));
        let s = tape.constant(random(&[2, 16, 3, 5], &mut rng));
        let (out, maps) = self_attention_with_maps(c, s, &wv).unwrap();
        assert_eq!(out.shape(), vec![2, 16, 4, 2]);
        for m in maps {
            assert_eq!(m.shape(), vec![8, 15]);
            for row in m.value().data().chunks(15) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
        let mismatched = tape.constant(random(&[2, 8, 3, 5], &mut rng));
        assert!(self_attention(c, mismatched, &wv).is_err());
    }

    #[test]
    fn safin_params_are_nonnegative() {
        let mut rng = SplitMix64::new(6);
        let mut any_positive = false;
        for _ in 0..100 {
            let w = SafinWeights::init(8, &mut rng);
            let tape = Tape::new();
            let wv = w.bind(&tape);
            let c = tape.constant(random(&[1, 8, 2, 2], &mut rng));
            let s = tape.constant(random(&[1, 8, 2, 2], &mut rng));
            let p = safin_params(c, s, &wv).unwrap();
            let g = p.gamma_s.value();
            assert!(g.data().iter().all(|&v| v >= 0.0));
            assert!(p.beta_s.value().data().iter().all(|&v| v >= 0.0));
            any_positive |= g.data().iter().any(|&v| v > 0.0);
        }
        assert!(any_positive);
    }

    #[test]
    fn zero_projections_give_zero_params() {
        let mut rng = SplitMix64::new(7);
        let mut w = SafinWeights::init(8, &mut rng);
        w.w_gamma = Tensor::zeros(w.w_gamma.shape());
        w.w_beta = Tensor::zeros(w.w_beta.shape());
        let tape = Tape::new();
        let wv = w.bind(&tape);
        let c = tape.constant(random(&[1, 8, 2, 2], &mut rng));
        let p = safin_params(c, c, &wv).unwrap();
        assert!(p.gamma_s.value().data().iter().all(|&v| v == 0.0));
        assert!(p.beta_s.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ablation_is_exactly_the_fallback() {
        let mut rng = SplitMix64::new(8);
        let w = SafinWeights::init(8, &mut rng);
        let fc = random(&[2, 8, 4, 4], &mut rng);
        let fs = random(&[2, 8, 2, 6], &mut rng);
        let tape = Tape::new();
        let wv = w.bind(&tape);
        let (c, s) = (tape.constant(fc), tape.constant(fs));
        let off = safin_forward(c, s, &wv, 1e-5, false).unwrap().value();
        let f_c_bar = instance_normalize(c, 1e-5).unwrap();
        let style = fin_only_params(f_c_bar, s, &wv).unwrap();
        let manual = fin_apply(f_c_bar, &wv.fin, &style).unwrap().value();
        assert!(off.bit_eq(&manual));
        let on = safin_forward(c, s, &wv, 1e-5, true).unwrap().value();
        assert_eq!(on.shape(), off.shape());
        assert!(on.max_abs_diff(&off) > 1e-6);
    }

    #[test]
    fn adain_examples() {
        let mut rng = SplitMix64::new(9);
        let tape = Tape::new();
        let x = tape.constant(random(&[2, 3, 4, 4], &mut rng));
        let same = adain(x, x, 1e-5).unwrap().value();
        assert!(same.max_abs_diff(&x.value()) < 1e-6);

        let style = tape.constant(random(&[2, 3, 6, 2], &mut rng));
        let out = adain(x, style, 1e-5).unwrap();
        let got = instance_moments(out, 0.0).unwrap();
        let want = instance_moments(style, 0.0).unwrap();
        assert!(got.mean.value().max_abs_diff(&want.mean.value()) < 1e-3);
        assert!(got.std.value().max_abs_diff(&want.std.value()) < 1e-3);

        let flat = tape.constant(Tensor::full(&[2, 3, 4, 4], 2.0));
        let out = adain(flat, style, 1e-5).unwrap().value();
        let mean = want.mean.value();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, mean.data()[i / 16]);
        }
        let wrong = tape.constant(Tensor::zeros(&[2, 4, 4, 4]));
        assert!(adain(x, wrong, 1e-5).is_err());
    }

    #[test]
    fn safin_forward_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(10);
        for attention in [true, false] {
            let w = SafinWeights::init(8, &mut rng);
            let fc = random(&[2, 8, 2, 3], &mut rng);
            let fs = random(&[2, 8, 3, 2], &mut rng);
            let probe = random(&[2, 8, 2, 3], &mut rng);
            let mut inputs: Vec<Tensor> = w.tensors().into_iter().cloned().collect();
            // perturb FIN away from the identity so its gradient is generic
            inputs[0] = random(&[8], &mut rng);
            inputs[1] = random(&[8], &mut rng);
            inputs.push(fc);
            inputs.push(fs);
            let err = grad_check_many(
                |tape, v| {
                    let w = SafinVars::from_vars(&v[..7]);
                    let out = safin_forward(v[7], v[8], &w, 1e-5, attention)?;
                    Ok(out.mul(tape.constant(probe.clone()))?.sum())
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "attention={attention}: {err}");
        }
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let mut rng = SplitMix64::new(12);
        let w = SafinWeights::init(8, &mut rng);
        let tape = Tape::new();
        let wv = w.bind(&tape);
        let c = tape.constant(random(&[1, 8, 3, 3], &mut rng));
        let s = tape.constant(random(&[1, 8, 3, 3], &mut rng));
        let probe = tape.constant(random(&[1, 8, 3, 3], &mut rng));
        safin_forward(c, s, &wv, 1e-5, true)
            .unwrap()
            .mul(probe)
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        for (name, v) in SAFIN_PARAM_NAMES.iter().zip(wv.vars()) {
            let g = v.grad().expect(name);
            assert!(g.sum_squares() > 0.0, "{name} has a zero gradient");
        }
    }
}
