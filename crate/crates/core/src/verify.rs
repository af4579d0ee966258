//! Invariant suites run by `safin verify`. Each check reports the worst
//! error it measured next to its tolerance.

use std::fmt;

use crate::error::Result;
use crate::gradcheck::grad_check_many;
use crate::losses::{content_loss, style_loss, total_loss, LossWeights};
use crate::moments::{instance_moments, DEFAULT_EPSILON};
use crate::network::{encode, LearnableVars, StyleNet, StylizationConfig};
use crate::rng::SplitMix64;
use crate::stylization::{
    adain, fin_apply, instance_normalize, safin_forward, safin_params, self_attention_with_maps, FinVars, SafinVars,
    SafinWeights, StyleParams,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::loss_graph;
use crate::wavelet::{wavelet_energy, wavelet_pool, wavelet_unpool};

/// Finite-difference step for every gradient check.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ROUNDTRIP_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    All,
    Wavelet,
    Grad,
    Norm,
    Loss,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    /// Exact checks pass only when `worst == 0`.
    pub exact: bool,
}

impl Check {
    fn below(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            worst,
            tolerance,
            exact: false,
        }
    }

    fn exact(name: impl Into<String>, worst: f64) -> Self {
        Self {
            name: name.into(),
            worst,
            tolerance: 0.0,
            exact: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.exact {
            self.worst == 0.0
        } else {
            self.worst < self.tolerance
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        if self.exact {
            write!(f, "{verdict}  {:<44} worst {:.3e} (exact)", self.name, self.worst)
        } else {
            write!(
                f,
                "{verdict}  {:<44} worst {:.3e} < {:.0e}",
                self.name, self.worst, self.tolerance
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

pub fn run(suite: Suite) -> Result<Vec<SuiteReport>> {
    match suite {
        Suite::All => Ok(vec![wavelet_suite()?, grad_suite()?, norm_suite()?, loss_suite()?]),
        Suite::Wavelet => Ok(vec![wavelet_suite()?]),
        Suite::Grad => Ok(vec![grad_suite()?]),
        Suite::Norm => Ok(vec![norm_suite()?]),
        Suite::Loss => Ok(vec![loss_suite()?]),
    }
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.off_kink(0.1, 2.0))
}

/// Exact reconstruction over 100 random maps and the 2×2 golden values.
pub fn wavelet_suite() -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(0x5afe);
    let mut roundtrip = 0.0f64;
    let mut energy = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(2);
        let c = 1 + rng.below(8);
        let s = [4, 8, 16][rng.below(3)];
        let x = Tensor::from_fn(&[n, c, s, s], |_| rng.uniform(-10.0, 10.0));
        let tape = Tape::new();
        let bands = wavelet_pool(tape.constant(x.clone()))?;
        let back = wavelet_unpool(&bands)?.value();
        roundtrip = roundtrip.max(back.max_abs_diff(&x));
        energy = energy.max((wavelet_energy(&bands) - x.sum_squares()).abs() / x.sum_squares().max(1.0));
    }

    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?);
    let b = wavelet_pool(x)?;
    let got = b.as_array().map(|v| v.value().data()[0]);
    let golden = got
        .iter()
        .zip([5.0, 1.0, 2.0, 0.0])
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);

    Ok(SuiteReport {
        suite: "wavelet",
        checks: vec![
            Check::below("roundtrip max |unpool(pool(x)) - x|", roundtrip, ROUNDTRIP_TOLERANCE),
            Check::below("band energy vs input (relative)", energy, 1e-9),
            Check::below("golden bands of [[1,2],[3,4]]", golden, 1e-12),
            Check::below("golden energy 30", (wavelet_energy(&b) - 30.0).abs(), 1e-9),
        ],
    })
}

type Objective = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

fn objective<F>(f: F) -> Objective
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    Box::new(f)
}

/// `Σ f(inputs) ⊙ probe`, giving every output coordinate its own weight.
fn probed<F>(probe: Tensor, f: F) -> Objective
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    Box::new(move |tape, v| Ok(f(tape, v)?.mul(tape.constant(probe.clone()))?.sum()))
}

fn primitive_cases(rng: &mut SplitMix64) -> Vec<(&'static str, Objective, Vec<Tensor>)> {
    let mut r = |s: &[usize]| random(s, rng);
    let positive = Tensor::from_fn(&[2, 3], |i| 0.5 + 0.25 * i as f64);
    vec![
        ("add (broadcast)", probed(r(&[2, 3]), |_, v| v[0].add(v[1])), vec![r(&[2, 3]), r(&[3])]),
        ("sub (broadcast)", probed(r(&[2, 3]), |_, v| v[0].sub(v[1])), vec![r(&[2, 1]), r(&[2, 3])]),
        ("mul (broadcast)", probed(r(&[2, 3]), |_, v| v[0].mul(v[1])), vec![r(&[2, 3]), r(&[1, 3])]),
        ("div", probed(r(&[2, 3]), |_, v| v[0].div(v[1])), vec![r(&[2, 3]), r(&[2, 3])]),
        ("relu", probed(r(&[2, 3]), |_, v| Ok(v[0].relu())), vec![r(&[2, 3])]),
        ("square", probed(r(&[2, 3]), |_, v| Ok(v[0].square())), vec![r(&[2, 3])]),
        ("sqrt", probed(r(&[2, 3]), |_, v| v[0].sqrt()), vec![positive]),
        ("scale + add_scalar", probed(r(&[2, 3]), |_, v| Ok(v[0].scale(-1.5).add_scalar(0.25))), vec![r(&[2, 3])]),
        ("clamp", probed(r(&[2, 3]), |_, v| Ok(v[0].clamp(-1.05, 1.05))), vec![r(&[2, 3])]),
        ("reshape", probed(r(&[3, 2]), |_, v| v[0].reshape(&[3, 2])), vec![r(&[2, 3])]),
        ("expand", probed(r(&[2, 2, 3]), |_, v| v[0].expand(&[2, 2, 3])), vec![r(&[2, 1, 3])]),
        ("sum_axes", probed(r(&[2, 1, 1]), |_, v| v[0].sum_axes(&[1, 2])), vec![r(&[2, 3, 2])]),
        ("mean_axes", probed(r(&[1, 3, 1]), |_, v| v[0].mean_axes(&[0, 2])), vec![r(&[2, 3, 2])]),
        ("matmul", probed(r(&[2, 4]), |_, v| v[0].matmul(v[1])), vec![r(&[2, 3]), r(&[3, 4])]),
        ("transpose", probed(r(&[3, 2]), |_, v| v[0].transpose()), vec![r(&[2, 3])]),
        ("softmax_rows", probed(r(&[3, 4]), |_, v| v[0].softmax_rows()), vec![r(&[3, 4])]),
        (
            "narrow_batch + concat_batch",
            probed(r(&[3, 2]), |_, v| Var::concat_batch(&[v[0].narrow_batch(1)?, v[0].narrow_batch(0)?, v[0].narrow_batch(1)?])),
            vec![r(&[2, 2])],
        ),
        ("conv2d k3 s1 p1", probed(r(&[2, 3, 4, 5]), |_, v| v[0].conv2d(v[1], 1, 1)), vec![r(&[2, 2, 4, 5]), r(&[3, 2, 3, 3])]),
        ("conv2d k3 s2 p1", probed(r(&[1, 2, 3, 4]), |_, v| v[0].conv2d(v[1], 2, 1)), vec![r(&[1, 3, 5, 7]), r(&[2, 3, 3, 3])]),
        ("conv2d k2 s2 p0", probed(r(&[1, 2, 2, 3]), |_, v| v[0].conv2d(v[1], 2, 0)), vec![r(&[1, 2, 4, 6]), r(&[2, 2, 2, 2])]),
        ("conv2d k1 s1 p0", probed(r(&[2, 4, 3, 3]), |_, v| v[0].conv2d(v[1], 1, 0)), vec![r(&[2, 3, 3, 3]), r(&[4, 3, 1, 1])]),
        (
            "wavelet pool",
            objective({
                let probes: Vec<Tensor> = (0..4).map(|_| random(&[2, 2, 2, 3], &mut SplitMix64::new(91))).collect();
                let probes = [
                    probes[0].clone(),
                    probes[1].map(|v| -v),
                    probes[2].map(|v| 0.5 * v),
                    probes[3].map(|v| v * v),
                ];
                move |tape, v| {
                    let bands = wavelet_pool(v[0])?.as_array();
                    let mut acc = bands[0].mul(tape.constant(probes[0].clone()))?.sum();
                    for (b, p) in bands.iter().zip(&probes).skip(1) {
                        acc = acc.add(b.mul(tape.constant(p.clone()))?.sum())?;
                    }
                    Ok(acc)
                }
            }),
            vec![r(&[2, 2, 4, 6])],
        ),
        (
            "wavelet unpool",
            probed(r(&[1, 2, 4, 4]), |_, v| {
                let bands = wavelet_pool(v[0])?;
                let bands = crate::wavelet::WaveletBands {
                    ll: bands.ll.mul(v[1])?,
                    ..bands
                };
                wavelet_unpool(&bands)
            }),
            vec![r(&[1, 2, 4, 4]), r(&[1, 2, 2, 2])],
        ),
        (
            "instance moments",
            probed(r(&[2, 3]), |tape, v| {
                let m = instance_moments(v[0], DEFAULT_EPSILON)?;
                m.mean.add(m.std.mul(tape.constant(Tensor::full(&[2, 3], 0.7)))?)
            }),
            vec![r(&[2, 3, 3, 2])],
        ),
        ("instance_normalize", probed(r(&[2, 3, 3, 2]), |_, v| instance_normalize(v[0], DEFAULT_EPSILON)), vec![r(&[2, 3, 3, 2])]),
        ("adain", probed(r(&[2, 3, 2, 2]), |_, v| adain(v[0], v[1], DEFAULT_EPSILON)), vec![r(&[2, 3, 2, 2]), r(&[2, 3, 3, 3])]),
    ]
}

fn safin_composite(attention: bool, rng: &mut SplitMix64) -> Result<f64> {
    let w = SafinWeights::init(8, rng);
    let mut inputs: Vec<Tensor> = w.tensors().into_iter().cloned().collect();
    inputs[0] = random(&[8], rng);
    inputs[1] = random(&[8], rng);
    inputs.push(random(&[2, 8, 2, 3], rng));
    inputs.push(random(&[2, 8, 3, 2], rng));
    let probe = random(&[2, 8, 2, 3], rng);
    grad_check_many(
        move |tape, v| {
            let w = SafinVars::from_vars(&v[..7]);
            let out = safin_forward(v[7], v[8], &w, DEFAULT_EPSILON, attention)?;
            Ok(out.mul(tape.constant(probe.clone()))?.sum())
        },
        &inputs,
        FD_STEP,
    )
}

/// Reduced network for the full-graph check.
pub const GRAPH_IMAGE_SIZE: usize = 16;
pub const GRAPH_WIDTHS: [usize; 4] = [2, 4, 4, 4];

/// Finite differences of the total training loss with respect to every
/// learnable of a reduced network.
pub fn full_graph_error(attention: bool, seed: u64) -> Result<f64> {
    let config = StylizationConfig {
        epsilon: DEFAULT_EPSILON,
        attention_enabled: attention,
        widths: GRAPH_WIDTHS,
        input_size: GRAPH_IMAGE_SIZE,
    };
    let mut rng = SplitMix64::new(seed);
    let net = StyleNet::init(config, &mut rng)?;
    let size = GRAPH_IMAGE_SIZE;
    let content = Tensor::from_fn(&[1, 3, size, size], |_| rng.uniform(0.05, 0.95));
    let style = Tensor::from_fn(&[1, 3, size, size], |_| rng.uniform(0.05, 0.95));
    let inputs: Vec<Tensor> = net.learnables.tensors().into_iter().cloned().collect();
    let weights = LossWeights::default();
    grad_check_many(
        move |tape, v| {
            let lv = LearnableVars::from_vars(v);
            let c = tape.constant(content.clone());
            let s = tape.constant(style.clone());
            Ok(loss_graph(&net, &lv, c, s, weights)?.total)
        },
        &inputs,
        FD_STEP,
    )
}

/// Finite differences against tape gradients for every primitive, the
/// SAFIN composite and the whole training loss.
pub fn grad_suite() -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(0x9ad);
    let mut checks = Vec::new();
    for (name, f, inputs) in primitive_cases(&mut rng) {
        let err = grad_check_many(|tape, v| f(tape, v), &inputs, FD_STEP)?;
        checks.push(Check::below(format!("grad {name}"), err, GRAD_TOLERANCE));
    }
    for attention in [true, false] {
        let tag = if attention { "attention" } else { "no attention" };
        let err = safin_composite(attention, &mut rng)?;
        checks.push(Check::below(format!("grad safin_forward ({tag})"), err, GRAD_TOLERANCE));
        let err = full_graph_error(attention, 11)?;
        checks.push(Check::below(format!("grad stylize + total loss ({tag})"), err, GRAD_TOLERANCE));
    }
    Ok(SuiteReport { suite: "grad", checks })
}

/// Normalization statistics, FIN semantics and the attention contract.
pub fn norm_suite() -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(0x404);
    let (mut mean_err, mut std_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let shape = [1 + rng.below(2), 1 + rng.below(8), 2 + rng.below(7), 2 + rng.below(7)];
        let (shift, spread) = (rng.uniform(-5.0, 5.0), rng.uniform(0.5, 4.0));
        let x = Tensor::from_fn(&shape, |_| shift + spread * rng.uniform(-1.0, 1.0));
        let tape = Tape::new();
        let y = instance_normalize(tape.constant(x), DEFAULT_EPSILON)?.value();
        let plane = shape[2] * shape[3];
        for chunk in y.data().chunks(plane) {
            let mean = chunk.iter().sum::<f64>() / plane as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            mean_err = mean_err.max(mean.abs());
            std_err = std_err.max((var.sqrt() - 1.0).abs());
        }
    }

    let tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 2, 2], &mut rng));
    let identity = fin_apply(
        x,
        &FinVars {
            gamma_ind: tape.constant(Tensor::ones(&[3])),
            beta_ind: tape.constant(Tensor::zeros(&[3])),
        },
        &StyleParams {
            gamma_s: tape.constant(Tensor::ones(&[2, 3, 2, 2])),
            beta_s: tape.constant(Tensor::zeros(&[2, 3, 2, 2])),
        },
    )?;
    let identity_err = identity.value().max_abs_diff(&x.value());
    let s = |v: f64, shape: &[usize]| tape.constant(Tensor::full(shape, v));
    let scalar = fin_apply(
        s(0.5, &[1, 1, 1, 1]),
        &FinVars {
            gamma_ind: s(2.0, &[1]),
            beta_ind: s(1.0, &[1]),
        },
        &StyleParams {
            gamma_s: s(3.0, &[1, 1, 1, 1]),
            beta_s: s(-1.0, &[1, 1, 1, 1]),
        },
    )?;
    let scalar_err = (scalar.value().data()[0] - 5.0).abs();

    let (mut row_err, mut negative) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let c = 1 + rng.below(12);
        let w = SafinWeights::init(c, &mut rng);
        let (hc, wc, hs, ws) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let n = 1 + rng.below(2);
        let tape = Tape::new();
        let fc = tape.constant(Tensor::from_fn(&[n, c, hc, wc], |_| rng.uniform(-3.0, 3.0)));
        let fs = tape.constant(Tensor::from_fn(&[n, c, hs, ws], |_| rng.uniform(-3.0, 3.0)));
        let vars = w.bind(&tape);
        let (_, maps) = self_attention_with_maps(fc, fs, &vars)?;
        for m in maps {
            for row in m.value().data().chunks(hs * ws) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let p = safin_params(fc, fs, &vars)?;
        for t in [p.gamma_s.value(), p.beta_s.value()] {
            negative = t.data().iter().filter(|&&v| v < 0.0).fold(negative, |acc, v| acc.max(-v));
        }
    }
    let tape = Tape::new();
    let w = SafinWeights::init(4, &mut rng);
    let one = |rng: &mut SplitMix64| tape.constant(Tensor::from_fn(&[1, 4, 1, 1], |_| rng.uniform(-2.0, 2.0)));
    let (fc, fs) = (one(&mut rng), one(&mut rng));
    let (_, maps) = self_attention_with_maps(fc, fs, &w.bind(&tape))?;
    let single = (maps[0].value().data()[0] - 1.0).abs();

    Ok(SuiteReport {
        suite: "norm",
        checks: vec![
            Check::below("instance_normalize |mean|", mean_err, 1e-9),
            Check::below("instance_normalize |std - 1|", std_err, 1e-3),
            Check::exact("FIN with identity parameters", identity_err),
            Check::exact("FIN scalar 3*(2*0.5+1)-1 = 5", scalar_err),
            Check::below("attention row sums |sum - 1|", row_err, 1e-9),
            Check::exact("gamma_s, beta_s negativity", negative),
            Check::exact("1x1 attention equals [[1.0]]", single),
        ],
    })
}

/// Zero losses on identical inputs and the total-loss combination.
pub fn loss_suite() -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(0x1055);
    let config = StylizationConfig {
        epsilon: DEFAULT_EPSILON,
        attention_enabled: true,
        widths: [4, 4, 8, 8],
        input_size: 16,
    };
    let net = StyleNet::init(config, &mut rng)?;
    let (mut content_self, mut style_self, mut combine) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let tape = Tape::new();
        let img = tape.constant(Tensor::from_fn(&[2, 3, 16, 16], |_| rng.next_f64()));
        let other = tape.constant(Tensor::from_fn(&[2, 3, 16, 16], |_| rng.next_f64()));
        let a = encode(img, &net.encoder)?;
        let b = encode(other, &net.encoder)?;
        content_self = content_self.max(content_loss(&a.taps, &a.taps)?.value().data()[0].abs());
        style_self = style_self.max(style_loss(&a.taps, &a.taps, DEFAULT_EPSILON)?.0.value().data()[0].abs());
        let lc = content_loss(&a.taps, &b.taps)?.value().data()[0];
        let ls = style_loss(&a.taps, &b.taps, DEFAULT_EPSILON)?.0.value().data()[0];
        let lambda = rng.uniform(0.0, 20.0);
        let w = LossWeights::new(lambda)?;
        combine = combine.max((total_loss(lc, ls, w) - (lc + lambda * ls)).abs());
    }
    let example = (total_loss(2.0, 0.5, LossWeights::new(10.0)?) - 7.0).abs();
    Ok(SuiteReport {
        suite: "loss",
        checks: vec![
            Check::exact("content loss of identical taps", content_self),
            Check::exact("style loss of identical taps", style_self),
            Check::below("total = content + lambda_s * style", combine, 1e-12),
            Check::exact("total(2.0, 0.5, lambda_s = 10) = 7.0", example),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_verdicts() {
        assert!(Check::below("a", 0.5, 1.0).passed());
        assert!(!Check::below("a", 1.0, 1.0).passed());
        assert!(!Check::below("a", f64::NAN, 1.0).passed());
        assert!(Check::exact("a", 0.0).passed());
        assert!(!Check::exact("a", 1e-300).passed());
        assert!(Check::exact("a", 0.0).to_string().starts_with("PASS"));
    }

    #[test]
    fn fast_suites_pass() {
        for report in [wavelet_suite().unwrap(), norm_suite().unwrap(), loss_suite().unwrap()] {
            for c in &report.checks {
                assert!(c.passed(), "{}: {c}", report.suite);
            }
        }
    }
}
