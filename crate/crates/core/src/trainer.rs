//! Seeded training of the decoder and both SAFIN modules with Adam.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::{content_loss, style_loss, total_loss_var, LossReport, LossWeights, DEFAULT_LAMBDA_S};
use crate::moments::DEFAULT_EPSILON;
use crate::network::{encode, stack_images, stylize, LearnableVars, StyleNet, StylizationConfig, DEFAULT_WIDTHS};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_s: f64,
    pub seed: u64,
    pub image_size: usize,
    pub widths: [usize; 4],
    pub epsilon: f64,
    pub attention_enabled: bool,
    pub content_dir: PathBuf,
    pub style_dir: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            lambda_s: DEFAULT_LAMBDA_S,
            seed: 0,
            image_size: 32,
            widths: DEFAULT_WIDTHS,
            epsilon: DEFAULT_EPSILON,
            attention_enabled: true,
            content_dir: PathBuf::new(),
            style_dir: PathBuf::new(),
            checkpoint_path: PathBuf::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        // the loss pools relu4_1 (at size / 8) once more
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 || self.learning_rate.is_infinite() {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        LossWeights::new(self.lambda_s)?;
        self.stylization().validate()
    }

    pub fn stylization(&self) -> StylizationConfig {
        StylizationConfig {
            epsilon: self.epsilon,
            attention_enabled: self.attention_enabled,
            widths: self.widths,
            input_size: self.image_size,
        }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.learning_rate,
            lambda_s: self.lambda_s,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Optimization settings persisted with a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub lambda_s: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: StyleNet,
    pub settings: TrainSettings,
    /// First-moment estimates, one per learnable in `Learnables::names` order.
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step: u64,
    pub rng: SplitMix64,
}

impl TrainState {
    /// Fresh state: the network is drawn from `SplitMix64(seed)` and the same
    /// generator then drives batch sampling.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(cfg.seed);
        let net = StyleNet::init(cfg.stylization(), &mut rng)?;
        let zeros: Vec<Tensor> = net
            .learnables
            .tensors()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            net,
            settings: cfg.settings(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            rng,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_s: self.settings.lambda_s,
        }
    }

    /// Draws `batch_size` indices with replacement and stacks those images.
    pub fn sample_batch(&mut self, corpus: &[Tensor]) -> Result<Tensor> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot sample from an empty corpus".into()));
        }
        let picks: Vec<&Tensor> = (0..self.settings.batch_size)
            .map(|_| &corpus[self.rng.below(corpus.len())])
            .collect();
        stack_images(&picks)
    }
}

/// Loss graph for one batch: stylize, re-encode the output, and score it.
pub struct LossGraph<'t> {
    pub total: Var<'t>,
    pub content: Var<'t>,
    pub style: Var<'t>,
    pub per_layer_style: [Var<'t>; 4],
    pub image: Var<'t>,
}

impl LossGraph<'_> {
    pub fn report(&self) -> LossReport {
        let item = |v: &Var<'_>| v.value().item().expect("scalar loss");
        LossReport {
            content: item(&self.content),
            style: item(&self.style),
            per_layer_style: self.per_layer_style.each_ref().map(item),
            total: item(&self.total),
        }
    }
}

pub fn loss_graph<'t>(
    net: &StyleNet,
    weights: &LearnableVars<'t>,
    content: Var<'t>,
    style: Var<'t>,
    loss_weights: LossWeights,
) -> Result<LossGraph<'t>> {
    let out = stylize(content, style, &net.encoder, weights, &net.config)?;
    let enc_out = encode(out.image, &net.encoder)?;
    let lc = content_loss(&enc_out.taps, &out.content.taps)?;
    let (ls, per_layer_style) = style_loss(&enc_out.taps, &out.style.taps, net.config.epsilon)?;
    Ok(LossGraph {
        total: total_loss_var(lc, ls, loss_weights)?,
        content: lc,
        style: ls,
        per_layer_style,
        image: out.image,
    })
}

/// One optimization step. On a non-finite loss or gradient the state is
/// left untouched.
pub fn train_step(state: &mut TrainState, content_batch: &Tensor, style_batch: &Tensor) -> Result<LossReport> {
    let tape = Tape::new();
    let weights = state.net.learnables.bind(&tape);
    let c = tape.constant(content_batch.clone());
    let s = tape.constant(style_batch.clone());
    let graph = loss_graph(&state.net, &weights, c, s, state.loss_weights())?;
    let report = graph.report();
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss(report.total));
    }
    graph.total.backward()?;
    let grads: Vec<Tensor> = weights
        .vars()
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
        let v = bad.data().iter().copied().find(|v| !v.is_finite()).unwrap_or(f64::NAN);
        return Err(Error::NonFiniteLoss(v));
    }

    let t = (state.step + 1) as i32;
    let lr = state.settings.learning_rate;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let params = state.net.learnables.tensors_mut();
    for (((p, g), m), v) in params
        .into_iter()
        .zip(&grads)
        .zip(&mut state.adam_m)
        .zip(&mut state.adam_v)
    {
        let (pd, gd) = (p.data_mut(), g.data());
        for i in 0..pd.len() {
            let md = &mut m.data_mut()[i];
            *md = ADAM_BETA1 * *md + (1.0 - ADAM_BETA1) * gd[i];
            let vd = &mut v.data_mut()[i];
            *vd = ADAM_BETA2 * *vd + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let m_hat = *md / bias1;
            let v_hat = *vd / bias2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    state.step += 1;
    Ok(report)
}

/// Runs `steps` steps, sampling a content batch then a style batch from the
/// state's generator each time.
pub fn train(
    state: &mut TrainState,
    content: &[Tensor],
    style: &[Tensor],
    steps: usize,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<Vec<LossReport>> {
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let cb = state.sample_batch(content)?;
        let sb = state.sample_batch(style)?;
        let report = train_step(state, &cb, &sb)?;
        on_step(state.step, &report);
        trace.push(report);
    }
    Ok(trace)
}

/// Trailing moving average of the total loss over `window` steps ending at
/// the 1-based `step`.
pub fn moving_average(trace: &[LossReport], step: usize, window: usize) -> Option<f64> {
    if step < window || step > trace.len() {
        return None;
    }
    let slice = &trace[step - window..step];
    Some(slice.iter().map(|r| r.total).sum::<f64>() / window as f64)
}
