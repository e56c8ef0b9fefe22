//! FastConformer encoder: 8× depthwise-separable subsampling, macaron
//! conformer layers, self-conditioning and a CTC posterior head.

mod config;
mod positional;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{PosteriorLattice, FRAME_DURATION_S};
use crate::dsp::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::numerics::{conv_out_len, Graph, NormMode, RenormLimits, Tensor, TensorStore, Var};

pub use config::{EncoderConfig, PosScheme};
pub use positional::{apply_rotary, rotate, sinusoidal_table};

const LN_EPS: f64 = 1e-5;

/// Final-layer outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub posteriors: PosteriorLattice,
    pub hidden: Tensor,
    pub frame_duration: f64,
}

/// Maps parameter names to graph variables. Names bound up front (for
/// example to grad-check one tensor) take precedence over the store.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl Bindings {
    /// `trainable` decides whether store-backed parameters become leaves or constants.
    pub fn new(trainable: bool) -> Self {
        Self {
            vars: BTreeMap::new(),
            trainable,
        }
    }

    pub fn bind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn get(&mut self, g: &mut Graph, store: &TensorStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?.clone();
        let v = if self.trainable { g.leaf(t)? } else { g.constant(t)? };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }
}

/// Updated batch-renorm running statistics from a training pass.
#[derive(Clone, Debug)]
pub struct RenormUpdate {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Handles produced by [`Encoder::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[T', V]` log-posteriors.
    pub log_probs: Var,
    /// `[T', d_model]` final hidden states.
    pub hidden: Var,
    pub renorm_updates: Vec<RenormUpdate>,
}

/// Encoder weights (trainable parameters plus batch-renorm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: TensorStore,
    buffers: TensorStore,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Names of the residual-branch output projections of layer `l`.
fn output_projections(l: usize) -> [String; 8] {
    [
        format!("layers.{l}.ff1.w2"),
        format!("layers.{l}.ff1.b2"),
        format!("layers.{l}.att.wo"),
        format!("layers.{l}.att.bo"),
        format!("layers.{l}.conv.pw2.w"),
        format!("layers.{l}.conv.pw2.b"),
        format!("layers.{l}.ff2.w2"),
        format!("layers.{l}.ff2.b2"),
    ]
}

impl Encoder {
    /// Randomly initialized weights, deterministic in `seed`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TensorStore::new();
        let mut buffers = TensorStore::new();
        let (h, d, v, kt) = (
            cfg.subsample_hidden,
            cfg.d_model,
            cfg.vocab_size,
            cfg.subsample_time_kernel,
        );

        p.insert("sub.0.expand.w", uniform(&[1, h], 1, &mut rng));
        p.insert("sub.0.expand.b", Tensor::zeros(&[h]));
        for s in 0..3 {
            p.insert(format!("sub.{s}.dw.w"), uniform(&[h, kt, 3], kt * 3, &mut rng));
            p.insert(format!("sub.{s}.dw.b"), Tensor::zeros(&[h]));
            if s > 0 {
                p.insert(format!("sub.{s}.pw.w"), uniform(&[h, h], h, &mut rng));
                p.insert(format!("sub.{s}.pw.b"), Tensor::zeros(&[h]));
            }
        }
        let bands = Self::subsampled_bands();
        p.insert("sub.proj.w", uniform(&[bands * h, d], bands * h, &mut rng));
        p.insert("sub.proj.b", Tensor::zeros(&[d]));

        let ln = |p: &mut TensorStore, name: String| {
            p.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
        };
        let f = cfg.ff_expansion * d;
        for l in 0..cfg.n_layers {
            for ff in ["ff1", "ff2"] {
                ln(&mut p, format!("layers.{l}.{ff}.ln"));
                p.insert(format!("layers.{l}.{ff}.w1"), uniform(&[d, f], d, &mut rng));
                p.insert(format!("layers.{l}.{ff}.b1"), Tensor::zeros(&[f]));
                p.insert(format!("layers.{l}.{ff}.w2"), uniform(&[f, d], f, &mut rng));
                p.insert(format!("layers.{l}.{ff}.b2"), Tensor::zeros(&[d]));
            }
            ln(&mut p, format!("layers.{l}.att.ln"));
            for m in ["q", "k", "v", "o"] {
                p.insert(format!("layers.{l}.att.w{m}"), uniform(&[d, d], d, &mut rng));
                p.insert(format!("layers.{l}.att.b{m}"), Tensor::zeros(&[d]));
            }
            ln(&mut p, format!("layers.{l}.conv.ln"));
            p.insert(format!("layers.{l}.conv.pw1.w"), uniform(&[d, 2 * d], d, &mut rng));
            p.insert(format!("layers.{l}.conv.pw1.b"), Tensor::zeros(&[2 * d]));
            p.insert(
                format!("layers.{l}.conv.dw.w"),
                uniform(&[d, cfg.conv_kernel], cfg.conv_kernel, &mut rng),
            );
            p.insert(format!("layers.{l}.conv.dw.b"), Tensor::zeros(&[d]));
            ln(&mut p, format!("layers.{l}.conv.bn"));
            p.insert(format!("layers.{l}.conv.pw2.w"), uniform(&[d, d], d, &mut rng));
            p.insert(format!("layers.{l}.conv.pw2.b"), Tensor::zeros(&[d]));
            ln(&mut p, format!("layers.{l}.out.ln"));
            buffers.insert(format!("layers.{l}.conv.bn.mean"), Tensor::zeros(&[d]));
            buffers.insert(format!("layers.{l}.conv.bn.var"), Tensor::full(&[d], 1.0));
        }
        p.insert("head.w", uniform(&[d, v], d, &mut rng));
        p.insert("head.b", Tensor::zeros(&[v]));
        if cfg.self_conditioning && cfg.n_layers > 1 {
            p.insert("sc.w", uniform(&[v, d], v, &mut rng));
            p.insert("sc.b", Tensor::zeros(&[d]));
        }
        Ok(Self {
            cfg,
            params: p,
            buffers,
        })
    }

    /// Wraps loaded weights after checking every name and shape against `cfg`.
    pub fn from_stores(cfg: EncoderConfig, params: TensorStore, buffers: TensorStore) -> Result<Self> {
        let template = Self::new(cfg.clone(), 0)?;
        for (want, got, kind) in [
            (&template.params, &params, "parameter"),
            (&template.buffers, &buffers, "buffer"),
        ] {
            if want.len() != got.len() {
                return Err(Error::Config(format!(
                    "expected {} {kind} tensors, found {}",
                    want.len(),
                    got.len()
                )));
            }
            for (name, t) in want.iter() {
                let have = got.require(name)?;
                if have.shape() != t.shape() {
                    return Err(Error::shape("load encoder", t.shape(), have.shape()));
                }
            }
        }
        Ok(Self { cfg, params, buffers })
    }

    /// Mel bands left after three stride-2 stages (80 → 40 → 20 → 10).
    pub fn subsampled_bands() -> usize {
        conv_out_len(conv_out_len(conv_out_len(N_MELS, 2), 2), 2)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &TensorStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &TensorStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut TensorStore {
        &mut self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Zeroes every residual-branch output projection, so each layer reduces
    /// to the final layer norm of its input.
    pub fn zero_output_projections(&mut self) {
        for l in 0..self.cfg.n_layers {
            for name in output_projections(l) {
                if let Some(t) = self.params.get_mut(&name) {
                    t.data_mut().fill(0.0);
                }
            }
        }
        for name in ["sc.w", "sc.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Writes training-mode running statistics back into the buffers.
    pub fn apply_renorm_updates(&mut self, updates: &[RenormUpdate]) -> Result<()> {
        for u in updates {
            let d = self.cfg.d_model;
            self.buffers.insert(
                format!("layers.{}.conv.bn.mean", u.layer),
                Tensor::new(vec![d], u.mean.clone())?,
            );
            self.buffers.insert(
                format!("layers.{}.conv.bn.var", u.layer),
                Tensor::new(vec![d], u.var.clone())?,
            );
        }
        Ok(())
    }

    /// Output frame count for `t` mel frames.
    pub fn output_frames(t: usize) -> usize {
        t.div_ceil(8)
    }

    /// `[T, 80]` mel frames → `[ceil(T/8), d_model]`.
    pub fn subsample(&self, g: &mut Graph, mel: Var, b: &mut Bindings) -> Result<Var> {
        let shape = g.shape(mel).to_vec();
        if shape.len() != 2 || shape[1] != N_MELS {
            return Err(Error::shape("subsample", &shape, &[0, N_MELS]));
        }
        let t = shape[0];
        if t < 8 {
            return Err(Error::TooShortForEncoder(t));
        }
        let h = self.cfg.subsample_hidden;
        let p = &self.params;
        let pad = [(self.cfg.subsample_time_kernel - 1) / 2, 1];

        // A single-channel input: expanding pointwise first and then filtering
        // depthwise is exactly a full 3×3 convolution into `h` channels.
        let x = g.reshape(mel, &[t * N_MELS, 1])?;
        let (ew, eb) = (b.get(g, p, "sub.0.expand.w")?, b.get(g, p, "sub.0.expand.b")?);
        let x = g.linear(x, ew, eb)?;
        let x = g.reshape(x, &[t, N_MELS, h])?;
        let (dw, db) = (b.get(g, p, "sub.0.dw.w")?, b.get(g, p, "sub.0.dw.b")?);
        let x = g.conv2d_depthwise(x, dw, db, [2, 2], pad)?;
        let mut x = g.silu(x)?;
        for s in 1..3 {
            let dw = b.get(g, p, &format!("sub.{s}.dw.w"))?;
            let db = b.get(g, p, &format!("sub.{s}.dw.b"))?;
            let pw = b.get(g, p, &format!("sub.{s}.pw.w"))?;
            let pb = b.get(g, p, &format!("sub.{s}.pw.b"))?;
            let y = g.conv2d_depthwise_separable(x, dw, db, pw, pb, [2, 2], pad)?;
            x = g.silu(y)?;
        }
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let (w, bias) = (b.get(g, p, "sub.proj.w")?, b.get(g, p, "sub.proj.b")?);
        g.linear(x, w, bias)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, b: &mut Bindings, name: &str) -> Result<Var> {
        let gamma = b.get(g, &self.params, &format!("{name}.g"))?;
        let beta = b.get(g, &self.params, &format!("{name}.b"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn lin(&self, g: &mut Graph, x: Var, b: &mut Bindings, w: &str, bias: &str) -> Result<Var> {
        let w = b.get(g, &self.params, w)?;
        let bias = b.get(g, &self.params, bias)?;
        g.linear(x, w, bias)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, b: &mut Bindings, prefix: &str) -> Result<Var> {
        let h = self.layer_norm(g, x, b, &format!("{prefix}.ln"))?;
        let h = self.lin(g, h, b, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = g.silu(h)?;
        let h = self.lin(g, h, b, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        let h = g.scale(h, 0.5)?;
        g.add(x, h)
    }

    fn self_attention(&self, g: &mut Graph, x: Var, b: &mut Bindings, prefix: &str) -> Result<Var> {
        let h = self.layer_norm(g, x, b, &format!("{prefix}.ln"))?;
        let mut q = self.lin(g, h, b, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let mut k = self.lin(g, h, b, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.lin(g, h, b, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let heads = self.cfg.n_heads;
        if self.cfg.pos_scheme == PosScheme::Rotary {
            q = g.rotary(q, heads, self.cfg.rotary_theta, 0)?;
            k = g.rotary(k, heads, self.cfg.rotary_theta, 0)?;
        }
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let a = g.attention(q, k, v, heads, scale, self.cfg.attention_chunk)?;
        let o = self.lin(g, a, b, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        g.add(x, o)
    }

    fn conv_module(
        &self,
        g: &mut Graph,
        x: Var,
        b: &mut Bindings,
        l: usize,
        mode: NormMode,
        limits: RenormLimits,
    ) -> Result<(Var, Option<RenormUpdate>)> {
        let prefix = format!("layers.{l}.conv");
        let h = self.layer_norm(g, x, b, &format!("{prefix}.ln"))?;
        let h = self.lin(g, h, b, &format!("{prefix}.pw1.w"), &format!("{prefix}.pw1.b"))?;
        let h = g.glu(h)?;
        let dw = b.get(g, &self.params, &format!("{prefix}.dw.w"))?;
        let db = b.get(g, &self.params, &format!("{prefix}.dw.b"))?;
        let h = g.conv1d_depthwise(h, dw, db, (self.cfg.conv_kernel - 1) / 2)?;
        let gamma = b.get(g, &self.params, &format!("{prefix}.bn.g"))?;
        let beta = b.get(g, &self.params, &format!("{prefix}.bn.b"))?;
        let mean = self.buffers.require(&format!("{prefix}.bn.mean"))?.data().to_vec();
        let var = self.buffers.require(&format!("{prefix}.bn.var"))?.data().to_vec();
        let (h, stats) = g.batch_renorm(h, gamma, beta, &mean, &var, limits, mode)?;
        let h = g.silu(h)?;
        let h = self.lin(g, h, b, &format!("{prefix}.pw2.w"), &format!("{prefix}.pw2.b"))?;
        let update = stats.map(|(mean, var)| RenormUpdate { layer: l, mean, var });
        Ok((g.add(x, h)?, update))
    }

    /// One macaron conformer layer on `x [T', d_model]`.
    pub fn conformer_layer(
        &self,
        g: &mut Graph,
        x: Var,
        l: usize,
        b: &mut Bindings,
        mode: NormMode,
        limits: RenormLimits,
    ) -> Result<(Var, Option<RenormUpdate>)> {
        if l >= self.cfg.n_layers {
            return Err(Error::Config(format!("layer {l} out of range")));
        }
        let mut x = self.feed_forward(g, x, b, &format!("layers.{l}.ff1"))?;
        if self.cfg.self_attention {
            x = self.self_attention(g, x, b, &format!("layers.{l}.att"))?;
        }
        let mut update = None;
        if self.cfg.conv_module {
            let (y, u) = self.conv_module(g, x, b, l, mode, limits)?;
            x = y;
            update = u;
        }
        let x = self.feed_forward(g, x, b, &format!("layers.{l}.ff2"))?;
        Ok((self.layer_norm(g, x, b, &format!("layers.{l}.out.ln"))?, update))
    }

    /// Full forward pass from `[T, 80]` mel frames to `[T', V]` log-posteriors.
    pub fn forward(
        &self,
        g: &mut Graph,
        mel: Var,
        b: &mut Bindings,
        mode: NormMode,
        limits: RenormLimits,
    ) -> Result<ForwardPass> {
        let mut x = self.subsample(g, mel, b)?;
        if self.cfg.pos_scheme == PosScheme::Sinusoidal {
            let s = g.shape(x).to_vec();
            let pe = g.constant(sinusoidal_table(s[0], s[1])?)?;
            x = g.add(x, pe)?;
        }
        let mut renorm_updates = Vec::new();
        let use_sc = self.cfg.self_conditioning && self.cfg.n_layers > 1;
        for l in 0..self.cfg.n_layers {
            let (y, u) = self.conformer_layer(g, x, l, b, mode, limits)?;
            x = y;
            renorm_updates.extend(u);
            if use_sc && l + 1 < self.cfg.n_layers {
                let logits = self.lin(g, x, b, "head.w", "head.b")?;
                let probs = g.softmax(logits)?;
                let back = self.lin(g, probs, b, "sc.w", "sc.b")?;
                x = g.add(x, back)?;
            }
        }
        let logits = self.lin(g, x, b, "head.w", "head.b")?;
        let log_probs = g.log_softmax(logits)?;
        Ok(ForwardPass {
            log_probs,
            hidden: x,
            renorm_updates,
        })
    }

    /// Inference over raw `[T, 80]` frames.
    pub fn infer(&self, mel: &Tensor) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let x = g.constant(mel.clone())?;
        let mut b = Bindings::new(false);
        let out = self.forward(&mut g, x, &mut b, NormMode::Inference, RenormLimits::default())?;
        let posteriors = PosteriorLattice::new(g.value(out.log_probs).clone())?;
        Ok(EncoderOutput {
            posteriors,
            hidden: g.value(out.hidden).clone(),
            frame_duration: FRAME_DURATION_S,
        })
    }

    /// Inference over a normalized spectrogram.
    pub fn encode(&self, spec: &MelSpectrogram) -> Result<EncoderOutput> {
        self.infer(spec.frames())
    }
}
