//! Object-centric transformer over slot latents.
//!
//! Tokens are slots: every slot of frame `t` is projected by one shared affine
//! map and receives the same sinusoidal code for `t`. Attention is
//! block-causal (a token sees every slot of its own and earlier frames), so
//! the model is equivariant to slot order within a frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::align_frame;
use crate::error::{Error, Result};
use crate::latents::{LatentFrame, LatentSequence, ObjectLatent, FIXED_FEATURES};
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, ConfigValue, Mask, ParameterStore, Tape, Tensor, Var};

/// The readout classifies into a `READOUT_GRID × READOUT_GRID` grid.
pub const READOUT_GRID: usize = 4;
pub const READOUT_CELLS: usize = READOUT_GRID * READOUT_GRID;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Slots per frame.
    pub k: usize,
    pub d_what: usize,
    /// Maximum per-step change of `where`.
    pub c: f64,
    pub dropout: f64,
    /// Input frames seen in training; longer rollouts slide a window of this length.
    pub window: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            d_ff: 128,
            k: 16,
            d_what: 5,
            c: 0.2,
            dropout: 0.0,
            window: 19,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("model sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even for the time encoding", self.d_model));
        }
        if self.k == 0 || self.window == 0 {
            return bad("k and window must be positive".into());
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return bad(format!("c = {} is outside (0, 1)", self.c));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} is outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        ObjectLatent::<f64>::feature_len(self.d_what)
    }

    /// Head outputs per slot: pres logit, Δwhere (4), depth, what.
    fn head_outputs(&self) -> usize {
        FIXED_FEATURES + self.d_what
    }

    pub fn to_entries(&self) -> Vec<(String, ConfigValue)> {
        let int = |n: &str, v: usize| (format!("model.{n}"), ConfigValue::Int(v as i64));
        vec![
            int("d_model", self.d_model),
            int("n_heads", self.n_heads),
            int("n_layers", self.n_layers),
            int("d_ff", self.d_ff),
            int("k", self.k),
            int("d_what", self.d_what),
            (String::from("model.c"), ConfigValue::Real(self.c)),
            (String::from("model.dropout"), ConfigValue::Real(self.dropout)),
            int("window", self.window),
        ]
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let int = |n: &str| -> Result<usize> {
            let v = ckpt.int(&format!("model.{n}"))?;
            usize::try_from(v).map_err(|_| Error::malformed("checkpoint", format!("model.{n} = {v}")))
        };
        let cfg = DynamicsConfig {
            d_model: int("d_model")?,
            n_heads: int("n_heads")?,
            n_layers: int("n_layers")?,
            d_ff: int("d_ff")?,
            k: int("k")?,
            d_what: int("d_what")?,
            c: ckpt.real("model.c")?,
            dropout: ckpt.real("model.dropout")?,
            window: int("window")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sinusoidal code for timestep `t`: `sin` on even, `cos` on odd dimensions,
/// frequencies `10000^(-2i/d)` per pair.
pub fn time_encoding(t: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Token `(t, i)` (index `t * k + i`) may attend to `(t', j)` iff `t' <= t`.
pub fn build_block_causal_mask(t: usize, k: usize) -> Mask {
    Mask::from_fn(t * k, t * k, |q, key| key / k <= q / k)
}

/// Block-causal mask plus a trailing CLS token that sees every slot while
/// no slot sees it.
pub fn build_cls_mask(t: usize, k: usize) -> Mask {
    let n = t * k;
    Mask::from_fn(n + 1, n + 1, |q, key| {
        if q == n {
            true
        } else if key == n {
            false
        } else {
            key / k <= q / k
        }
    })
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct ReadoutIdx {
    cls: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Store indices of every named parameter.
#[derive(Clone, Debug)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w1: usize,
    head_b1: usize,
    head_w2: usize,
    head_b2: usize,
    readout: Option<ReadoutIdx>,
}

fn find<S: Scalar>(store: &ParameterStore<S>, name: &str, shape: &[usize]) -> Result<usize> {
    let idx = store
        .index_of(name)
        .ok_or_else(|| Error::malformed("model parameters", format!("missing '{name}'")))?;
    let got = &store.get(idx).value.shape;
    if got != shape {
        return Err(Error::malformed(
            "model parameters",
            format!("'{name}' has shape {got:?}, expected {shape:?}"),
        ));
    }
    Ok(idx)
}

impl Layout {
    fn resolve<S: Scalar>(store: &ParameterStore<S>, cfg: &DynamicsConfig) -> Result<Self> {
        let (d, f, h) = (cfg.d_model, cfg.features(), cfg.d_ff);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("layer{l}.{s}");
                Ok(LayerIdx {
                    ln1_g: find(store, &n("ln1.gain"), &[d])?,
                    ln1_b: find(store, &n("ln1.bias"), &[d])?,
                    wq: find(store, &n("attn.wq"), &[d, d])?,
                    wk: find(store, &n("attn.wk"), &[d, d])?,
                    wv: find(store, &n("attn.wv"), &[d, d])?,
                    wo: find(store, &n("attn.wo"), &[d, d])?,
                    bo: find(store, &n("attn.bo"), &[d])?,
                    ln2_g: find(store, &n("ln2.gain"), &[d])?,
                    ln2_b: find(store, &n("ln2.bias"), &[d])?,
                    w1: find(store, &n("ff.w1"), &[d, h])?,
                    b1: find(store, &n("ff.b1"), &[h])?,
                    w2: find(store, &n("ff.w2"), &[h, d])?,
                    b2: find(store, &n("ff.b2"), &[d])?,
                })
            })
            .collect::<Result<_>>()?;
        let readout = if store.index_of("cls.embed").is_some() {
            Some(ReadoutIdx {
                cls: find(store, "cls.embed", &[d])?,
                w1: find(store, "readout.w1", &[d, h])?,
                b1: find(store, "readout.b1", &[h])?,
                w2: find(store, "readout.w2", &[h, READOUT_CELLS])?,
                b2: find(store, "readout.b2", &[READOUT_CELLS])?,
            })
        } else {
            None
        };
        Ok(Layout {
            embed_w: find(store, "embed.w", &[f, d])?,
            embed_b: find(store, "embed.b", &[d])?,
            layers,
            lnf_g: find(store, "final_ln.gain", &[d])?,
            lnf_b: find(store, "final_ln.bias", &[d])?,
            head_w1: find(store, "head.w1", &[d, h])?,
            head_b1: find(store, "head.b1", &[h])?,
            head_w2: find(store, "head.w2", &[h, cfg.head_outputs()])?,
            head_b2: find(store, "head.b2", &[cfg.head_outputs()])?,
            readout,
        })
    }
}

/// Glorot-uniform matrix.
fn glorot<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::uniform(&[rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Transformer parameters plus their configuration.
#[derive(Clone, Debug)]
pub struct Dynamics<S> {
    config: DynamicsConfig,
    pub store: ParameterStore<S>,
    layout: Layout,
}

/// Tape handles produced by [`Dynamics::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Registered parameter handles, indexed like the store.
    params: Vec<Var>,
    /// The input latents, `[B, T, K, F]`.
    pub input: Var,
    /// Final slot outputs, `[B, T*K, d_model]`.
    pub outputs: Var,
    /// Per layer, the attention node; its weights (`[B, heads, N, N]`, N
    /// including CLS when present) come from [`Tape::attention_weights`].
    pub attention: Vec<Var>,
    /// Final CLS output `[B, d_model]`, when the readout was requested.
    pub cls: Option<Var>,
    pub batch: usize,
    pub frames: usize,
}

/// Head outputs for every input token, each `[B, T*K, ·]`; token `(t, i)`
/// predicts slot `i` of frame `t + 1`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub pres_logit: Var,
    pub bbox: Var,
    pub depth: Var,
    pub what: Var,
}

/// Stack latent sequences into a `[B, T, K, F]` tensor.
pub fn batch_tensor<S: Scalar>(seqs: &[&LatentSequence<S>]) -> Result<Tensor<S>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Domain("empty batch".into()))?;
    let (t, k, d_what) = (first.len(), first.k(), first.d_what());
    let f = ObjectLatent::<S>::feature_len(d_what);
    let mut data = Vec::with_capacity(seqs.len() * t * k * f);
    for s in seqs {
        if s.len() != t || s.k() != k || s.d_what() != d_what {
            return Err(Error::Shape {
                op: "batch_tensor",
                lhs: vec![t, k, d_what],
                rhs: vec![s.len(), s.k(), s.d_what()],
            });
        }
        for frame in &s.frames {
            for slot in &frame.slots {
                slot.write_features(&mut data);
            }
        }
    }
    Tensor::new(vec![seqs.len(), t, k, f], data)
}

impl<S: Scalar> Dynamics<S> {
    pub fn new(config: DynamicsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let (d, f, h) = (config.d_model, config.features(), config.d_ff);
        store.add("embed.w", glorot(f, d, &mut rng))?;
        store.add("embed.b", Tensor::zeros(&[d]))?;
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            store.add(&n("ln1.gain"), Tensor::full(&[d], S::one()))?;
            store.add(&n("ln1.bias"), Tensor::zeros(&[d]))?;
            store.add(&n("attn.wq"), glorot(d, d, &mut rng))?;
            store.add(&n("attn.wk"), glorot(d, d, &mut rng))?;
            store.add(&n("attn.wv"), glorot(d, d, &mut rng))?;
            store.add(&n("attn.wo"), glorot(d, d, &mut rng))?;
            store.add(&n("attn.bo"), Tensor::zeros(&[d]))?;
            store.add(&n("ln2.gain"), Tensor::full(&[d], S::one()))?;
            store.add(&n("ln2.bias"), Tensor::zeros(&[d]))?;
            store.add(&n("ff.w1"), glorot(d, h, &mut rng))?;
            store.add(&n("ff.b1"), Tensor::zeros(&[h]))?;
            store.add(&n("ff.w2"), glorot(h, d, &mut rng))?;
            store.add(&n("ff.b2"), Tensor::zeros(&[d]))?;
        }
        store.add("final_ln.gain", Tensor::full(&[d], S::one()))?;
        store.add("final_ln.bias", Tensor::zeros(&[d]))?;
        store.add("head.w1", glorot(d, h, &mut rng))?;
        store.add("head.b1", Tensor::zeros(&[h]))?;
        store.add("head.w2", glorot(h, config.head_outputs(), &mut rng))?;
        store.add("head.b2", Tensor::zeros(&[config.head_outputs()]))?;
        let layout = Layout::resolve(&store, &config)?;
        Ok(Dynamics {
            config,
            store,
            layout,
        })
    }

    pub fn from_store(config: DynamicsConfig, store: ParameterStore<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&store, &config)?;
        Ok(Dynamics {
            config,
            store,
            layout,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = DynamicsConfig::from_checkpoint(ckpt)?;
        Self::from_store(config, ckpt.store.cast())
    }

    /// Checkpoint with the model config followed by `extra` entries.
    pub fn to_checkpoint(&self, extra: &[(String, ConfigValue)], with_optimizer: bool) -> Checkpoint {
        let mut config = self.config.to_entries();
        config.extend_from_slice(extra);
        Checkpoint::new(&self.store, config, with_optimizer)
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.config
    }

    pub fn has_readout(&self) -> bool {
        self.layout.readout.is_some()
    }

    /// Add the CLS embedding and readout MLP (no-op when already present).
    pub fn add_readout(&mut self, seed: u64) -> Result<()> {
        if self.has_readout() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (self.config.d_model, self.config.d_ff);
        self.store.add("cls.embed", Tensor::uniform(&[d], 1.0, &mut rng))?;
        self.store.add("readout.w1", glorot(d, h, &mut rng))?;
        self.store.add("readout.b1", Tensor::zeros(&[h]))?;
        self.store.add("readout.w2", glorot(h, READOUT_CELLS, &mut rng))?;
        self.store.add("readout.b2", Tensor::zeros(&[READOUT_CELLS]))?;
        self.layout = Layout::resolve(&self.store, &self.config)?;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Dynamics<T> {
        Dynamics {
            config: self.config,
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Token embeddings `[B, T*K, d]`: shared affine map plus the time code.
    pub fn embed_slots(&self, tape: &mut Tape<S>, params: &[Var], input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        let f = self.config.features();
        if shape.len() != 4 || shape[3] != f {
            return Err(Error::Shape {
                op: "embed_slots",
                lhs: shape,
                rhs: vec![f],
            });
        }
        let (b, t, k) = (shape[0], shape[1], shape[2]);
        let d = self.config.d_model;
        let flat = tape.reshape(input, &[b, t * k, f])?;
        let x = tape.matmul(flat, params[self.layout.embed_w])?;
        let x = tape.add(x, params[self.layout.embed_b])?;
        let mut codes = Vec::with_capacity(t * k * d);
        for ti in 0..t {
            let code = time_encoding(ti, d);
            for _ in 0..k {
                codes.extend(code.iter().map(|&v| S::of(v)));
            }
        }
        let codes = tape.constant(Tensor::new(vec![t * k, d], codes)?);
        tape.add(x, codes)
    }

    /// Register all parameters on `tape`, in store order.
    pub fn register(&self, tape: &mut Tape<S>) -> Vec<Var> {
        (0..self.store.len()).map(|i| tape.param(&self.store, i)).collect()
    }

    /// Full transformer pass over `input` (`[B, T, K, F]`), optionally with
    /// the CLS token appended. With `dropout_rng`, dropout is applied to each
    /// residual branch.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        input: &Tensor<S>,
        with_cls: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        if with_cls && !self.has_readout() {
            return Err(Error::Domain("model has no readout parameters".into()));
        }
        let params = self.register(tape);
        let input_var = tape.constant(input.clone());
        let (b, t, k) = (input.shape[0], input.shape[1], input.shape[2]);
        if k != self.config.k {
            return Err(Error::Shape {
                op: "forward (slots per frame)",
                lhs: input.shape.clone(),
                rhs: vec![self.config.k],
            });
        }
        let (d, heads) = (self.config.d_model, self.config.n_heads);
        let mut x = self.embed_slots(tape, &params, input_var)?;
        let n_slots = t * k;
        let mask = if with_cls {
            let ro = self.layout.readout.as_ref().expect("checked above");
            let ones = tape.constant(Tensor::full(&[b, 1, d], S::one()));
            let cls = tape.mul(ones, params[ro.cls])?;
            x = tape.concat(&[x, cls], 1)?;
            build_cls_mask(t, k)
        } else {
            build_block_causal_mask(t, k)
        };
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for layer in &self.layout.layers {
            let p = |i: usize| params[i];
            let h = tape.layer_norm(x, p(layer.ln1_g), p(layer.ln1_b))?;
            let w_qkv = tape.concat(&[p(layer.wq), p(layer.wk), p(layer.wv)], 1)?;
            let qkv = tape.matmul(h, w_qkv)?;
            let o = tape.attention(qkv, heads, &mask)?;
            attention.push(o);
            let o = tape.matmul(o, p(layer.wo))?;
            let o = tape.add(o, p(layer.bo))?;
            let o = self.dropout(tape, o, dropout_rng.as_deref_mut())?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm(x, p(layer.ln2_g), p(layer.ln2_b))?;
            let f = tape.matmul(h2, p(layer.w1))?;
            let f = tape.add(f, p(layer.b1))?;
            let f = tape.relu(f);
            let f = tape.matmul(f, p(layer.w2))?;
            let f = tape.add(f, p(layer.b2))?;
            let f = self.dropout(tape, f, dropout_rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let x = tape.layer_norm(x, params[self.layout.lnf_g], params[self.layout.lnf_b])?;
        let (outputs, cls) = if with_cls {
            let slots = tape.slice(x, 1, 0, n_slots)?;
            let c = tape.slice(x, 1, n_slots, n_slots + 1)?;
            (slots, Some(tape.reshape(c, &[b, d])?))
        } else {
            (x, None)
        };
        Ok(ForwardPass {
            params,
            input: input_var,
            outputs,
            attention,
            cls,
            batch: b,
            frames: t,
        })
    }

    fn dropout(&self, tape: &mut Tape<S>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = S::of(1.0 / (1.0 - p));
                let shape = tape.shape(x).to_vec();
                let mask: Vec<S> = (0..tape.value(x).len())
                    .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Prediction heads: shared one-hidden-layer MLP, then
    /// `where = clip(where_in + c * tanh(Δ))`.
    pub fn predict_next(&self, tape: &mut Tape<S>, pass: &ForwardPass) -> Result<PredictionVars> {
        let p = &pass.params;
        let l = &self.layout;
        let h = tape.matmul(pass.outputs, p[l.head_w1])?;
        let h = tape.add(h, p[l.head_b1])?;
        let h = tape.relu(h);
        let o = tape.matmul(h, p[l.head_w2])?;
        let o = tape.add(o, p[l.head_b2])?;
        let pres_logit = tape.slice(o, 2, 0, 1)?;
        let delta = tape.slice(o, 2, 1, 5)?;
        let depth = tape.slice(o, 2, 5, 6)?;
        let what = tape.slice(o, 2, FIXED_FEATURES, self.config.head_outputs())?;

        let (b, t, k, f) = (pass.batch, pass.frames, self.config.k, self.config.features());
        let flat = tape.reshape(pass.input, &[b, t * k, f])?;
        let where_in = tape.slice(flat, 2, 1, 5)?;
        let step = tape.tanh(delta);
        let step = tape.scale(step, S::of(self.config.c));
        let moved = tape.add(where_in, step)?;
        let bbox = tape.clamp(moved, S::zero(), S::one());
        Ok(PredictionVars {
            pres_logit,
            bbox,
            depth,
            what,
        })
    }

    /// Readout logits `[B, READOUT_CELLS]` from the CLS output.
    pub fn readout_logits(&self, tape: &mut Tape<S>, pass: &ForwardPass) -> Result<Var> {
        let ro = self
            .layout
            .readout
            .as_ref()
            .ok_or_else(|| Error::Domain("model has no readout parameters".into()))?;
        let cls = pass
            .cls
            .ok_or_else(|| Error::Domain("forward pass ran without the CLS token".into()))?;
        let p = &pass.params;
        let h = tape.matmul(cls, p[ro.w1])?;
        let h = tape.add(h, p[ro.b1])?;
        let h = tape.relu(h);
        let o = tape.matmul(h, p[ro.w2])?;
        tape.add(o, p[ro.b2])
    }

    /// Predicted frames for every input frame of every sequence:
    /// `result[b][t]` predicts frame `t + 1` of sequence `b`.
    pub fn predict_frames(&self, seqs: &[&LatentSequence<S>]) -> Result<Vec<Vec<LatentFrame<S>>>> {
        let input = batch_tensor(seqs)?;
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, &input, false, None)?;
        let pred = self.predict_next(&mut tape, &pass)?;
        for v in [pred.pres_logit, pred.bbox, pred.depth, pred.what] {
            if tape.value(v).iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("model produced non-finite predictions".into()));
            }
        }
        Ok(prediction_frames(&tape, &pred, pass.batch, pass.frames, self.config.k))
    }
}

/// Anything that predicts the next latent frame from a history of frames.
pub trait Predictor<S: Scalar>: Sync {
    /// `result[t]` predicts frame `t + 1` from frames `0..=t`.
    fn predict_all(&self, seq: &LatentSequence<S>) -> Result<Vec<LatentFrame<S>>>;

    /// The frame following `context`.
    fn predict_one(&self, context: &LatentSequence<S>) -> Result<LatentFrame<S>> {
        let mut all = self.predict_all(context)?;
        all.pop()
            .ok_or_else(|| Error::Domain("prediction needs at least one frame".into()))
    }
}

impl<S: Scalar> Predictor<S> for Dynamics<S> {
    /// Uses one pass when `seq` fits the training window, otherwise one
    /// sliding-window pass per frame.
    fn predict_all(&self, seq: &LatentSequence<S>) -> Result<Vec<LatentFrame<S>>> {
        let w = self.config.window;
        if seq.len() <= w {
            let mut frames = self.predict_frames(&[seq])?;
            return Ok(frames.pop().expect("one sequence in, one out"));
        }
        let mut out = self.predict_frames(&[&seq.window(0..w)])?.pop().expect("one sequence");
        for end in w + 1..=seq.len() {
            out.push(self.predict_one(&seq.window(end - w..end))?);
        }
        Ok(out)
    }

    /// Predicts from the last `window` frames of `context`.
    fn predict_one(&self, context: &LatentSequence<S>) -> Result<LatentFrame<S>> {
        let start = context.len().saturating_sub(self.config.window);
        let window = context.window(start..context.len());
        let mut frames = self.predict_frames(&[&window])?;
        frames[0]
            .pop()
            .ok_or_else(|| Error::Domain("prediction needs at least one frame".into()))
    }
}

/// Autoregressive continuation of `context` by `n_steps` frames. Predicted
/// presence is fed back as its continuous value.
///
/// With `forced`, frame `i` of it is the ground truth for generated step
/// `i`; after each prediction, every slot aligned to a present ground-truth
/// object takes that object's `where`.
pub fn rollout<S: Scalar, P: Predictor<S> + ?Sized>(
    model: &P,
    context: &LatentSequence<S>,
    n_steps: usize,
    forced: Option<&LatentSequence<S>>,
) -> Result<LatentSequence<S>> {
    if context.is_empty() {
        return Err(Error::Domain("rollout needs at least one context frame".into()));
    }
    if let Some(gt) = forced {
        if gt.len() < n_steps {
            return Err(Error::Domain(format!(
                "forced rollout of {n_steps} steps needs as many ground-truth frames, got {}",
                gt.len()
            )));
        }
    }
    let mut seq = context.clone();
    for step in 0..n_steps {
        let mut next = model.predict_one(&seq)?;
        if let Some(gt) = forced {
            force_where(&mut next, &gt.frames[step]);
        }
        seq.frames.push(next);
    }
    Ok(seq)
}

/// Overwrite `where` of every slot of `pred` aligned to a present object of `truth`.
pub fn force_where<S: Scalar>(pred: &mut LatentFrame<S>, truth: &LatentFrame<S>) {
    let alignment = align_frame(pred, truth, false);
    for (slot, aligned) in pred.slots.iter_mut().zip(&alignment.aligned.slots) {
        if aligned.is_present() {
            slot.bbox = aligned.bbox;
        }
    }
}

/// Read predicted latents (pres through a sigmoid) off the tape.
pub fn prediction_frames<S: Scalar>(
    tape: &Tape<S>,
    pred: &PredictionVars,
    batch: usize,
    frames: usize,
    k: usize,
) -> Vec<Vec<LatentFrame<S>>> {
    let logit = tape.value(pred.pres_logit);
    let bbox = tape.value(pred.bbox);
    let depth = tape.value(pred.depth);
    let what = tape.value(pred.what);
    let d_what = what.len() / logit.len().max(1);
    (0..batch)
        .map(|b| {
            (0..frames)
                .map(|t| LatentFrame {
                    slots: (0..k)
                        .map(|i| {
                            let n = (b * frames + t) * k + i;
                            ObjectLatent {
                                pres: crate::tensor::sigmoid(logit[n]),
                                bbox: [bbox[4 * n], bbox[4 * n + 1], bbox[4 * n + 2], bbox[4 * n + 3]],
                                depth: depth[n],
                                what: what[n * d_what..(n + 1) * d_what].to_vec(),
                            }
                        })
                        .collect(),
                })
                .collect()
        })
        .collect()
}

/// Grid cell (row-major, `READOUT_GRID` per side) containing `center`.
pub fn grid_cell(center: [f64; 2]) -> usize {
    let q = |v: f64| ((v * READOUT_GRID as f64).floor() as isize).clamp(0, READOUT_GRID as isize - 1) as usize;
    q(center[1]) * READOUT_GRID + q(center[0])
}

/// Center of grid cell `cell` in arena coordinates.
pub fn cell_center(cell: usize) -> [f64; 2] {
    let g = READOUT_GRID as f64;
    [
        ((cell % READOUT_GRID) as f64 + 0.5) / g,
        ((cell / READOUT_GRID) as f64 + 0.5) / g,
    ]
}

/// Independent sub-seed of `seed` for stream `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latents::OracleEncoder;
    use crate::sim::{generate_episode, EpisodeConfig};

    fn small() -> DynamicsConfig {
        DynamicsConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            k: 3,
            window: 5,
            ..DynamicsConfig::default()
        }
    }

    fn episode_latents(k: usize, frames: usize, seed: u64) -> LatentSequence<f64> {
        let ep = generate_episode(&EpisodeConfig {
            num_balls: 2,
            num_frames: frames,
            seed,
            ..EpisodeConfig::default()
        })
        .unwrap();
        OracleEncoder::new(k, 5).encode_episode(&ep, Some(seed)).unwrap()
    }

    #[test]
    fn time_code_values() {
        assert_eq!(time_encoding(0, 4), vec![0.0, 1.0, 0.0, 1.0]);
        let c = time_encoding(1, 4);
        let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn block_causal_mask_layout() {
        let m = build_block_causal_mask(2, 2);
        let expect = [
            [true, true, false, false],
            [true, true, false, false],
            [true, true, true, true],
            [true, true, true, true],
        ];
        for (q, row) in expect.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                assert_eq!(m.get(q, k), v, "({q}, {k})");
            }
        }
    }

    #[test]
    fn cls_mask_layout() {
        let m = build_cls_mask(2, 2);
        for key in 0..5 {
            assert!(m.get(4, key));
        }
        for q in 0..4 {
            assert!(!m.get(q, 4));
        }
        assert!(!m.get(0, 2));
        assert!(m.get(3, 0));
    }

    #[test]
    fn where_moves_at_most_c() {
        let model = Dynamics::<f64>::new(small(), 1).unwrap();
        let seq = episode_latents(3, 4, 9);
        let preds = model.predict_frames(&[&seq]).unwrap().pop().unwrap();
        assert_eq!(preds.len(), 4);
        for (t, p) in preds.iter().enumerate() {
            for (s, z) in p.slots.iter().zip(&seq.frames[t].slots) {
                for i in 0..4 {
                    assert!((0.0..=1.0).contains(&s.bbox[i]));
                    assert!((s.bbox[i] - z.bbox[i]).abs() <= 0.2 + 1e-12);
                }
                assert!(s.pres > 0.0 && s.pres < 1.0);
            }
        }
    }

    #[test]
    fn future_frames_do_not_change_earlier_predictions() {
        let model = Dynamics::<f64>::new(small(), 2).unwrap();
        let a = episode_latents(3, 5, 1);
        let mut b = a.clone();
        b.frames[3] = episode_latents(3, 5, 2).frames[0].clone();
        b.frames[4] = episode_latents(3, 5, 3).frames[4].clone();
        let pa = model.predict_frames(&[&a]).unwrap().pop().unwrap();
        let pb = model.predict_frames(&[&b]).unwrap().pop().unwrap();
        for t in 0..3 {
            assert_eq!(pa[t], pb[t], "frame {t}");
        }
        assert_ne!(pa[3], pb[3]);
    }

    #[test]
    fn slot_permutation_permutes_predictions() {
        let model = Dynamics::<f64>::new(small(), 3).unwrap();
        let a = episode_latents(3, 4, 5);
        let mut b = a.clone();
        let perm = [2, 0, 1];
        for f in &mut b.frames {
            f.slots = perm.iter().map(|&i| f.slots[i].clone()).collect();
        }
        let pa = model.predict_frames(&[&a]).unwrap().pop().unwrap();
        let pb = model.predict_frames(&[&b]).unwrap().pop().unwrap();
        // the last frame's permutation carries over to its predictions
        for t in 0..4 {
            for (j, &i) in perm.iter().enumerate() {
                let (x, y) = (&pa[t].slots[i], &pb[t].slots[j]);
                assert!((x.pres - y.pres).abs() < 1e-10);
                for d in 0..4 {
                    assert!((x.bbox[d] - y.bbox[d]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let model = Dynamics::<f32>::new(small(), 4).unwrap();
        let ckpt = model.to_checkpoint(&[], false);
        let back = Dynamics::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
        let seq = episode_latents(3, 4, 6).cast::<f32>();
        assert_eq!(model.predict_frames(&[&seq]).unwrap(), back.predict_frames(&[&seq]).unwrap());
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn missing_parameter_is_malformed() {
        let model = Dynamics::<f32>::new(small(), 4).unwrap();
        let mut store = ParameterStore::new();
        for p in model.store.iter().filter(|p| p.name != "head.b2") {
            store.add(&p.name, p.value.clone()).unwrap();
        }
        assert!(Dynamics::from_store(small(), store).is_err());
    }

    #[test]
    fn sliding_window_predictions() {
        let model = Dynamics::<f64>::new(small(), 5).unwrap();
        let seq = episode_latents(3, 8, 7);
        let all = model.predict_all(&seq).unwrap();
        assert_eq!(all.len(), 8);
        // within the window: one pass
        assert_eq!(all[..5], model.predict_frames(&[&seq.window(0..5)]).unwrap()[0][..]);
        // beyond: the last `window` frames only
        assert_eq!(all[7], model.predict_one(&seq.window(3..8)).unwrap());
        assert_eq!(all[7], model.predict_one(&seq).unwrap());
    }

    #[test]
    fn forced_rollout_uses_true_positions() {
        let model = Dynamics::<f64>::new(small(), 6).unwrap();
        let seq = episode_latents(3, 8, 8);
        let out = rollout(&model, &seq.window(0..3), 5, Some(&seq.window(3..8))).unwrap();
        assert_eq!(out.len(), 8);
        for t in 3..8 {
            let truth: Vec<[f64; 4]> = seq.frames[t].present().map(|s| s.bbox).collect();
            let pred: Vec<[f64; 4]> = out.frames[t].slots.iter().map(|s| s.bbox).collect();
            for b in truth {
                assert!(pred.contains(&b));
            }
        }
        let free = rollout(&model, &seq.window(0..3), 5, None).unwrap();
        assert_eq!(free.frames[..3], seq.frames[..3]);
        assert!(rollout(&model, &seq.window(0..3), 6, Some(&seq.window(3..8))).is_err());
    }

    #[test]
    fn readout_requires_parameters() {
        let mut model = Dynamics::<f64>::new(small(), 7).unwrap();
        let input = batch_tensor(&[&episode_latents(3, 3, 1)]).unwrap();
        assert!(model.forward(&mut Tape::new(), &input, true, None).is_err());
        model.add_readout(1).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &input, true, None).unwrap();
        let logits = model.readout_logits(&mut tape, &pass).unwrap();
        assert_eq!(tape.shape(logits), &[1, READOUT_CELLS]);
        // slots never see the CLS token
        let plain = model.predict_frames(&[&episode_latents(3, 3, 1)]).unwrap();
        let pred = model.predict_next(&mut tape, &pass).unwrap();
        assert_eq!(prediction_frames(&tape, &pred, 1, 3, 3), plain);
    }

    #[test]
    fn grid_cells() {
        assert_eq!(grid_cell([0.1, 0.1]), 0);
        assert_eq!(grid_cell([0.9, 0.1]), 3);
        assert_eq!(grid_cell([0.1, 0.9]), 12);
        assert_eq!(grid_cell([1.0, 1.0]), 15);
        for c in 0..READOUT_CELLS {
            assert_eq!(grid_cell(cell_center(c)), c);
        }
        assert_eq!(cell_center(5), [0.375, 0.375]);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            DynamicsConfig { n_heads: 3, ..small() },
            DynamicsConfig { c: 0.0, ..small() },
            DynamicsConfig { k: 0, ..small() },
            DynamicsConfig { dropout: 1.0, ..small() },
        ];
        for cfg in bad {
            assert!(Dynamics::<f32>::new(cfg, 0).is_err(), "{cfg:?}");
        }
    }
}
