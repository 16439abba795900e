//! Object-wise loss after alignment, the training loop and readout fine-tuning.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::align_frame;
use crate::dynamics::{
    batch_tensor, cell_center, derive_seed, prediction_frames, Dynamics, DynamicsConfig, READOUT_CELLS,
};
use crate::error::{Error, Result};
use crate::parallel::parallel_map;
use crate::eval::{next_step_accuracy, readout_input_frames, readout_sample, EvalEpisode};
use crate::latents::{LatentFrame, LatentSequence, OracleEncoder};
use crate::scalar::Scalar;
use crate::sim::{generate_episode, EpisodeConfig};
use crate::tensor::{grad_check, write_checkpoint, AdamConfig, ConfigValue, GradCheckReport, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub what: f64,
    pub where_: f64,
    pub depth: f64,
    pub pres: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            what: 4.0,
            where_: 20.0,
            depth: 0.0,
            pres: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("what", self.what),
            ("where", self.where_),
            ("depth", self.depth),
            ("pres", self.pres),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Depth enters the matching cost only when it is trained.
    pub fn match_depth(&self) -> bool {
        self.depth > 0.0
    }

    pub fn to_entries(&self) -> Vec<(String, ConfigValue)> {
        [
            ("loss.what", self.what),
            ("loss.where", self.where_),
            ("loss.depth", self.depth),
            ("loss.pres", self.pres),
        ]
        .iter()
        .map(|(n, v)| (n.to_string(), ConfigValue::Real(*v)))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Episodes per Adam step.
    pub batch_size: usize,
    pub steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between validation runs (the last step is always validated).
    pub eval_interval: usize,
    /// Frames per training window (`seq_len - 1` inputs).
    pub seq_len: usize,
    /// Episodes per tape; gradients of micro-batches are summed.
    pub micro_batch: usize,
    /// Write zero instead of elapsed seconds so logs are reproducible.
    pub deterministic: bool,
    /// Worker threads for validation.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 16,
            steps: 40_000,
            clip_norm: 1.0,
            seed: 0,
            eval_interval: 1000,
            seq_len: 20,
            micro_batch: 4,
            deterministic: true,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.eval_interval == 0 || self.jobs == 0 {
            return bad("train.batch_size, train.micro_batch, train.eval_interval and jobs must be positive");
        }
        if self.seq_len < 2 {
            return bad("train.seq_len must be at least 2");
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: Some(self.clip_norm),
            ..AdamConfig::default()
        }
    }

    pub fn to_entries(&self) -> Vec<(String, ConfigValue)> {
        vec![
            ("train.lr".into(), ConfigValue::Real(self.lr)),
            ("train.batch_size".into(), ConfigValue::Int(self.batch_size as i64)),
            ("train.steps".into(), ConfigValue::Int(self.steps as i64)),
            ("train.clip_norm".into(), ConfigValue::Real(self.clip_norm)),
            ("train.seed".into(), ConfigValue::Int(self.seed as i64)),
            ("train.seq_len".into(), ConfigValue::Int(self.seq_len as i64)),
        ]
    }
}

/// Value-level `L_object` of one aligned frame (mean over slots).
/// `pred` presence must lie strictly inside `(0, 1)`.
pub fn object_loss<S: Scalar>(pred: &LatentFrame<S>, aligned: &LatentFrame<S>, w: &LossWeights) -> Result<f64> {
    if pred.k() != aligned.k() || pred.k() == 0 {
        return Err(Error::Shape {
            op: "object_loss",
            lhs: vec![pred.k()],
            rhs: vec![aligned.k()],
        });
    }
    let l1 = |a: &[S], b: &[S]| -> f64 { a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).sum() };
    let mut total = 0.0;
    for (p, z) in pred.slots.iter().zip(&aligned.slots) {
        let ph = p.pres.f64();
        if !(ph > 0.0 && ph < 1.0) {
            return Err(Error::Domain(format!("predicted presence {ph} is not strictly inside (0, 1)")));
        }
        let zp = z.pres.f64();
        let bce = -(zp * ph.ln() + (1.0 - zp) * (1.0 - ph).ln());
        total += w.what * l1(&p.what, &z.what)
            + w.where_ * l1(&p.bbox, &z.bbox)
            + w.depth * (p.depth.f64() - z.depth.f64()).abs()
            + w.pres * bce;
    }
    Ok(total / pred.k() as f64)
}

/// Value-level loss of predicted frames against the following ground-truth
/// frames: `preds[t]` is scored against `truth.frames[t + 1]` after
/// alignment, averaged over timesteps.
pub fn sequence_loss<S: Scalar>(preds: &[LatentFrame<S>], truth: &LatentSequence<S>, w: &LossWeights) -> Result<f64> {
    if preds.is_empty() || truth.len() < preds.len() + 1 {
        return Err(Error::Domain("sequence loss needs one more ground-truth frame than predictions".into()));
    }
    let mut sum = 0.0;
    for (t, p) in preds.iter().enumerate() {
        let aligned = align_frame(p, &truth.frames[t + 1], w.match_depth()).aligned;
        sum += object_loss(p, &aligned, w)?;
    }
    Ok(sum / preds.len() as f64)
}

/// Tape loss for a batch of sequences: predict frames `1..T` from `0..T-1`,
/// align each predicted frame to its target outside the tape, then sum the
/// weighted per-slot terms and divide by `normalizer` (the total number of
/// predicted slots when this batch is part of a larger one).
pub fn batch_loss<S: Scalar>(
    model: &Dynamics<S>,
    tape: &mut Tape<S>,
    batch: &[&LatentSequence<S>],
    w: &LossWeights,
    normalizer: f64,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let inputs: Vec<LatentSequence<S>> = batch.iter().map(|s| s.window(0..s.len() - 1)).collect();
    let input_refs: Vec<&LatentSequence<S>> = inputs.iter().collect();
    let input = batch_tensor(&input_refs)?;
    let pass = model.forward(tape, &input, false, dropout)?;
    let pred = model.predict_next(tape, &pass)?;
    let (b, t, k) = (pass.batch, pass.frames, model.config().k);
    let frames = prediction_frames(tape, &pred, b, t, k);
    let finite = |f: &LatentFrame<S>| {
        f.slots.iter().all(|s| {
            s.pres.is_finite() && s.bbox.iter().chain(&s.what).all(|v| v.is_finite()) && s.depth.is_finite()
        })
    };
    if !frames.iter().flatten().all(finite) {
        // alignment is undefined; report the loss as NaN
        return Ok(tape.constant(Tensor::scalar(S::nan())));
    }

    // aligned targets, laid out like the predictions
    let d_what = model.config().d_what;
    let width = 5 + d_what;
    let mut target = Vec::with_capacity(b * t * k * width);
    let mut target_pres = Vec::with_capacity(b * t * k);
    for (bi, seq) in batch.iter().enumerate() {
        for (ti, p) in frames[bi].iter().enumerate() {
            let aligned = align_frame(p, &seq.frames[ti + 1], w.match_depth()).aligned;
            for z in &aligned.slots {
                target.extend_from_slice(&z.bbox);
                target.push(z.depth);
                target.extend_from_slice(&z.what);
                target_pres.push(z.pres);
            }
        }
    }
    let n = t * k;
    let target = tape.constant(Tensor::new(vec![b, n, width], target)?);
    let target_pres = tape.constant(Tensor::new(vec![b, n, 1], target_pres)?);

    let feats = tape.concat(&[pred.bbox, pred.depth, pred.what], 2)?;
    let diff = tape.sub(feats, target)?;
    let diff = tape.abs(diff);
    let mut weights = vec![S::of(w.where_); 4];
    weights.push(S::of(w.depth));
    weights.extend(std::iter::repeat_n(S::of(w.what), d_what));
    let weights = tape.constant(Tensor::from_vec(weights));
    let weighted = tape.mul(diff, weights)?;
    let l1 = tape.sum(weighted);

    // -[z log p + (1-z) log(1-p)] = softplus(x) - z x for p = sigmoid(x)
    let sp = tape.softplus(pred.pres_logit);
    let zx = tape.mul(pred.pres_logit, target_pres)?;
    let bce = tape.sub(sp, zx)?;
    let bce = tape.sum(bce);
    let bce = tape.scale(bce, S::of(w.pres));

    let total = tape.add(l1, bce)?;
    Ok(tape.scale(total, S::of(1.0 / normalizer)))
}

/// One optimizer step on `batch`: forward per micro-batch, backward, summed
/// gradients, Adam. Returns the batch loss.
pub fn train_step<S: Scalar>(
    model: &mut Dynamics<S>,
    batch: &[&LatentSequence<S>],
    w: &LossWeights,
    adam: &AdamConfig,
    micro_batch: usize,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let first = batch.first().ok_or_else(|| Error::Domain("empty training batch".into()))?;
    let normalizer = (batch.len() * (first.len() - 1) * first.k()) as f64;
    let mut loss = 0.0;
    model.store.zero_grads();
    for part in batch.chunks(micro_batch.max(1)) {
        let mut tape = Tape::new();
        let l = batch_loss(model, &mut tape, part, w, normalizer, dropout.as_deref_mut())?;
        loss += tape.value(l)[0].f64();
        if !loss.is_finite() {
            model.store.zero_grads();
            return Ok(loss);
        }
        tape.backward(l)?;
        tape.accumulate_param_grads(&mut model.store);
    }
    model.store.adam_step(adam);
    Ok(loss)
}

/// Result of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

/// Where training writes its outputs.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    /// Best-by-validation checkpoint.
    pub checkpoint: PathBuf,
    /// CSV log: step, train loss, val change-accuracy, val loss, seconds.
    pub log: PathBuf,
}

fn open_log(path: &Path, header: &str) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

fn csv_num(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Best validation point so far: highest change accuracy, ties broken by
/// lower validation loss. Only points after at least one update compete.
#[derive(Clone, Copy, Debug)]
struct Best {
    step: usize,
    accuracy: f64,
    loss: f64,
}

impl Default for Best {
    fn default() -> Self {
        Best {
            step: 0,
            accuracy: f64::NAN,
            loss: f64::NAN,
        }
    }
}

impl Best {
    fn improved_by(&mut self, step: usize, accuracy: f64, loss: f64) -> bool {
        if step == 0 {
            return false;
        }
        let key = |a: f64, l: f64| (if a.is_nan() { -1.0 } else { a }, if l.is_nan() { f64::NEG_INFINITY } else { -l });
        let better = self.step == 0 || key(accuracy, loss) > key(self.accuracy, self.loss);
        if better {
            *self = Best { step, accuracy, loss };
        }
        better
    }
}

/// Mean loss over the first `seq_len` frames of every validation episode.
fn validation_loss(model: &Dynamics<f32>, val: &[EvalEpisode], cfg: &TrainConfig, w: &LossWeights) -> Result<f64> {
    let windows: Vec<LatentSequence<f32>> = val
        .iter()
        .filter(|e| e.latents.len() >= cfg.seq_len)
        .map(|e| e.latents.window(0..cfg.seq_len))
        .collect();
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let chunks: Vec<&[LatentSequence<f32>]> = windows.chunks(cfg.micro_batch).collect();
    let per_token = (cfg.seq_len - 1) * model.config().k;
    let sums = parallel_map(&chunks, cfg.jobs, |chunk| -> Result<f64> {
        let refs: Vec<&LatentSequence<f32>> = chunk.iter().collect();
        let mut tape = Tape::new();
        let l = batch_loss(model, &mut tape, &refs, w, per_token as f64, None)?;
        Ok(tape.value(l)[0].f64())
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / windows.len() as f64)
}

/// Random window of `len` frames from `seq` (the whole sequence when it fits).
fn sample_window<S: Scalar>(seq: &LatentSequence<S>, len: usize, rng: &mut ChaCha8Rng) -> LatentSequence<S> {
    if seq.len() <= len {
        return seq.clone();
    }
    let start = rng.random_range(0..=seq.len() - len);
    seq.window(start..start + len)
}

/// Train `model` on `train`, validating on `val` every `eval_interval`
/// steps and keeping the checkpoint with the best validation change
/// accuracy. `extra` config entries are stored in the checkpoint.
pub fn train(
    model: &mut Dynamics<f32>,
    train: &[EvalEpisode],
    val: &[EvalEpisode],
    cfg: &TrainConfig,
    w: &LossWeights,
    out: &TrainOutputs,
    extra: &[(String, ConfigValue)],
    mut progress: impl FnMut(&str),
) -> Result<TrainReport> {
    cfg.validate()?;
    w.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if let Some(ep) = train.iter().find(|e| e.latents.len() < cfg.seq_len) {
        return Err(Error::Config(format!(
            "train.seq_len {} exceeds an episode of {} frames",
            cfg.seq_len,
            ep.latents.len()
        )));
    }
    if model.config().window != cfg.seq_len - 1 {
        return Err(Error::Config(format!(
            "model window {} must equal train.seq_len - 1 = {}",
            model.config().window,
            cfg.seq_len - 1
        )));
    }
    let mut entries = cfg.to_entries();
    entries.extend(w.to_entries());
    entries.extend_from_slice(extra);

    let started = Instant::now();
    let mut log = open_log(&out.log, "step,train_loss,val_change_accuracy,val_loss,seconds")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD50F);
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut best = Best::default();
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let mut last_loss = f64::NAN;

    let validate = |step: usize, model: &Dynamics<f32>, loss: f64, log: &mut File, best: &mut Best| -> Result<()> {
        let acc = next_step_accuracy(model, val, cfg.jobs)?.value();
        let val_loss = validation_loss(model, val, cfg, w)?;
        let secs = if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
        writeln!(log, "{step},{},{},{},{secs:.3}", csv_num(loss), csv_num(acc), csv_num(val_loss))
            .map_err(|e| Error::io(&out.log, e))?;
        // The step-0 checkpoint only guarantees that one exists; an untrained
        // model is never kept over a trained one.
        if step == 0 || best.improved_by(step, acc, val_loss) {
            write_checkpoint(&out.checkpoint, &model.to_checkpoint(&entries, false))?;
        }
        Ok(())
    };

    validate(0, model, f64::NAN, &mut log, &mut best)?;
    progress("step 0: initial checkpoint written");
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(sample_window(&train[order[cursor]].latents, cfg.seq_len, &mut rng));
            cursor += 1;
        }
        let refs: Vec<&LatentSequence<f32>> = batch.iter().collect();
        let drop = (model.config().dropout > 0.0).then_some(&mut dropout_rng);
        let loss = train_step(model, &refs, w, &adam, cfg.micro_batch, drop)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        window_loss += loss;
        window_steps += 1;
        last_loss = loss;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let mean = window_loss / window_steps as f64;
            validate(step, model, mean, &mut log, &mut best)?;
            progress(&format!(
                "step {step}: train loss {mean:.4}, best val change accuracy {:.4} (step {})",
                best.accuracy, best.step
            ));
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    log.flush().map_err(|e| Error::io(&out.log, e))?;
    Ok(TrainReport {
        best_step: best.step,
        best_val_accuracy: best.accuracy,
        final_loss: last_loss,
        checkpoint: out.checkpoint.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutConfig {
    pub train: TrainConfig,
    /// Fraction of final frames hidden from the model.
    pub withhold: f64,
    /// Ball whose final grid cell is the label.
    pub ball: usize,
    /// Weight of the L1 loss between the probability-weighted cell center
    /// and the true cell center; 0 disables it.
    pub l1_weight: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        ReadoutConfig {
            train: TrainConfig {
                steps: 2000,
                eval_interval: 250,
                ..TrainConfig::default()
            },
            withhold: 0.0,
            ball: 0,
            l1_weight: 0.0,
        }
    }
}

/// Cross-entropy (plus optional center L1) of the readout on a batch.
pub fn readout_loss<S: Scalar>(
    model: &Dynamics<S>,
    tape: &mut Tape<S>,
    batch: &[&LatentSequence<S>],
    labels: &[usize],
    l1_weight: f64,
    normalizer: f64,
) -> Result<Var> {
    let input = batch_tensor(batch)?;
    let pass = model.forward(tape, &input, true, None)?;
    let logits = model.readout_logits(tape, &pass)?;
    let logp = tape.log_softmax(logits);
    let mut onehot = vec![S::zero(); labels.len() * READOUT_CELLS];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * READOUT_CELLS + l] = S::one();
    }
    let onehot = tape.constant(Tensor::new(vec![labels.len(), READOUT_CELLS], onehot)?);
    let picked = tape.mul(logp, onehot)?;
    let nll = tape.sum(picked);
    let mut total = tape.scale(nll, -S::one());
    if l1_weight > 0.0 {
        let probs = tape.exp(logp);
        let centers: Vec<S> = (0..READOUT_CELLS)
            .flat_map(|c| cell_center(c).map(S::of))
            .collect();
        let centers = tape.constant(Tensor::new(vec![READOUT_CELLS, 2], centers)?);
        let expected = tape.matmul(probs, centers)?;
        let truth: Vec<S> = labels.iter().flat_map(|&l| cell_center(l).map(S::of)).collect();
        let truth = tape.constant(Tensor::new(vec![labels.len(), 2], truth)?);
        let d = tape.sub(expected, truth)?;
        let d = tape.abs(d);
        let d = tape.sum(d);
        let d = tape.scale(d, S::of(l1_weight));
        total = tape.add(total, d)?;
    }
    Ok(tape.scale(total, S::of(1.0 / normalizer)))
}

/// Fine-tune a pretrained model with a CLS readout on the surrogate label
/// (grid cell of the tagged ball in the last frame). Keeps the checkpoint
/// with the best validation top-1.
pub fn train_readout(
    model: &mut Dynamics<f32>,
    train: &[EvalEpisode],
    val: &[EvalEpisode],
    cfg: &ReadoutConfig,
    out: &TrainOutputs,
    extra: &[(String, ConfigValue)],
    mut progress: impl FnMut(&str),
) -> Result<TrainReport> {
    let tc = &cfg.train;
    tc.validate()?;
    if !(0.0..1.0).contains(&cfg.withhold) {
        return Err(Error::Config(format!("readout.withhold = {} is outside [0, 1)", cfg.withhold)));
    }
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    model.add_readout(tc.seed ^ 0xC15)?;
    model.store.reset_optimizer();
    let samples = |eps: &[EvalEpisode]| -> Result<Vec<(LatentSequence<f32>, usize)>> {
        eps.iter()
            .map(|ep| readout_sample(ep, readout_input_frames(ep.latents.len(), cfg.withhold), cfg.ball))
            .collect()
    };
    let train_samples = samples(train)?;
    let mut entries = tc.to_entries();
    entries.push(("readout.withhold".into(), ConfigValue::Real(cfg.withhold)));
    entries.push(("readout.ball".into(), ConfigValue::Int(cfg.ball as i64)));
    entries.push(("readout.l1_weight".into(), ConfigValue::Real(cfg.l1_weight)));
    entries.extend_from_slice(extra);

    let started = Instant::now();
    let mut log = open_log(&out.log, "step,train_loss,val_top1,seconds")?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let adam = tc.adam();
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut cursor = order.len();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let mut last_loss = f64::NAN;

    let validate = |step: usize, model: &Dynamics<f32>, loss: f64, log: &mut File, best: &mut (usize, f64)| -> Result<()> {
        let report = crate::eval::readout_eval(model, val, cfg.withhold, cfg.ball, tc.jobs)?;
        let secs = if tc.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
        let loss_text = if loss.is_nan() { "nan".to_string() } else { format!("{loss:.6}") };
        writeln!(log, "{step},{loss_text},{:.6},{secs:.3}", report.top1).map_err(|e| Error::io(&out.log, e))?;
        if step == 0 || report.top1 > best.1 {
            *best = (step, report.top1);
            write_checkpoint(&out.checkpoint, &model.to_checkpoint(&entries, false))?;
        }
        Ok(())
    };

    validate(0, model, f64::NAN, &mut log, &mut best)?;
    for step in 1..=tc.steps {
        let mut seqs = Vec::with_capacity(tc.batch_size);
        let mut labels = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (s, l) = &train_samples[order[cursor]];
            seqs.push(s);
            labels.push(*l);
            cursor += 1;
        }
        model.store.zero_grads();
        let mut loss = 0.0;
        for (part, lab) in seqs.chunks(tc.micro_batch).zip(labels.chunks(tc.micro_batch)) {
            let mut tape = Tape::new();
            let l = readout_loss(model, &mut tape, part, lab, cfg.l1_weight, tc.batch_size as f64)?;
            loss += f64::from(tape.value(l)[0]);
            tape.backward(l)?;
            tape.accumulate_param_grads(&mut model.store);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        model.store.adam_step(&adam);
        window_loss += loss;
        window_steps += 1;
        last_loss = loss;
        if step % tc.eval_interval == 0 || step == tc.steps {
            let mean = window_loss / window_steps as f64;
            validate(step, model, mean, &mut log, &mut best)?;
            progress(&format!("step {step}: readout loss {mean:.4}, best val top-1 {:.4} (step {})", best.1, best.0));
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    log.flush().map_err(|e| Error::io(&out.log, e))?;
    Ok(TrainReport {
        best_step: best.0,
        best_val_accuracy: best.1,
        final_loss: last_loss,
        checkpoint: out.checkpoint.clone(),
    })
}

/// Finite-difference check of the full training loss (forward, heads,
/// alignment, weighted loss) in f64 on `batch` random episodes of
/// `frames` frames, with one ball fewer than slots.
pub fn loss_grad_check(
    model: DynamicsConfig,
    weights: &LossWeights,
    frames: usize,
    batch: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    model.validate()?;
    if model.k < 2 || frames < 2 || batch == 0 {
        return Err(Error::Config("grad check needs k >= 2, frames >= 2 and batch >= 1".into()));
    }
    let encoder = OracleEncoder::new(model.k, model.d_what);
    let seqs = (0..batch)
        .map(|i| {
            let ep = generate_episode(&EpisodeConfig {
                num_balls: model.k - 1,
                num_frames: frames,
                seed: derive_seed(seed, i as u64 + 1),
                ..EpisodeConfig::default()
            })?;
            encoder.encode_episode::<f64>(&ep, Some(ep.config.seed))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LatentSequence<f64>> = seqs.iter().collect();
    let net = Dynamics::<f64>::new(model, derive_seed(seed, 0))?;
    let mut store = net.store.clone();
    let normalizer = (batch * (frames - 1) * model.k) as f64;
    grad_check(&mut store, eps, |tape, store| {
        let net = Dynamics::from_store(model, store.clone())?;
        batch_loss(&net, tape, &refs, weights, normalizer, None)
    })
}
