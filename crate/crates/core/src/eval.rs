//! Next-step accuracy, free and forced generation metrics, attention dumps
//! and readout metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::align::{align_frame, hungarian, CostMatrix};
use crate::dynamics::{
    batch_tensor, grid_cell, rollout, Dynamics, Predictor, READOUT_CELLS, READOUT_GRID,
};
use crate::error::{Error, Result};
use crate::latents::{analytic_decode, LatentFrame, LatentSequence, OracleEncoder};
use crate::parallel::parallel_map;
use crate::render::{classify_patch, pixel_mse, rasterize_states, DEFAULT_RESOLUTION};
use crate::scalar::Scalar;
use crate::sim::{BallState, Episode, Manifest, Split};
use crate::tensor::Tape;

/// Unmatched ground-truth balls cost the arena diagonal.
pub const MISSING_PENALTY: f64 = std::f64::consts::SQRT_2;

/// Ground-truth episode together with its encoded latents.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEpisode {
    pub episode: Episode,
    pub latents: LatentSequence<f32>,
}

impl EvalEpisode {
    /// Oracle-encode `episode`, shuffling slots with the episode seed.
    pub fn encode(episode: Episode, encoder: &OracleEncoder) -> Result<Self> {
        let latents = encoder.encode_episode(&episode, Some(episode.config.seed))?;
        Ok(EvalEpisode { episode, latents })
    }
}

/// Load and oracle-encode every episode of `split` in the dataset at `dir`.
pub fn load_split(dir: &Path, split: Split, encoder: &OracleEncoder, jobs: usize) -> Result<Vec<EvalEpisode>> {
    let manifest = Manifest::load(dir)?;
    let entries: Vec<_> = manifest.entries(split).cloned().collect();
    parallel_map(&entries, jobs, |e| EvalEpisode::encode(Episode::read(&dir.join(&e.file))?, encoder))
        .into_iter()
        .collect()
}

/// Correct and total counts for change events.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn merge(self, other: Accuracy) -> Accuracy {
        Accuracy {
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }
}

/// Does the decoded `pred` show `ball`'s ground-truth color at its true position?
fn color_correct<S: Scalar>(pred: &LatentFrame<S>, ball: &BallState) -> bool {
    let image = analytic_decode(pred, DEFAULT_RESOLUTION);
    classify_patch(&image, ball.position, ball.radius) == Some(ball.color)
}

/// Change-event accuracy of one-step predictions from ground-truth history.
pub fn episode_next_step_accuracy<P: Predictor<f32> + ?Sized>(model: &P, ep: &EvalEpisode) -> Result<Accuracy> {
    let changes = ep.episode.color_changes();
    if changes.is_empty() {
        return Ok(Accuracy::default());
    }
    let last = changes.iter().map(|&(t, _)| t).max().expect("non-empty");
    let preds = model.predict_all(&ep.latents.window(0..last))?;
    let mut acc = Accuracy::default();
    for (t, o) in changes {
        acc.total += 1;
        if color_correct(&preds[t - 1], &ep.episode.states[t][o]) {
            acc.correct += 1;
        }
    }
    Ok(acc)
}

/// Accuracy over every ground-truth color-change event in `episodes`.
pub fn next_step_accuracy<P: Predictor<f32> + ?Sized>(
    model: &P,
    episodes: &[EvalEpisode],
    jobs: usize,
) -> Result<Accuracy> {
    parallel_map(episodes, jobs, |ep| episode_next_step_accuracy(model, ep))
        .into_iter()
        .try_fold(Accuracy::default(), |acc, r| Ok(acc.merge(r?)))
}

/// Mean center distance after position-only Hungarian matching of present
/// predicted slots to ground-truth balls; unmatched balls cost
/// [`MISSING_PENALTY`], surplus predictions cost nothing.
pub fn matched_distance<S: Scalar>(pred: &LatentFrame<S>, truth: &[BallState]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let centers: Vec<[f64; 2]> = pred.present().map(|s| s.center()).collect();
    let n = centers.len().max(truth.len());
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = match (truth.get(i), centers.get(j)) {
                (Some(b), Some(c)) => ((b.position[0] - c[0]).powi(2) + (b.position[1] - c[1]).powi(2)).sqrt(),
                (Some(_), None) => MISSING_PENALTY,
                (None, _) => 0.0,
            };
        }
    }
    let cost = CostMatrix::new(n, data);
    let perm = hungarian(&cost);
    (0..truth.len()).map(|i| cost.get(i, perm.assignment[i])).sum::<f64>() / truth.len() as f64
}

/// Per-step curves of a free rollout, averaged over episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationReport {
    pub med: Vec<f64>,
    pub pixel_mse: Vec<f64>,
    pub episodes: usize,
}

fn check_horizon(ep: &EvalEpisode, n_context: usize, n_gen: usize) -> Result<()> {
    if n_context == 0 {
        return Err(Error::Domain("generation needs at least one context frame".into()));
    }
    if ep.episode.num_frames() < n_context + n_gen {
        return Err(Error::Domain(format!(
            "episode has {} frames; context {n_context} + generation {n_gen} needs more",
            ep.episode.num_frames()
        )));
    }
    Ok(())
}

/// Free rollout of one episode; returns per-step (MED, pixel MSE).
pub fn episode_generation<P: Predictor<f32> + ?Sized>(
    model: &P,
    ep: &EvalEpisode,
    n_context: usize,
    n_gen: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_horizon(ep, n_context, n_gen)?;
    let out = rollout(model, &ep.latents.window(0..n_context), n_gen, None)?;
    let mut med = Vec::with_capacity(n_gen);
    let mut mse = Vec::with_capacity(n_gen);
    for t in n_context..n_context + n_gen {
        let truth = &ep.episode.states[t];
        med.push(matched_distance(&out.frames[t], truth));
        let image = analytic_decode(&out.frames[t], DEFAULT_RESOLUTION);
        mse.push(pixel_mse(&image, &rasterize_states(truth, DEFAULT_RESOLUTION)));
    }
    Ok((med, mse))
}

/// MED and pixel-MSE curves of free rollouts from `n_context` ground-truth frames.
pub fn generation_curves<P: Predictor<f32> + ?Sized>(
    model: &P,
    episodes: &[EvalEpisode],
    n_context: usize,
    n_gen: usize,
    jobs: usize,
) -> Result<GenerationReport> {
    let per_episode = parallel_map(episodes, jobs, |ep| episode_generation(model, ep, n_context, n_gen));
    let mut report = GenerationReport {
        med: vec![0.0; n_gen],
        pixel_mse: vec![0.0; n_gen],
        episodes: episodes.len(),
    };
    for r in per_episode {
        let (med, mse) = r?;
        for s in 0..n_gen {
            report.med[s] += med[s];
            report.pixel_mse[s] += mse[s];
        }
    }
    let n = episodes.len().max(1) as f64;
    report.med.iter_mut().for_each(|v| *v /= n);
    report.pixel_mse.iter_mut().for_each(|v| *v /= n);
    Ok(report)
}

pub fn med_curve<P: Predictor<f32> + ?Sized>(
    model: &P,
    episodes: &[EvalEpisode],
    n_context: usize,
    n_gen: usize,
    jobs: usize,
) -> Result<Vec<f64>> {
    Ok(generation_curves(model, episodes, n_context, n_gen, jobs)?.med)
}

pub fn pixel_mse_curve<P: Predictor<f32> + ?Sized>(
    model: &P,
    episodes: &[EvalEpisode],
    n_context: usize,
    n_gen: usize,
    jobs: usize,
) -> Result<Vec<f64>> {
    Ok(generation_curves(model, episodes, n_context, n_gen, jobs)?.pixel_mse)
}

/// Per-step change-event counts of one forced rollout.
pub fn episode_forced<P: Predictor<f32> + ?Sized>(
    model: &P,
    ep: &EvalEpisode,
    n_context: usize,
    n_gen: usize,
) -> Result<Vec<Accuracy>> {
    check_horizon(ep, n_context, n_gen)?;
    let encoder = OracleEncoder {
        k: ep.latents.k(),
        d_what: ep.latents.d_what(),
        tagged_ball: None,
    };
    let truth = LatentSequence {
        frames: ep.episode.states[n_context..n_context + n_gen]
            .iter()
            .map(|s| encoder.encode::<f32>(s, None))
            .collect::<Result<_>>()?,
    };
    let out = rollout(model, &ep.latents.window(0..n_context), n_gen, Some(&truth))?;
    let mut steps = vec![Accuracy::default(); n_gen];
    for (t, o) in ep.episode.color_changes() {
        if t < n_context || t >= n_context + n_gen {
            continue;
        }
        let s = &mut steps[t - n_context];
        s.total += 1;
        if color_correct(&out.frames[t], &ep.episode.states[t][o]) {
            s.correct += 1;
        }
    }
    Ok(steps)
}

/// Forced-generation accuracy on change events, cumulative over steps:
/// entry `s` covers every event in generated steps `0..=s`.
pub fn forced_generation_accuracy<P: Predictor<f32> + ?Sized>(
    model: &P,
    episodes: &[EvalEpisode],
    n_context: usize,
    n_gen: usize,
    jobs: usize,
) -> Result<Vec<Accuracy>> {
    let mut steps = vec![Accuracy::default(); n_gen];
    for r in parallel_map(episodes, jobs, |ep| episode_forced(model, ep, n_context, n_gen)) {
        for (acc, s) in steps.iter_mut().zip(r?) {
            *acc = acc.merge(s);
        }
    }
    let mut running = Accuracy::default();
    Ok(steps
        .into_iter()
        .map(|s| {
            running = running.merge(s);
            running
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub query_slot: usize,
    pub query_ball: Option<usize>,
    pub key_timestep: usize,
    pub key_slot: usize,
    pub key_ball: Option<usize>,
    pub weight: f64,
}

/// Ball shown in each slot of `frame` (slots aligned to absent objects map to `None`).
fn slot_balls<S: Scalar>(frame: &LatentFrame<S>, states: &[BallState]) -> Result<Vec<Option<usize>>> {
    let encoder = OracleEncoder {
        k: frame.k(),
        d_what: frame.d_what(),
        tagged_ball: None,
    };
    let truth: LatentFrame<S> = encoder.encode(states, None)?;
    let alignment = align_frame(frame, &truth, false);
    Ok(alignment
        .permutation
        .assignment
        .iter()
        .map(|&j| (j < states.len()).then_some(j))
        .collect())
}

/// Head-averaged attention of every slot at `timestep` in `layer`, over the
/// window of frames ending at `timestep`.
pub fn dump_attention(
    model: &Dynamics<f32>,
    ep: &EvalEpisode,
    layer: usize,
    timestep: usize,
) -> Result<Vec<AttentionRow>> {
    let cfg = model.config();
    if layer >= cfg.n_layers {
        return Err(Error::Domain(format!("layer {layer} out of range (model has {})", cfg.n_layers)));
    }
    if timestep >= ep.latents.len() {
        return Err(Error::Domain(format!(
            "timestep {timestep} out of range (episode has {} frames)",
            ep.latents.len()
        )));
    }
    let start = (timestep + 1).saturating_sub(cfg.window);
    let window = ep.latents.window(start..timestep + 1);
    let input = batch_tensor(&[&window])?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &input, false, None)?;
    let weights = tape
        .attention_weights(pass.attention[layer])
        .expect("forward records attention nodes");
    let (k, heads) = (cfg.k, cfg.n_heads);
    let n = window.len() * k;
    let balls: Vec<Vec<Option<usize>>> = (start..=timestep)
        .map(|t| slot_balls(&ep.latents.frames[t], &ep.episode.states[t]))
        .collect::<Result<_>>()?;
    let q_t = window.len() - 1;
    let mut rows = Vec::new();
    for qs in 0..k {
        let q = q_t * k + qs;
        for key in 0..n {
            let (kt, ks) = (key / k, key % k);
            if kt > q_t {
                continue;
            }
            let w: f64 = (0..heads).map(|h| f64::from(weights[(h * n + q) * n + key])).sum::<f64>() / heads as f64;
            rows.push(AttentionRow {
                query_slot: qs,
                query_ball: balls[q_t][qs],
                key_timestep: start + kt,
                key_slot: ks,
                key_ball: balls[kt][ks],
                weight: w,
            });
        }
    }
    Ok(rows)
}

/// Readout metrics over the 16 surrogate cells.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReadoutReport {
    pub top1: f64,
    pub top5: f64,
    /// Mean Manhattan distance in grid cells between predicted and true cell.
    pub grid_l1: f64,
    pub samples: usize,
}

/// Scores per sample against true cells.
pub fn readout_metrics(logits: &[Vec<f64>], labels: &[usize]) -> ReadoutReport {
    let mut report = ReadoutReport {
        samples: labels.len(),
        ..Default::default()
    };
    for (scores, &label) in logits.iter().zip(labels) {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        if order[0] == label {
            report.top1 += 1.0;
        }
        if order.iter().take(5).any(|&c| c == label) {
            report.top5 += 1.0;
        }
        let (p, t) = (order[0], label);
        let dist = (p % READOUT_GRID).abs_diff(t % READOUT_GRID) + (p / READOUT_GRID).abs_diff(t / READOUT_GRID);
        report.grid_l1 += dist as f64;
    }
    let n = labels.len().max(1) as f64;
    report.top1 /= n;
    report.top5 /= n;
    report.grid_l1 /= n;
    report
}

/// Surrogate readout sample: input frames and the cell of the tagged ball
/// in the episode's last frame.
pub fn readout_sample(ep: &EvalEpisode, input_frames: usize, ball: usize) -> Result<(LatentSequence<f32>, usize)> {
    let last = ep
        .episode
        .states
        .last()
        .and_then(|s| s.get(ball))
        .ok_or_else(|| Error::Domain(format!("episode has no ball {ball}")))?;
    if input_frames == 0 || input_frames > ep.latents.len() {
        return Err(Error::Domain(format!(
            "{input_frames} input frames requested from an episode of {}",
            ep.latents.len()
        )));
    }
    Ok((ep.latents.window(0..input_frames), grid_cell(last.position)))
}

/// Frames kept when the last `withhold` fraction is hidden.
pub fn readout_input_frames(total: usize, withhold: f64) -> usize {
    let hidden = (total as f64 * withhold).round() as usize;
    total.saturating_sub(hidden).max(1)
}

/// Readout logits for each sequence (batched by `chunk`).
pub fn readout_logits(model: &Dynamics<f32>, seqs: &[&LatentSequence<f32>], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let input = batch_tensor(part)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &input, true, None)?;
        let logits = model.readout_logits(&mut tape, &pass)?;
        out.extend(
            tape.value(logits)
                .chunks(READOUT_CELLS)
                .map(|c| c.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()),
        );
    }
    Ok(out)
}

/// Top-1 / top-5 / grid-L1 of the readout on `episodes`.
pub fn readout_eval(
    model: &Dynamics<f32>,
    episodes: &[EvalEpisode],
    withhold: f64,
    ball: usize,
    jobs: usize,
) -> Result<ReadoutReport> {
    let samples: Vec<(LatentSequence<f32>, usize)> = episodes
        .iter()
        .map(|ep| readout_sample(ep, readout_input_frames(ep.latents.len(), withhold), ball))
        .collect::<Result<_>>()?;
    let logits = parallel_map(&samples, jobs, |(seq, _)| readout_logits(model, &[seq], 1));
    let mut all = Vec::with_capacity(samples.len());
    for l in logits {
        all.extend(l?);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.1).collect();
    Ok(readout_metrics(&all, &labels))
}

// ---- CSV output ----

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn generation_csv(report: &GenerationReport) -> String {
    let mut out = String::from("step,med,pixel_mse\n");
    for (s, (m, p)) in report.med.iter().zip(&report.pixel_mse).enumerate() {
        let _ = writeln!(out, "{},{},{}", s + 1, fmt_value(*m), fmt_value(*p));
    }
    out
}

pub fn forced_csv(curve: &[Accuracy]) -> String {
    let mut out = String::from("step,cumulative_accuracy,correct,events\n");
    for (s, a) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", s + 1, fmt_value(a.value()), a.correct, a.total);
    }
    out
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let ball = |b: Option<usize>| b.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut out = String::from("query_slot,query_ball,key_timestep,key_slot,key_ball,weight\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            r.query_slot,
            ball(r.query_ball),
            r.key_timestep,
            r.key_slot,
            ball(r.key_ball),
            r.weight
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
