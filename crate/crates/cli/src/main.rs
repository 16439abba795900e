use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocvt::config::RunConfig;
use ocvt::dynamics::{derive_seed, rollout, Dynamics};
use ocvt::eval::{
    attention_csv, dump_attention, forced_csv, forced_generation_accuracy, generation_csv, generation_curves,
    load_split, next_step_accuracy, readout_eval, write_text, EvalEpisode,
};
use ocvt::latents::{analytic_decode, OracleEncoder};
use ocvt::objective::{loss_grad_check, train, train_readout, TrainOutputs};
use ocvt::render::{rasterize_states, write_sequence};
use ocvt::sim::{generate_dataset, Manifest, Split, Variant};
use ocvt::tensor::{read_checkpoint, Checkpoint, ConfigValue};
use ocvt::Error;

#[derive(Parser, Debug)]
#[command(name = "ocvt", version, about = "Object-centric video dynamics on bouncing balls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable): `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for data generation and evaluation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug, Clone)]
struct EvalData {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset: episode files plus manifest.json.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        balls: Option<usize>,
    },
    /// Train the dynamics model; writes the best-by-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (defaults to `<out>.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune a pretrained model with the CLS readout.
    TrainReadout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained dynamics checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Fraction of final frames hidden from the model.
        #[arg(long)]
        withhold: Option<f64>,
    },
    /// Roll a model out from the first frames of one episode.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        gen: Option<usize>,
        /// Output directory for the latent file and decoded frames.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite `where` with the ground truth after every step.
        #[arg(long)]
        forced: bool,
    },
    /// Next-step color-change accuracy.
    EvalNextStep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
    },
    /// Free generation: per-step MED and pixel MSE.
    EvalGen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        gen: Option<usize>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Forced generation: cumulative change accuracy per step.
    EvalForced {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        gen: Option<usize>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Readout top-1, top-5 and grid L1.
    EvalReadout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        #[arg(long)]
        withhold: Option<f64>,
    },
    /// Finite-difference check of the training loss gradient in f64.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Head-averaged attention of one layer at one timestep, as CSV.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        timestep: usize,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Render ground-truth frames of one episode as PPM images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> ocvt::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if common.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    cfg.train.jobs = common.jobs;
    cfg.readout.train.jobs = common.jobs;
    Ok(cfg)
}

fn encoder_for(cfg: &RunConfig) -> OracleEncoder {
    OracleEncoder {
        k: cfg.model.k,
        d_what: cfg.model.d_what,
        tagged_ball: cfg.data.tag_ball,
    }
}

/// Encoder matching the data a checkpoint was trained on.
fn checkpoint_encoder(ckpt: &Checkpoint, model: &Dynamics<f32>) -> ocvt::Result<OracleEncoder> {
    let tag = match ckpt.get("data.tag_ball") {
        Some(_) => ckpt.int("data.tag_ball")?,
        None => -1,
    };
    Ok(OracleEncoder {
        k: model.config().k,
        d_what: model.config().d_what,
        tagged_ball: usize::try_from(tag).ok(),
    })
}

fn tag_entry(cfg: &RunConfig) -> (String, ConfigValue) {
    let tag = cfg.data.tag_ball.map_or(-1, |b| b as i64);
    ("data.tag_ball".to_string(), ConfigValue::Int(tag))
}

struct Loaded {
    model: Dynamics<f32>,
    episodes: Vec<EvalEpisode>,
}

fn load_eval(eval: &EvalData, jobs: usize) -> ocvt::Result<Loaded> {
    let ckpt = read_checkpoint(&eval.ckpt)?;
    let model = Dynamics::from_checkpoint(&ckpt)?;
    let encoder = checkpoint_encoder(&ckpt, &model)?;
    let episodes = load_split(&eval.data, eval.split, &encoder, jobs)?;
    if episodes.is_empty() {
        return Err(Error::Config(format!(
            "split '{}' of {} has no episodes",
            eval.split.name(),
            eval.data.display()
        )));
    }
    Ok(Loaded { model, episodes })
}

fn pick(episodes: &[EvalEpisode], index: usize) -> ocvt::Result<&EvalEpisode> {
    episodes
        .get(index)
        .ok_or_else(|| Error::Config(format!("episode {index} out of range ({} episodes)", episodes.len())))
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

fn run(cli: Cli) -> ocvt::Result<bool> {
    match cli.command {
        Command::GenData {
            common,
            out,
            variant,
            train,
            val,
            test,
            frames,
            balls,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.sim.variant = v;
            }
            for (slot, v) in [
                (&mut cfg.data.train, train),
                (&mut cfg.data.val, val),
                (&mut cfg.data.test, test),
                (&mut cfg.sim.num_frames, frames),
                (&mut cfg.sim.num_balls, balls),
            ] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            cfg.sim.seed = common.seed;
            let manifest = generate_dataset(&cfg.sim, cfg.data.train, cfg.data.val, cfg.data.test, &out, common.jobs)?;
            println!(
                "wrote {} episodes ({} train, {} val, {} test) to {}",
                manifest.episodes.len(),
                manifest.n_train,
                manifest.n_val,
                manifest.n_test,
                out.display()
            );
        }
        Command::Train {
            common,
            data,
            out,
            log,
            steps,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.train.seed = derive_seed(common.seed, 2);
            cfg.validate()?;
            let encoder = encoder_for(&cfg);
            let train_set = load_split(&data, Split::Train, &encoder, common.jobs)?;
            let val_set = load_split(&data, Split::Val, &encoder, common.jobs)?;
            let mut model = Dynamics::<f32>::new(cfg.model, derive_seed(common.seed, 1))?;
            let outputs = TrainOutputs {
                checkpoint: out.clone(),
                log: log.unwrap_or_else(|| default_log(&out)),
            };
            let report = train(
                &mut model,
                &train_set,
                &val_set,
                &cfg.train,
                &cfg.loss,
                &outputs,
                &[tag_entry(&cfg)],
                |line| eprintln!("{line}"),
            )?;
            println!(
                "best val change accuracy {} at step {}; checkpoint {}",
                fmt(report.best_val_accuracy),
                report.best_step,
                out.display()
            );
        }
        Command::TrainReadout {
            common,
            data,
            ckpt,
            out,
            log,
            steps,
            withhold,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.readout.train.steps = s;
            }
            if let Some(w) = withhold {
                cfg.readout.withhold = w;
            }
            cfg.readout.train.seed = derive_seed(common.seed, 3);
            let pre = read_checkpoint(&ckpt)?;
            let mut model = Dynamics::from_checkpoint(&pre)?;
            let encoder = checkpoint_encoder(&pre, &model)?;
            let train_set = load_split(&data, Split::Train, &encoder, common.jobs)?;
            let val_set = load_split(&data, Split::Val, &encoder, common.jobs)?;
            let tag = (
                "data.tag_ball".to_string(),
                ConfigValue::Int(encoder.tagged_ball.map_or(-1, |b| b as i64)),
            );
            let outputs = TrainOutputs {
                checkpoint: out.clone(),
                log: log.unwrap_or_else(|| default_log(&out)),
            };
            let report = train_readout(&mut model, &train_set, &val_set, &cfg.readout, &outputs, &[tag], |line| {
                eprintln!("{line}")
            })?;
            println!(
                "best val top-1 {} at step {}; checkpoint {}",
                fmt(report.best_val_accuracy),
                report.best_step,
                out.display()
            );
        }
        Command::Rollout {
            common,
            eval,
            episode,
            context,
            gen,
            out,
            forced,
        } => {
            let cfg = load_config(&common)?;
            let loaded = load_eval(&eval, common.jobs)?;
            let ep = pick(&loaded.episodes, episode)?;
            let n_context = context.unwrap_or(cfg.eval.context);
            let total = ep.latents.len();
            if n_context == 0 || n_context >= total {
                return Err(Error::Config(format!(
                    "context {n_context} must lie in 1..{total} for an episode of {total} frames"
                )));
            }
            let n_gen = gen.unwrap_or(cfg.eval.generate).min(total - n_context);
            let truth = ep.latents.window(n_context..n_context + n_gen);
            let seq = rollout(
                &loaded.model,
                &ep.latents.window(0..n_context),
                n_gen,
                forced.then_some(&truth),
            )?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            seq.write(&out.join("rollout.lz"))?;
            let frames: Vec<_> = seq.frames.iter().map(|f| analytic_decode(f, cfg.eval.resolution)).collect();
            write_sequence(&out, episode, &frames)?;
            println!("rolled out {n_gen} frames after {n_context} context frames into {}", out.display());
        }
        Command::EvalNextStep { common, eval } => {
            let _ = load_config(&common)?;
            let loaded = load_eval(&eval, common.jobs)?;
            let acc = next_step_accuracy(&loaded.model, &loaded.episodes, common.jobs)?;
            println!(
                "change accuracy {} ({} / {} events)",
                fmt(acc.value()),
                acc.correct,
                acc.total
            );
        }
        Command::EvalGen {
            common,
            eval,
            context,
            gen,
            csv,
        } => {
            let cfg = load_config(&common)?;
            let loaded = load_eval(&eval, common.jobs)?;
            let report = generation_curves(
                &loaded.model,
                &loaded.episodes,
                context.unwrap_or(cfg.eval.context),
                gen.unwrap_or(cfg.eval.generate),
                common.jobs,
            )?;
            write_text(&csv, &generation_csv(&report))?;
            println!(
                "step-1 MED {}, step-1 pixel MSE {} over {} episodes",
                fmt(report.med.first().copied().unwrap_or(f64::NAN)),
                fmt(report.pixel_mse.first().copied().unwrap_or(f64::NAN)),
                report.episodes
            );
        }
        Command::EvalForced {
            common,
            eval,
            context,
            gen,
            csv,
        } => {
            let cfg = load_config(&common)?;
            let loaded = load_eval(&eval, common.jobs)?;
            let curve = forced_generation_accuracy(
                &loaded.model,
                &loaded.episodes,
                context.unwrap_or(cfg.eval.context),
                gen.unwrap_or(cfg.eval.generate),
                common.jobs,
            )?;
            write_text(&csv, &forced_csv(&curve))?;
            if let Some(last) = curve.last() {
                println!(
                    "cumulative change accuracy after {} steps: {} ({} events)",
                    curve.len(),
                    fmt(last.value()),
                    last.total
                );
            }
        }
        Command::EvalReadout {
            common,
            eval,
            withhold,
        } => {
            let cfg = load_config(&common)?;
            let loaded = load_eval(&eval, common.jobs)?;
            if !loaded.model.has_readout() {
                return Err(Error::Config(format!("{} has no readout head", eval.ckpt.display())));
            }
            let report = readout_eval(
                &loaded.model,
                &loaded.episodes,
                withhold.unwrap_or(cfg.readout.withhold),
                cfg.readout.ball,
                common.jobs,
            )?;
            println!(
                "top-1 {}, top-5 {}, grid L1 {} over {} episodes",
                fmt(report.top1),
                fmt(report.top5),
                fmt(report.grid_l1),
                report.samples
            );
        }
        Command::GradCheck { common } => {
            let cfg = load_config(&common)?;
            cfg.loss.validate()?;
            let g = &cfg.gradcheck;
            let report = loss_grad_check(cfg.model, &cfg.loss, g.frames, g.batch, g.eps, common.seed)?;
            let ok = report.max_rel_error < g.tolerance;
            println!(
                "max relative error {:.3e} at {}[{}] over {} entries (max absolute error {:.2e}): {}",
                report.max_rel_error,
                report.worst_param,
                report.worst_index,
                report.entries_checked,
                report.max_abs_error,
                if ok { "ok" } else { "FAILED" }
            );
            return Ok(ok);
        }
        Command::DumpAttn {
            common,
            eval,
            episode,
            layer,
            timestep,
            csv,
        } => {
            let _ = load_config(&common)?;
            let loaded = load_eval(&eval, common.jobs)?;
            let ep = pick(&loaded.episodes, episode)?;
            let rows = dump_attention(&loaded.model, ep, layer, timestep)?;
            write_text(&csv, &attention_csv(&rows))?;
            println!("wrote {} attention rows to {}", rows.len(), csv.display());
        }
        Command::Render {
            common,
            data,
            split,
            episode,
            out,
        } => {
            let cfg = load_config(&common)?;
            let manifest = Manifest::load(&data)?;
            let entry = manifest
                .entries(split)
                .nth(episode)
                .ok_or_else(|| Error::Config(format!("episode {episode} not in split '{}'", split.name())))?;
            let ep = ocvt::sim::Episode::read(&data.join(&entry.file))?;
            let frames: Vec<_> = ep
                .states
                .iter()
                .map(|s| rasterize_states(s, cfg.eval.resolution))
                .collect();
            write_sequence(&out, episode, &frames)?;
            println!("wrote {} frames to {}", frames.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
