use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use dproto::dataset::{
    add_silence, build_manifest, synth_corpus, Manifest, SplitCounts, SplitSpec, SynthConfig,
};
use dproto::eval::{evaluate, EvalReport};
use dproto::features::{NoiseBank, FRAMES, N_MELS};
use dproto::model::{sample_gumbel, Bound, Mode, Model, Selection};
use dproto::numerics::{grad_check, Checkpoint, Fault, GradCheckConfig, GradCheckReport, Tensor};
use dproto::training::{episode_loss, train, EpisodeLayout, LossConfig, TrainOutcome};
use dproto::{rng, Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub fn counts_line(c: &SplitCounts) -> String {
    format!("train {} / val {} / test {}", c.train, c.val, c.test)
}

/// Manifest for a Speech Commands root, with silence entries cropped from
/// its `_background_noise_` clips.
pub fn cmd_manifest(root: &Path, out: &Path, seed: u64) -> Result<Manifest> {
    let keywords = build_manifest(root, &SplitSpec::split_gsc())?;
    let bank = NoiseBank::load_dir(&root.join("_background_noise_"))?;
    let manifest = add_silence(&keywords, &bank, &mut rng::stream(seed, "silence"))?;
    manifest.save(out)?;
    Ok(manifest)
}

/// Synthetic keyword corpus under `out`, manifest at `out/manifest.tsv`.
pub fn cmd_synth(out: &Path, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    create_dir(out)?;
    synth_corpus(out, cfg, &mut rng::stream(seed, "synth"))
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainFiles {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub config: PathBuf,
}

impl TrainFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.txt"),
            history: dir.join("history.jsonl"),
            config: dir.join("config.ini"),
        }
    }
}

pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<(TrainOutcome, TrainFiles)> {
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let manifest = Manifest::load(&cfg.manifest_path()?)?;
    let bank = if train_cfg.augment.probability > 0.0 {
        Some(NoiseBank::load_dir(&cfg.noise_dir()?)?)
    } else {
        None
    };
    create_dir(out)?;
    let files = TrainFiles::in_dir(out);
    write_file(&files.config, &cfg.to_text())?;
    let mut history = String::new();
    let outcome = train(&manifest, bank.as_ref(), model_cfg, &train_cfg, |r| {
        history.push_str(&r.to_json_line());
        history.push('\n');
        progress(&format!(
            "epoch {:>3}  loss {:.4}  val acc {:.4}  val auroc {:.4}  lr {:.6}  tau {:.3}",
            r.epoch, r.train_loss, r.val_acc, r.val_auroc, r.lr, r.gumbel_tau
        ));
    })?;
    write_file(&files.history, &history)?;
    outcome.best_checkpoint().save(&files.checkpoint)?;
    Ok((outcome, files))
}

/// Report plus the JSON and CSV files it was written to.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<(EvalReport, PathBuf, PathBuf)> {
    let model = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let manifest = Manifest::load(&cfg.manifest_path()?)?;
    let (split, ep, rule) = (cfg.eval_split(), cfg.eval_episode(), cfg.score_rule());
    let loader = dproto::dataset::FeatureLoader::new();
    let report = evaluate(
        &model,
        &manifest,
        split,
        &ep,
        cfg.eval_episodes(),
        rule,
        cfg.seed(),
        &loader,
    )?;
    create_dir(out)?;
    let stem = format!("{split}_{}way_{}shot_{rule}", ep.n_way, ep.n_shot);
    let (json, csv) = (
        out.join(format!("{stem}.json")),
        out.join(format!("{stem}.csv")),
    );
    write_file(&json, &report.to_json())?;
    write_file(&csv, &report.to_csv())?;
    Ok((report, json, csv))
}

pub fn eval_summary(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} split, {}-way {}-shot, {} open, {} episodes, score {}",
        r.split, r.n_way, r.n_shot, r.n_open, r.episodes, r.rule
    );
    let _ = writeln!(
        s,
        "accuracy {:.2} ({:.2}) ±{:.2}",
        100.0 * r.accuracy.mean,
        100.0 * r.accuracy.std,
        100.0 * r.accuracy.ci95
    );
    let _ = write!(
        s,
        "auroc    {:.2} ({:.2}) ±{:.2}",
        100.0 * r.auroc.mean,
        100.0 * r.auroc.std,
        100.0 * r.auroc.ci95
    );
    s
}

/// Finite-difference check of the full episode loss (train mode, Gumbel
/// selection) on random input features shaped like one episode.
pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model_cfg = cfg.model()?;
    let ep = cfg.episode();
    ep.validate()?;
    let seed = cfg.seed();
    let model = Model::new(model_cfg, &mut rng::stream(seed, rng::INIT))?;

    let mut row = 0;
    let mut take = |n: usize| {
        let r: Vec<usize> = (row..row + n).collect();
        row += n;
        r
    };
    let support: Vec<Vec<usize>> = (0..ep.n_way).map(|_| take(ep.n_shot)).collect();
    let known_queries = take(ep.n_way * ep.n_query);
    let known_labels = (0..ep.n_way)
        .flat_map(|n| std::iter::repeat(n).take(ep.n_query))
        .collect();
    let open_queries = take(ep.n_open * ep.n_query);
    let layout = EpisodeLayout {
        support,
        known_queries,
        known_labels,
        open_queries,
    };

    let mut data_rng = rng::stream(seed, "gradcheck");
    let data: Vec<f64> = (0..row * N_MELS * FRAMES)
        .map(|_| data_rng.gen_range(-1.0..1.0))
        .collect();
    let x = Tensor::new(vec![row, 1, N_MELS, FRAMES], data)?;
    let n_selected = layout.known_queries.len()
        + if model_cfg.is_baseline() {
            0
        } else {
            layout.open_queries.len()
        };
    let noise = sample_gumbel(
        &mut rng::stream(seed, rng::GUMBEL),
        n_selected * model_cfg.generator.map_or(0, |g| g.dummies),
    );
    let train_cfg = cfg.train()?;
    let selection = Selection::Gumbel {
        tau: train_cfg.gumbel.start,
        noise: &noise,
    };
    let loss = LossConfig {
        lambda: train_cfg.loss.lambda,
    };

    let mut params = model.params().clone();
    let report = grad_check(
        |tape, vars| {
            let bound = Bound::from(vars.to_vec());
            episode_loss(
                tape,
                &model,
                &bound,
                &layout,
                &x,
                &loss,
                selection,
                Mode::Train,
            )
            .map(|(v, _)| v)
        },
        &mut params,
        cfg.gradcheck_probes(),
        &mut rng::stream(seed, "probes"),
        GradCheckConfig {
            step: cfg.gradcheck_step(),
            fault,
        },
    )?;
    if report.checked() == 0 {
        return Err(Error::GradCheck(
            "every probe straddled a switch point".into(),
        ));
    }
    Ok(report)
}
