use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use earkey::auth::{verify, ReferenceSet, ScoreMode};
use earkey::decode::{beam_decode, lexicon_topn, DecodeRecord};
use earkey::dsp::FrontEnd;
use earkey::harness::{
    evaluate, lexicon_decoder, split_leave_one_session, train_user, Corpus, ExperimentConfig,
    ScoreNorm, UserSplit,
};
use earkey::io::read_wav;
use earkey::nn::{Checkpoint, Inference};
use earkey::synth::synth_dataset;
use earkey::{Error, Result};
use serde_json::json;

/// Whisper-plus-ultrasonic earable authentication: data synthesis,
/// training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "earkey", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "earkey-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic WAV corpus with `manifest.jsonl`.
    Synth,
    /// Extract features from the configured corpus into `.ekft` files.
    Features,
    /// Train one model per target user on its training sessions.
    Train {
        /// Restrict to these users (repeatable).
        #[arg(long)]
        user: Vec<String>,
    },
    /// Build a reference set from a user's training sessions.
    Enroll {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
    },
    /// Score WAV captures against a trained model; prints JSON lines.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference set for reference-match scoring.
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Decode WAV captures to letter hypotheses and lexicon words.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Leave-one-session-out evaluation of trained checkpoints.
    Eval {
        /// Directory holding `<user>.ekcp`; defaults to `--out`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &ExperimentConfig) -> Result<(Corpus, Vec<UserSplit>)> {
    let corpus = Corpus::load(cfg)?;
    let splits = split_leave_one_session(&corpus.entries, cfg.seed)?;
    Ok((corpus, splits))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn utterance_id(path: &Path) -> String {
    path.with_extension("").to_string_lossy().into_owned()
}

fn infer_wav(fe: &FrontEnd, ck: &Checkpoint, path: &Path, spell: bool) -> Result<Inference> {
    let (_, feats) = fe.process(&read_wav(path)?)?;
    ck.model.infer(&feats, spell)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::Synth => {
            let fe = FrontEnd::new(cfg.feature_config())?;
            let manifest = synth_dataset(&cfg.dataset_spec()?, &fe.probe, out)?;
            log::info!("wrote {} utterances to {}", manifest.len(), out.display());
        }
        Command::Features => {
            let corpus = Corpus::load(&cfg)?;
            corpus.save_features(out)?;
            log::info!(
                "wrote features of {} utterances to {}",
                corpus.len(),
                out.display()
            );
        }
        Command::Train { user } => {
            let (corpus, splits) = load_split(&cfg)?;
            for u in user {
                if !splits.iter().any(|s| &s.user == u) {
                    return Err(Error::Data(format!("unknown user {u}")));
                }
            }
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            for split in splits
                .iter()
                .filter(|s| user.is_empty() || user.contains(&s.user))
            {
                let u = &split.user;
                log::info!("training {u} (test session {})", split.test_session);
                let outcome = train_user(&cfg, &corpus, &splits, u)?;
                outcome.checkpoint.save(&out.join(format!("{u}.ekcp")))?;
                outcome.write_loss_csv(&out.join(format!("{u}.loss.csv")))?;
                let ids = |ix: &[usize]| -> Vec<&str> {
                    ix.iter()
                        .map(|&i| corpus.entries[i].utterance_id.as_str())
                        .collect()
                };
                let provenance = json!({
                    "user": u,
                    "config_fingerprint": cfg.fingerprint(),
                    "seed": cfg.seed,
                    "test_session": split.test_session,
                    "train": ids(&split.train),
                    "test": ids(&split.test),
                    "threshold": outcome.threshold(),
                    "skipped_batches": outcome.skipped_batches,
                    "consumed": outcome.consumed,
                    "batches": outcome.batches,
                });
                write_json(&out.join(format!("{u}.provenance.json")), &provenance)?;
                if let (Some(first), Some(last)) =
                    (outcome.epoch_means().first(), outcome.epoch_means().last())
                {
                    log::info!(
                        "{u}: L_total {first:.4} -> {last:.4}, threshold {:.4}",
                        outcome.threshold()
                    );
                }
            }
        }
        Command::Enroll { checkpoint, user } => {
            let ck = Checkpoint::load(checkpoint)?;
            let (corpus, splits) = load_split(&cfg)?;
            let split = splits
                .iter()
                .find(|s| &s.user == user)
                .ok_or_else(|| Error::Data(format!("unknown user {user}")))?;
            let utts: Vec<_> = split
                .train
                .iter()
                .map(|&i| corpus.features[i].clone())
                .collect();
            let refs = earkey::auth::enroll(&ck.model, &utts, user, 0)?;
            let path = out.join(format!("{user}.ekrs"));
            refs.save(&path)?;
            log::info!(
                "enrolled {} utterances of {user} into {}",
                refs.len(),
                path.display()
            );
        }
        Command::Verify {
            checkpoint,
            refs,
            wavs,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let thr = ck
                .extra("threshold")
                .and_then(|t| t.values.first().copied())
                .ok_or_else(|| Error::Data("checkpoint has no calibrated threshold".into()))?;
            let norm = ScoreNorm::from_checkpoint(&ck);
            let mode = cfg.eval.score_mode;
            let refs = refs.as_deref().map(ReferenceSet::load).transpose()?;
            if mode == ScoreMode::ReferenceMatch && refs.is_none() {
                return Err(Error::Config("reference-match scoring needs --refs".into()));
            }
            let fe = FrontEnd::new(cfg.feature_config())?;
            let mut stdout = std::io::stdout().lock();
            for wav in wavs {
                let inf = infer_wav(&fe, &ck, wav, false)?;
                let mut v = verify(
                    &utterance_id(wav),
                    &inf.a_w,
                    &inf.a_u,
                    refs.as_ref(),
                    thr,
                    mode,
                )?;
                v.score = norm.apply(v.score);
                v.accept = earkey::auth::decide(v.score, thr);
                writeln!(stdout, "{}", serde_json::to_string(&v)?)?;
            }
        }
        Command::Decode { checkpoint, wavs } => {
            let ck = Checkpoint::load(checkpoint)?;
            let lexicon = cfg.data.lexicon.load()?;
            let width = cfg.eval.beam_width;
            let fe = FrontEnd::new(cfg.feature_config())?;
            let mut stdout = std::io::stdout().lock();
            for wav in wavs {
                let inf = infer_wav(&fe, &ck, wav, true)?;
                let hypotheses = beam_decode(&inf.log_probs, width, width)?;
                let top_words = lexicon_topn(&hypotheses, &lexicon, 3.min(lexicon.len()))?;
                let rec = DecodeRecord {
                    utterance_id: utterance_id(wav),
                    hypotheses,
                    top_words,
                };
                writeln!(stdout, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        Command::Eval { checkpoints } => {
            let dir = checkpoints.as_deref().unwrap_or(out);
            let (corpus, splits) = load_split(&cfg)?;
            let mut cks = BTreeMap::new();
            for s in &splits {
                cks.insert(
                    s.user.clone(),
                    Checkpoint::load(&dir.join(format!("{}.ekcp", s.user)))?,
                );
            }
            let decoder = lexicon_decoder(cfg.data.lexicon.load()?, cfg.eval.beam_width);
            let report = evaluate(&cfg, &corpus, &splits, &cks, &decoder)?;
            fs::write(out.join("report.json"), report.to_json()? + "\n")?;
            fs::write(out.join("users.csv"), report.users_csv())?;
            log::info!(
                "top-1 {:.3}, TPR {:.3}, FPR {:.3}, EER {:.3} over {} genuine / {} attack trials",
                report.mean_top1,
                report.tpr,
                report.fpr,
                report.eer,
                report.genuine_trials,
                report.attack_trials
            );
        }
    }
    Ok(())
}
