//! Command-line front end: scene generation, training, fine-tuning,
//! evaluation, the click-placement sweep and self checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uniseg3d::harness::{
    self, selftest, Checkpoint, PreparedScene, Protocol, TrainConfig, Vocabulary,
};
use uniseg3d::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "uniseg3d",
    version,
    about = "Unified 3D point-cloud segmentation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and validation scenes into --out.
    GenScenes(Common),
    /// Train on the scenes in --scenes; writes best.ckpt and last.ckpt.
    Train(Common),
    /// Continue from --checkpoint at a reduced learning rate.
    Finetune(Common),
    /// Evaluate --checkpoint on the validation scenes.
    Eval(Common),
    /// Interactive metrics for several click placements.
    AblatePrompts {
        #[command(flatten)]
        common: Common,
        /// Comma-separated quantile radii.
        #[arg(long = "r-d", value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0])]
        r_d: Vec<f64>,
    },
    /// Compare analytic and finite-difference gradients of the full objective.
    GradCheck(Common),
    /// Run the built-in invariant checks.
    Selftest(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML training configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for every output file.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory holding train_NNN.scene and val_NNN.scene files.
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene split used by eval and ablate-prompts.
    #[arg(long, default_value = "val")]
    split: String,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn scenes_dir(&self) -> Result<&Path> {
        self.scenes
            .as_deref()
            .ok_or_else(|| Error::Config("--scenes is required".into()))
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let p = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
        Checkpoint::load(p)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(name), contents)?;
        Ok(())
    }
}

fn load_prepared(
    dir: &Path,
    split: &str,
    cfg: &TrainConfig,
    d_out: usize,
) -> Result<(Vec<PreparedScene>, Vocabulary)> {
    let scenes = harness::load_split(dir, split)?;
    if scenes.is_empty() {
        return Err(Error::Config(format!(
            "no {split}_NNN.scene files in {}",
            dir.display()
        )));
    }
    let vocab = Vocabulary::new(&scenes, &cfg.novel_classes, d_out)?;
    Ok((harness::prepare_all(scenes, &vocab, cfg.seed)?, vocab))
}

fn training_data(
    c: &Common,
    cfg: &TrainConfig,
) -> Result<(Vec<PreparedScene>, Vec<PreparedScene>, Vocabulary)> {
    let dir = c.scenes_dir()?;
    let (train, vocab) = load_prepared(dir, "train", cfg, cfg.d_out)?;
    let val = harness::load_split(dir, "val")?;
    let val = harness::prepare_all(val, &vocab, cfg.seed ^ 1)?;
    Ok((train, val, vocab))
}

fn write_outcome(c: &Common, prefix: &str, out: &harness::TrainOutcome) -> Result<()> {
    out.best.save(&c.out.join(format!("{prefix}best.ckpt")))?;
    out.last.save(&c.out.join(format!("{prefix}last.ckpt")))?;
    let losses: String = out
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i},{l:.17e}\n"))
        .collect();
    c.write(
        &format!("{prefix}losses.csv"),
        &format!("step,loss\n{losses}"),
    )?;
    let history: String = out
        .history
        .iter()
        .map(|(e, r)| format!("[epoch {e}]\n{}", r.to_text()))
        .collect();
    c.write(&format!("{prefix}history.txt"), &history)
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenScenes(c) => {
            let cfg = c.config()?;
            let (train, val) = harness::generate_split(
                cfg.seed,
                cfg.train_scenes,
                cfg.val_scenes,
                cfg.points_per_scene,
            )?;
            harness::save_split(&c.out, &train, &val)?;
            eprintln!(
                "wrote {} train and {} val scenes to {}",
                train.len(),
                val.len(),
                c.out.display()
            );
        }
        Command::Train(c) => {
            let cfg = c.config()?;
            let (train, val, vocab) = training_data(&c, &cfg)?;
            let out = harness::train(&cfg, &train, &val, &vocab)?;
            write_outcome(&c, "", &out)?;
            if cfg.finetune_trick {
                let ft = harness::finetune_trick(&out.best, &cfg, &train, &val, &vocab)?;
                write_outcome(&c, "finetuned_", &ft)?;
            }
            c.write("config.toml", &cfg.to_toml())?;
        }
        Command::Finetune(c) => {
            let cfg = c.config()?;
            let ckpt = c.checkpoint()?;
            let (train, val, vocab) = training_data(&c, &cfg)?;
            let ft = harness::finetune_trick(&ckpt, &cfg, &train, &val, &vocab)?;
            write_outcome(&c, "finetuned_", &ft)?;
        }
        Command::Eval(c) => {
            let cfg = c.config()?;
            let ckpt = c.checkpoint()?;
            let (scenes, vocab) =
                load_prepared(c.scenes_dir()?, &c.split, &cfg, ckpt.model.config.d_out)?;
            let protocol = Protocol {
                seed: cfg.seed,
                ..Protocol::default()
            };
            let e = harness::evaluate(&ckpt.model, &scenes, &vocab, &protocol)?;
            c.write("report.txt", &e.report.to_text())?;
            for (i, (prep, out)) in scenes.iter().zip(&e.outputs).enumerate() {
                c.write(
                    &format!("{}_{i:03}.tasks", c.split),
                    &out.to_text(&prep.scene),
                )?;
            }
            print!("{}", e.report.to_text());
        }
        Command::AblatePrompts { common: c, r_d } => {
            let cfg = c.config()?;
            let ckpt = c.checkpoint()?;
            let (scenes, vocab) =
                load_prepared(c.scenes_dir()?, &c.split, &cfg, ckpt.model.config.d_out)?;
            let rows = harness::ablate_prompts(&ckpt.model, &scenes, &vocab, &r_d, cfg.seed)?;
            let csv = harness::ablation_csv(&rows);
            c.write("ablation.csv", &csv)?;
            print!("{csv}");
        }
        Command::GradCheck(c) => {
            let check = selftest::grad_check()?;
            let line = format!(
                "{}: {} ({})\n",
                check.name,
                if check.passed { "pass" } else { "FAIL" },
                check.detail
            );
            c.write("gradcheck.txt", &line)?;
            print!("{line}");
            return Ok(check.passed);
        }
        Command::Selftest(c) => {
            let checks = harness::run_selftest()?;
            let text: String = checks
                .iter()
                .map(|k| {
                    format!(
                        "{}: {} {}\n",
                        k.name,
                        if k.passed { "pass" } else { "FAIL" },
                        k.detail
                    )
                })
                .collect();
            c.write("selftest.txt", &text)?;
            print!("{text}");
            return Ok(checks.iter().all(|k| k.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("uniseg3d").chain(args.iter().copied()))
    }

    #[test]
    fn rejects_unknown_commands_and_flags() {
        assert_eq!(parse(&["bogus"]).unwrap_err().exit_code(), 2);
        assert_eq!(
            parse(&["eval", "--no-such-flag"]).unwrap_err().exit_code(),
            2
        );
        let ok = parse(&["ablate-prompts", "--r-d", "0.1,0.9"]).unwrap();
        assert!(matches!(ok.command, Command::AblatePrompts { ref r_d, .. } if r_d == &[0.1, 0.9]));
    }

    #[test]
    fn gen_scenes_is_deterministic() {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let cfg = dirs[0].path().join("small.toml");
        std::fs::write(
            &cfg,
            "train_scenes = 2\nval_scenes = 1\npoints_per_scene = 300\n",
        )
        .unwrap();
        for d in &dirs {
            let out = d.path().to_str().unwrap();
            let cli = parse(&[
                "gen-scenes",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "9",
                "--out",
                out,
            ])
            .unwrap();
            assert!(run(cli.command).unwrap());
        }
        for name in ["train_000.scene", "train_001.scene", "val_000.scene"] {
            let a = std::fs::read(dirs[0].path().join(name)).unwrap();
            let b = std::fs::read(dirs[1].path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn missing_inputs_are_usage_errors() {
        let cli = parse(&["train"]).unwrap();
        assert!(matches!(run(cli.command), Err(Error::Config(_))));
    }
}
