//! Command-line interface.
//!
//! Plain `--key value` flag parsing over an optional `key=value` config
//! file (`--config path`); flags win. Every subcommand prints its effective
//! configuration before acting. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error. `XMGAN_RUN_DIR` overrides the run directory root.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use crate::checkpoint;
use crate::classify::{self, HarnessConfig};
use crate::data;
use crate::error::{Result, XmError};
use crate::gradsuite;
use crate::metrics;
use crate::ppm;
use crate::rng;
use crate::trainer::{AblationMode, TrainConfig, Trainer};

const USAGE: &str = "usage: xmgan <command> [--flag value ...]

commands:
  make-data   render the texture dataset to disk       (--out data --seed 0 --image-size 32)
  train       adversarial training run                 (--steps 2000 --ablation full --seed 0 --run NAME)
  generate    image grid for one class from a model    (--ckpt PATH --class ID --alpha a1,a2 --num 9)
  evaluate    fid_lite / lpips_lite for a model        (--ckpt PATH --num 64)
  classify    low-data classification, both arms       (--ckpt PATH --seeds 0,1,2,3,4)
  gradcheck   finite-difference gradient verification  (--seeds 10)

any train-config key can also be set via --config FILE (key=value lines);
explicit flags override file entries.";

const KNOWN_KEYS: &[&str] = &[
    "config", "run", "out", "resume", "steps", "batch_size", "lr", "k", "eta_p", "eta_cl",
    "ablation", "seed", "image_size", "enc_channels", "heads", "noise_dim", "seen_classes",
    "per_class", "data_seed", "seen", "unseen", "eval_every", "eval_per_class", "ckpt_every",
    "phi_seed", "ckpt", "class", "alpha", "num", "seeds", "epochs", "augment",
];

pub struct Options {
    map: BTreeMap<String, String>,
}

impl Options {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn str(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                XmError::Usage(format!("value '{raw}' for --{key} is not a valid number"))
            }),
        }
    }

    fn list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| XmError::Usage(format!("bad list entry '{p}' for --{key}")))
                })
                .collect(),
        }
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| XmError::Usage(format!("missing required flag --{key}")))
    }
}

fn parse_args(args: &[String]) -> Result<(String, Options)> {
    let cmd = args
        .first()
        .ok_or_else(|| XmError::Usage(USAGE.to_string()))?
        .clone();
    let mut flags = BTreeMap::new();
    let mut i = 1;
    while i < args.len() {
        let token = &args[i];
        let key = token
            .strip_prefix("--")
            .ok_or_else(|| XmError::Usage(format!("expected a --flag, got '{token}'")))?
            .replace('-', "_");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(XmError::Usage(format!("unknown flag --{key}")));
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| XmError::Usage(format!("flag --{key} is missing a value")))?;
        flags.insert(key, value.clone());
        i += 2;
    }

    // config file first, explicit flags override
    let mut map = BTreeMap::new();
    if let Some(path) = flags.get("config") {
        for (lineno, line) in fs::read_to_string(path)
            .map_err(|e| XmError::io(path.clone(), e))?
            .lines()
            .enumerate()
        {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| XmError::Parse {
                path: path.clone(),
                offset: lineno,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map.extend(flags);
    Ok((cmd, Options { map }))
}

fn train_config_from(opts: &Options) -> Result<TrainConfig> {
    let seed = opts.parse_num("seed", 0u64)?;
    let mut cfg = TrainConfig::desk(seed);
    cfg.steps = opts.parse_num("steps", cfg.steps)?;
    cfg.batch_size = opts.parse_num("batch_size", cfg.batch_size)?;
    cfg.lr = opts.parse_num("lr", cfg.lr)?;
    cfg.k = opts.parse_num("k", cfg.k)?;
    cfg.weights.eta_p = opts.parse_num("eta_p", cfg.weights.eta_p)?;
    cfg.weights.eta_cl = opts.parse_num("eta_cl", cfg.weights.eta_cl)?;
    cfg.ablation = AblationMode::parse(&opts.str("ablation", cfg.ablation.name()))?;
    let image_size = opts.parse_num("image_size", cfg.net.image_size)?;
    cfg.net.image_size = image_size;
    cfg.data.image_size = image_size;
    cfg.net.enc_channels = opts.list("enc_channels", &cfg.net.enc_channels)?;
    cfg.net.heads = opts.parse_num("heads", cfg.net.heads)?;
    cfg.net.noise_dim = opts.parse_num("noise_dim", cfg.net.noise_dim)?;
    cfg.data.per_class = opts.parse_num("per_class", cfg.data.per_class)?;
    cfg.data.seed = opts.parse_num("data_seed", seed)?;
    cfg.data.seen = opts.list("seen", &cfg.data.seen)?;
    cfg.data.unseen = opts.list("unseen", &cfg.data.unseen)?;
    cfg.net.seen_classes = cfg.data.seen.len();
    cfg.eval_every = opts.parse_num("eval_every", cfg.eval_every)?;
    cfg.eval_per_class = opts.parse_num("eval_per_class", cfg.eval_per_class)?;
    cfg.ckpt_every = opts.parse_num("ckpt_every", cfg.ckpt_every)?;
    cfg.phi_seed = opts.parse_num("phi_seed", cfg.phi_seed)?;
    cfg.validate().map_err(|e| XmError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run_root() -> PathBuf {
    std::env::var("XMGAN_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("runs"))
}

fn print_effective(cfg: &TrainConfig, extras: &[(&str, String)]) {
    print!("{}", cfg.canonical_string());
    for (k, v) in extras {
        println!("{k}={v}");
    }
}

fn parse_alphas(raw: &str, expected: usize) -> Result<Vec<f64>> {
    let alphas: Vec<f64> = raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| XmError::Usage(format!("bad alpha entry '{p}'")))
        })
        .collect::<Result<_>>()?;
    if alphas.len() != expected {
        return Err(XmError::Usage(format!(
            "--alpha needs {expected} entries (K-1), got {}",
            alphas.len()
        )));
    }
    if alphas.iter().any(|&a| a < 0.0) {
        return Err(XmError::Usage("alpha entries must be nonnegative".into()));
    }
    let total: f64 = alphas.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(XmError::Usage(format!(
            "alpha must lie on the simplex: entries sum to {total}, expected 1"
        )));
    }
    Ok(alphas)
}

fn restored_trainer(opts: &Options) -> Result<(Trainer, data::Dataset)> {
    let cfg = train_config_from(opts)?;
    let ckpt_path = PathBuf::from(opts.require("ckpt")?);
    let ckpt = checkpoint::load(&ckpt_path)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.restore(&ckpt)?;
    let ds = data::make_dataset(&cfg.data);
    Ok((trainer, ds))
}

fn cmd_make_data(opts: &Options) -> Result<()> {
    let cfg = train_config_from(opts)?;
    let out = PathBuf::from(opts.str("out", "data"));
    print_effective(&cfg, &[("out", out.display().to_string())]);
    let ds = data::make_dataset(&cfg.data);
    data::save_dataset(&ds, &out)?;
    println!(
        "wrote {} images ({} classes x {}) to {}",
        cfg.data.class_count * cfg.data.per_class,
        cfg.data.class_count,
        cfg.data.per_class,
        out.display()
    );
    Ok(())
}

fn cmd_train(opts: &Options) -> Result<()> {
    let cfg = train_config_from(opts)?;
    let run_name = opts.str("run", &format!("{}_s{}", cfg.ablation.name(), cfg.seed));
    let resume = opts.str("resume", "true") == "true";
    let run_dir = run_root().join(&run_name);
    print_effective(&cfg, &[("run_dir", run_dir.display().to_string()), ("resume", resume.to_string())]);
    let outcome = crate::trainer::train_loop(&cfg, &run_dir, resume)?;
    println!(
        "done: fid_lite {:.4} -> {:.4}, lpips_lite {:.4}",
        outcome.first_fid, outcome.final_fid, outcome.final_lpips
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.ckpt_path.display());
    Ok(())
}

fn cmd_generate(opts: &Options) -> Result<()> {
    // validate the request before touching the checkpoint
    let request_cfg = train_config_from(opts)?;
    let class_id = opts.parse_num("class", request_cfg.data.unseen[0])?;
    if class_id >= request_cfg.data.class_count {
        return Err(XmError::Usage(format!(
            "class {class_id} out of range (dataset has {} classes)",
            request_cfg.data.class_count
        )));
    }
    let num: usize = opts.parse_num("num", 9usize)?;
    let alphas = match opts.get("alpha") {
        Some(raw) => Some(parse_alphas(raw, request_cfg.k - 1)?),
        None => None,
    };
    let (trainer, ds) = restored_trainer(opts)?;
    let cfg = &trainer.cfg;
    let out = PathBuf::from(opts.str(
        "out",
        &run_root().join(format!("generated_class{class_id}.ppm")).display().to_string(),
    ));
    print_effective(cfg, &[
        ("class", class_id.to_string()),
        ("num", num.to_string()),
        ("alpha", opts.str("alpha", "(random per sample)")),
        ("out", out.display().to_string()),
    ]);
    let images = trainer.generate_batch(
        &ds,
        class_id,
        num,
        rng::domain::GENERATE,
        trainer.step,
        alphas.as_deref(),
    );
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| XmError::io(parent.display().to_string(), e))?;
        }
    }
    let cols = (num as f64).sqrt().ceil() as usize;
    ppm::save(&out, &ppm::grid(&images, cols.max(1)))?;
    println!("wrote {num} samples of class {class_id} to {}", out.display());
    Ok(())
}

fn cmd_evaluate(opts: &Options) -> Result<()> {
    let (mut trainer, ds) = restored_trainer(opts)?;
    trainer.cfg.eval_per_class = opts.parse_num("num", trainer.cfg.eval_per_class)?;
    print_effective(&trainer.cfg, &[("ckpt", opts.str("ckpt", ""))]);
    let (fid, lpips, _) = trainer.eval(&ds, trainer.step)?;
    println!("fid_lite={fid:.6}");
    println!("lpips_lite={lpips:.6}");
    Ok(())
}

fn cmd_classify(opts: &Options) -> Result<()> {
    let (trainer, ds) = restored_trainer(opts)?;
    let harness = HarnessConfig {
        augment_per_class: opts.parse_num("augment", 30usize)?,
        epochs: opts.parse_num("epochs", 100usize)?,
        k: trainer.cfg.k,
        noise_dim: trainer.cfg.net.noise_dim,
        modulation: trainer.cfg.ablation.modulation(),
        seeds: opts
            .list("seeds", &[0, 1, 2, 3, 4])?
            .into_iter()
            .map(|s| s as u64)
            .collect(),
        ..HarnessConfig::default()
    };
    let out = PathBuf::from(opts.str(
        "out",
        &run_root().join("classify_results.csv").display().to_string(),
    ));
    print_effective(&trainer.cfg, &[
        ("augment", harness.augment_per_class.to_string()),
        ("epochs", harness.epochs.to_string()),
        ("seeds", format!("{:?}", harness.seeds)),
        ("out", out.display().to_string()),
    ]);
    let report = classify::run_low_data_eval(&trainer.model.gen, &ds, &harness)?;
    print!("{}", report.summary_table());
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| XmError::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(&out, report.csv()).map_err(|e| XmError::io(out.display().to_string(), e))?;
    println!("results: {}", out.display());
    Ok(())
}

fn cmd_gradcheck(opts: &Options) -> Result<()> {
    let seeds: u64 = opts.parse_num("seeds", 10u64)?;
    println!("seeds={seeds}");
    println!("tolerance={:e}", gradsuite::TOLERANCE);
    println!("phi_seed={}", metrics::PHI_SEED);
    let results = gradsuite::run(seeds);
    let worst = gradsuite::worst(&results);
    println!("checks={}", results.len());
    println!("worst_check={}", worst.name);
    println!("max_rel_error={:e}", worst.max_rel_err);
    if worst.max_rel_err <= gradsuite::TOLERANCE {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(XmError::Contract(format!(
            "gradient check failed: {} has max relative error {:e}",
            worst.name, worst.max_rel_err
        )))
    }
}

/// Parse and run; returns the process exit code.
pub fn dispatch(args: &[String]) -> i32 {
    let parsed = parse_args(args);
    let result = parsed.and_then(|(cmd, opts)| match cmd.as_str() {
        "make-data" => cmd_make_data(&opts),
        "train" => cmd_train(&opts),
        "generate" => cmd_generate(&opts),
        "evaluate" => cmd_evaluate(&opts),
        "classify" => cmd_classify(&opts),
        "gradcheck" => cmd_gradcheck(&opts),
        other => Err(XmError::Usage(format!("unknown command '{other}'\n\n{USAGE}"))),
    });
    match result {
        Ok(()) => 0,
        Err(e @ (XmError::Usage(_) | XmError::Config(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(dispatch(&argv(&["train", "--bogus", "1"])), 2);
    }

    #[test]
    fn unknown_command_is_usage_error() {
        assert_eq!(dispatch(&argv(&["frobnicate"])), 2);
    }

    #[test]
    fn missing_value_is_usage_error() {
        assert_eq!(dispatch(&argv(&["train", "--steps"])), 2);
    }

    #[test]
    fn off_simplex_alpha_is_usage_error() {
        assert!(parse_alphas("0.7,0.4", 2).is_err());
        assert!(parse_alphas("-0.5,1.5", 2).is_err());
        assert!(parse_alphas("0.5", 2).is_err());
        assert!(parse_alphas("0.25,0.75", 2).is_ok());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = std::env::temp_dir().join(format!("xmgan_cli_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let cfg_path = dir.join("cfg.txt");
        fs::write(&cfg_path, "steps=77\nlr=0.5\n").unwrap();
        let (_, opts) = parse_args(&argv(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--steps",
            "11",
        ]))
        .unwrap();
        let cfg = train_config_from(&opts).unwrap();
        assert_eq!(cfg.steps, 11, "flag must win over file");
        assert_eq!(cfg.lr, 0.5, "file value must apply when no flag is given");
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn train_config_defaults_resolve() {
        let (_, opts) = parse_args(&argv(&["train", "--seed", "3"])).unwrap();
        let cfg = train_config_from(&opts).unwrap();
        assert_eq!(cfg.steps, 2000);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.weights.eta_p, 50.0);
        assert_eq!(cfg.weights.eta_cl, 1.0);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.data.seed, 3);
    }
}
