//! Episodic adversarial training on the seen classes.
//!
//! Each step samples a batch of independent episodes, runs one
//! discriminator update (hinge + class loss on real images) followed by one
//! generator update (hinge + weighted perceptual + class loss on fakes),
//! with losses and gradients averaged over the batch. Episodes are
//! processed in parallel; gradients, batch-norm observations, and episode
//! randomness are all keyed by (seed, step, episode index), so runs are
//! bit-reproducible regardless of scheduling.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, Dataset, DatasetSpec, Episode};
use crate::error::{Result, XmError};
use crate::fusion::ModulationMode;
use crate::metrics::{self, PerceptualExtractor};
use crate::model::{
    build_d_loss, build_g_loss, FewShotGan, Generator, LossReport, LossWeights, NetConfig,
    PerceptualMode,
};
use crate::nn::{apply_bn_updates, AdamState, Ctx, Mode, Module, ParamKind};
use crate::ppm;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Cross-attention with plain layer norm, uniform blending, no
    /// perceptual loss.
    Baseline,
    /// Baseline plus a uniformly weighted perceptual loss.
    Pl,
    /// Random simplex blend weights used for fusion and perceptual
    /// weighting.
    Ppl,
    /// Ppl plus modulated normalization driven by noise only.
    ClnNoiseOnly,
    /// The complete model.
    Full,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AblationMode::Baseline),
            "pl" => Ok(AblationMode::Pl),
            "ppl" => Ok(AblationMode::Ppl),
            "cln_noise_only" => Ok(AblationMode::ClnNoiseOnly),
            "full" => Ok(AblationMode::Full),
            other => Err(XmError::Usage(format!(
                "unknown ablation mode '{other}' (expected baseline|pl|ppl|cln_noise_only|full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Pl => "pl",
            AblationMode::Ppl => "ppl",
            AblationMode::ClnNoiseOnly => "cln_noise_only",
            AblationMode::Full => "full",
        }
    }

    pub fn modulation(&self) -> ModulationMode {
        match self {
            AblationMode::Baseline | AblationMode::Pl | AblationMode::Ppl => ModulationMode::Plain,
            AblationMode::ClnNoiseOnly => ModulationMode::NoiseOnly,
            AblationMode::Full => ModulationMode::Full,
        }
    }

    pub fn perceptual(&self) -> PerceptualMode {
        match self {
            AblationMode::Baseline => PerceptualMode::Off,
            AblationMode::Pl => PerceptualMode::Uniform,
            _ => PerceptualMode::Alpha,
        }
    }

    /// Whether blend weights are drawn from the simplex (vs fixed uniform).
    pub fn random_alphas(&self) -> bool {
        !matches!(self, AblationMode::Baseline | AblationMode::Pl)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub k: usize,
    pub weights: LossWeights,
    pub ablation: AblationMode,
    pub seed: u64,
    pub net: NetConfig,
    pub data: DatasetSpec,
    pub eval_every: u64,
    pub eval_per_class: usize,
    pub ckpt_every: u64,
    pub phi_seed: u64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            k: 3,
            weights: LossWeights::default(),
            ablation: AblationMode::Full,
            seed,
            net: NetConfig::desk(),
            data: DatasetSpec::new(32, seed),
            eval_every: 200,
            eval_per_class: 64,
            ckpt_every: 500,
            phi_seed: metrics::PHI_SEED,
        }
    }

    /// Canonical key=value form, echoed into the run directory.
    pub fn canonical_string(&self) -> String {
        let mut s = format!("steps={}\n", self.steps);
        s.push_str(&format!("eval_every={}\n", self.eval_every));
        s.push_str(&format!("eval_per_class={}\n", self.eval_per_class));
        s.push_str(&format!("ckpt_every={}\n", self.ckpt_every));
        s.push_str(&self.identity_string());
        s
    }

    /// The fingerprinted subset: everything that shapes the model or the
    /// training trajectory. Run-length and cadence fields stay out so a
    /// resumed run may extend `steps` without being refused.
    pub fn identity_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("k", self.k.to_string());
        kv("eta_p", self.weights.eta_p.to_string());
        kv("eta_cl", self.weights.eta_cl.to_string());
        kv("ablation", self.ablation.name().to_string());
        kv("seed", self.seed.to_string());
        kv("image_size", self.net.image_size.to_string());
        kv(
            "enc_channels",
            self.net
                .enc_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("heads", self.net.heads.to_string());
        kv("noise_dim", self.net.noise_dim.to_string());
        kv("seen_classes", self.net.seen_classes.to_string());
        kv("per_class", self.data.per_class.to_string());
        kv("data_seed", self.data.seed.to_string());
        kv("seen", self.data.seen.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        kv("unseen", self.data.unseen.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        kv("phi_seed", self.phi_seed.to_string());
        s
    }

    pub fn fingerprint(&self) -> u64 {
        checkpoint::fingerprint(&self.identity_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.k < 2 {
            return Err(XmError::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(XmError::Config("steps and batch_size must be positive".into()));
        }
        if self.net.seen_classes != self.data.seen.len() {
            return Err(XmError::Config(format!(
                "classifier head covers {} classes but the split has {} seen classes",
                self.net.seen_classes,
                self.data.seen.len()
            )));
        }
        if self.net.image_size != self.data.image_size {
            return Err(XmError::Config("network and dataset image sizes differ".into()));
        }
        Ok(())
    }
}

// ── Trainer ─────────────────────────────────────────────────────────

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: FewShotGan,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub phi: PerceptualExtractor,
    pub step: u64,
}

struct EpisodeOutcome {
    grads: Vec<(String, Vec<f64>)>,
    bn_updates: Vec<(String, Vec<f64>)>,
    d_adv: f64,
    d_cls: f64,
    g_adv: f64,
    g_perc: f64,
    g_cls: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = FewShotGan::new(&cfg.net, cfg.seed)?;
        Ok(Trainer {
            adam_g: AdamState::new(cfg.lr),
            adam_d: AdamState::new(cfg.lr),
            phi: PerceptualExtractor::new(cfg.phi_seed),
            model,
            cfg,
            step: 0,
        })
    }

    fn seen_label(&self, class_id: usize) -> usize {
        self.cfg
            .data
            .seen
            .iter()
            .position(|&c| c == class_id)
            .unwrap_or_else(|| panic!("class {class_id} is not a seen class"))
    }

    /// Batch of (episode, seen label) for a step, sampled from the seen
    /// classes only.
    fn episode_batch(&self, ds: &Dataset, step: u64) -> Vec<(Episode, usize)> {
        (0..self.cfg.batch_size)
            .map(|e| {
                let mut r = rng::stream(self.cfg.seed, rng::domain::TRAIN_EPISODE, &[step, e as u64]);
                let mut ep = data::sample_episode(ds, &self.cfg.data.seen, self.cfg.k, self.cfg.net.noise_dim, &mut r);
                assert!(
                    self.cfg.data.seen.contains(&ep.class_id),
                    "audit: episode from class {} leaked into training",
                    ep.class_id
                );
                if !self.cfg.ablation.random_alphas() {
                    let u = 1.0 / (self.cfg.k - 1) as f64;
                    ep.alphas = vec![u; self.cfg.k - 1];
                }
                let label = self.seen_label(ep.class_id);
                (ep, label)
            })
            .collect()
    }

    /// Sum per-episode gradients in episode order and divide by the batch.
    fn reduce_grads(outcomes: &[EpisodeOutcome], batch: usize) -> HashMap<String, Vec<f64>> {
        let mut acc: HashMap<String, Vec<f64>> = HashMap::new();
        for o in outcomes {
            for (name, g) in &o.grads {
                match acc.get_mut(name) {
                    Some(buf) => {
                        for (a, b) in buf.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => {
                        acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        let scale = 1.0 / batch as f64;
        for buf in acc.values_mut() {
            for v in buf.iter_mut() {
                *v *= scale;
            }
        }
        acc
    }

    fn apply_updates(
        adam: &mut AdamState,
        net: &mut dyn Module,
        grads: &HashMap<String, Vec<f64>>,
    ) -> Result<()> {
        adam.begin_step();
        let mut failure = None;
        net.visit_mut(&mut |p, kind| {
            if kind != ParamKind::Learnable || failure.is_some() {
                return;
            }
            if let Some(g) = grads.get(&p.name) {
                if let Err(e) = adam.update(&p.name, &mut p.value.data, g) {
                    failure = Some(e);
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub(crate) fn d_update(&mut self, batch: &[(Episode, usize)]) -> Result<(f64, f64)> {
        let mode = self.cfg.ablation.modulation();
        let weights = self.cfg.weights;
        let model = &self.model;
        let outcomes: Vec<EpisodeOutcome> = batch
            .par_iter()
            .map(|(ep, label)| {
                let mut tape = Tape::new();
                let mut ctx = Ctx::train(&mut tape);
                let (loss, scalars) = build_d_loss(&mut ctx, model, ep, *label, &weights, mode);
                ctx.tape.backward(loss);
                EpisodeOutcome {
                    grads: ctx.take_grads(),
                    bn_updates: std::mem::take(&mut ctx.bn_updates),
                    d_adv: scalars.adv,
                    d_cls: scalars.cls,
                    g_adv: 0.0,
                    g_perc: 0.0,
                    g_cls: 0.0,
                }
            })
            .collect();
        let grads = Self::reduce_grads(&outcomes, batch.len());
        Self::apply_updates(&mut self.adam_d, &mut self.model.disc, &grads)
            .map_err(|e| name_step(e, self.step))?;
        for o in &outcomes {
            apply_bn_updates(&mut self.model, &o.bn_updates);
        }
        let n = batch.len() as f64;
        Ok((
            outcomes.iter().map(|o| o.d_adv).sum::<f64>() / n,
            outcomes.iter().map(|o| o.d_cls).sum::<f64>() / n,
        ))
    }

    pub(crate) fn g_update(&mut self, batch: &[(Episode, usize)]) -> Result<(f64, f64, f64)> {
        let mode = self.cfg.ablation.modulation();
        let perc = self.cfg.ablation.perceptual();
        let weights = self.cfg.weights;
        let model = &self.model;
        let phi = &self.phi;
        let outcomes: std::result::Result<Vec<EpisodeOutcome>, XmError> = batch
            .par_iter()
            .map(|(ep, label)| {
                let mut tape = Tape::new();
                let mut ctx = Ctx::train(&mut tape);
                let (loss, scalars) =
                    build_g_loss(&mut ctx, model, ep, *label, &weights, phi, mode, perc)?;
                ctx.tape.backward(loss);
                Ok(EpisodeOutcome {
                    grads: ctx.take_grads(),
                    bn_updates: std::mem::take(&mut ctx.bn_updates),
                    d_adv: 0.0,
                    d_cls: 0.0,
                    g_adv: scalars.adv,
                    g_perc: scalars.perc,
                    g_cls: scalars.cls,
                })
            })
            .collect();
        let outcomes = outcomes.map_err(|e| name_step(e, self.step))?;
        let grads = Self::reduce_grads(&outcomes, batch.len());
        Self::apply_updates(&mut self.adam_g, &mut self.model.gen, &grads)
            .map_err(|e| name_step(e, self.step))?;
        for o in &outcomes {
            apply_bn_updates(&mut self.model, &o.bn_updates);
        }
        let n = batch.len() as f64;
        Ok((
            outcomes.iter().map(|o| o.g_adv).sum::<f64>() / n,
            outcomes.iter().map(|o| o.g_perc).sum::<f64>() / n,
            outcomes.iter().map(|o| o.g_cls).sum::<f64>() / n,
        ))
    }

    /// One discriminator update followed by one generator update over a
    /// fresh batch of seen-class episodes.
    pub fn train_step(&mut self, ds: &Dataset) -> Result<LossReport> {
        let batch = self.episode_batch(ds, self.step);
        let (l_adv_d, _d_cls) = self.d_update(&batch)?;
        let (l_adv_g, l_p, l_cl) = self.g_update(&batch)?;
        let total = l_adv_g + self.cfg.weights.eta_p * l_p + self.cfg.weights.eta_cl * l_cl;
        for (v, term) in [
            (l_adv_d, "discriminator adversarial"),
            (l_adv_g, "generator adversarial"),
            (l_p, "perceptual"),
            (l_cl, "classification"),
        ] {
            if !v.is_finite() {
                return Err(XmError::NonFinite { term: term.into(), step: self.step });
            }
        }
        let report = LossReport { step: self.step, l_adv_d, l_adv_g, l_p, l_cl, total };
        self.step += 1;
        Ok(report)
    }

    /// Evaluation-time generation for the unseen classes: `count` images of
    /// `class_id` under eval-mode normalization, seeded by `(domain, tag)`.
    pub fn generate_batch(
        &self,
        ds: &Dataset,
        class_id: usize,
        count: usize,
        domain: u64,
        tag: u64,
        alphas_override: Option<&[f64]>,
    ) -> Vec<Tensor> {
        generate_batch(
            &self.model.gen,
            ds,
            class_id,
            count,
            self.cfg.k,
            self.cfg.net.noise_dim,
            self.cfg.seed,
            domain,
            tag,
            self.cfg.ablation.modulation(),
            alphas_override,
        )
    }

    /// fid_lite over all unseen images vs all generated, and mean per-class
    /// lpips_lite of the generated sets.
    #[allow(clippy::type_complexity)]
    pub fn eval(&self, ds: &Dataset, tag: u64) -> Result<(f64, f64, Vec<(usize, Vec<Tensor>)>)> {
        let mut fakes_by_class = Vec::new();
        for &class_id in &self.cfg.data.unseen {
            let fakes = self.generate_batch(
                ds,
                class_id,
                self.cfg.eval_per_class,
                rng::domain::EVAL,
                tag,
                None,
            );
            fakes_by_class.push((class_id, fakes));
        }
        let reals: Vec<Tensor> = self
            .cfg
            .data
            .unseen
            .iter()
            .flat_map(|&c| ds.images[c].iter().cloned())
            .collect();
        let all_fakes: Vec<Tensor> = fakes_by_class
            .iter()
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        let fid = metrics::fid_lite(&reals, &all_fakes, &self.phi)?;
        let mut lpips_sum = 0.0;
        for (_, fakes) in &fakes_by_class {
            lpips_sum += metrics::lpips_lite(fakes, &self.phi)?;
        }
        let lpips = lpips_sum / fakes_by_class.len() as f64;
        Ok((fid, lpips, fakes_by_class))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = checkpoint::entries_of(&self.model);
        for (prefix, adam) in [("opt_g", &self.adam_g), ("opt_d", &self.adam_d)] {
            entries.push((format!("{prefix}.t"), Tensor::scalar(adam.t as f64)));
            for (name, m, v) in adam.export_moments() {
                let n = m.len();
                entries.push((format!("{prefix}.m.{name}"), Tensor::from_vec(vec![n], m)));
                entries.push((format!("{prefix}.v.{name}"), Tensor::from_vec(vec![n], v)));
            }
        }
        Checkpoint { fingerprint: self.cfg.fingerprint(), step: self.step, entries }
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.fingerprint != self.cfg.fingerprint() {
            return Err(XmError::Checkpoint(format!(
                "config fingerprint mismatch: checkpoint {:016x} vs config {:016x}",
                ckpt.fingerprint,
                self.cfg.fingerprint()
            )));
        }
        checkpoint::restore_into(&mut self.model, ckpt)?;
        for (prefix, adam) in [("opt_g", &mut self.adam_g), ("opt_d", &mut self.adam_d)] {
            if let Some(t) = ckpt.get(&format!("{prefix}.t")) {
                adam.t = t.data[0] as u64;
            }
            let mut moments = Vec::new();
            for (name, tensor) in &ckpt.entries {
                if let Some(param) = name.strip_prefix(&format!("{prefix}.m.")) {
                    let v = ckpt
                        .get(&format!("{prefix}.v.{param}"))
                        .ok_or_else(|| XmError::Checkpoint(format!("missing second moment for {param}")))?;
                    moments.push((param.to_string(), tensor.data.clone(), v.data.clone()));
                }
            }
            adam.import_moments(moments);
        }
        self.step = ckpt.step;
        Ok(())
    }
}

fn name_step(e: XmError, step: u64) -> XmError {
    match e {
        XmError::NonFinite { term, .. } => XmError::NonFinite { term, step },
        other => other,
    }
}

/// Eval-mode generation without a trainer: per image, draw K class samples,
/// simplex blend weights (unless overridden), and per-reference noise from
/// `(seed, domain, tag, class, index)` streams.
#[allow(clippy::too_many_arguments)]
pub fn generate_batch(
    gen: &Generator,
    ds: &Dataset,
    class_id: usize,
    count: usize,
    k: usize,
    noise_dim: usize,
    seed: u64,
    domain: u64,
    tag: u64,
    mode: ModulationMode,
    alphas_override: Option<&[f64]>,
) -> Vec<Tensor> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, domain, &[tag, class_id as u64, i as u64]);
            let mut ep = data::sample_episode(ds, &[class_id], k, noise_dim, &mut r);
            if let Some(a) = alphas_override {
                assert_eq!(a.len(), k - 1, "alpha override needs {} entries", k - 1);
                ep.alphas = a.to_vec();
            }
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Eval);
            let out = gen.generate(&mut ctx, &ep, mode);
            let mut img = tape.detach_value(out);
            img.shape = vec![3, gen.cfg.image_size, gen.cfg.image_size];
            img
        })
        .collect()
}

// ── Run directory loop ──────────────────────────────────────────────

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub ckpt_path: PathBuf,
    pub first_fid: f64,
    pub final_fid: f64,
    pub final_lpips: f64,
}

fn append_metrics(path: &Path, row: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| XmError::io(path.display().to_string(), e))?;
    f.write_all(row.as_bytes())
        .map_err(|e| XmError::io(path.display().to_string(), e))
}

/// Full training run in `run_dir`: dataset from config, periodic unseen-set
/// evaluation without fine-tuning, sample sheets, checkpoints, metrics CSV.
/// Resumes from `ckpt_latest.bin` when present (refusing on a config
/// fingerprint mismatch); pass `resume = false` to require a fresh
/// directory state.
pub fn train_loop(cfg: &TrainConfig, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir.join("samples"))
        .map_err(|e| XmError::io(run_dir.display().to_string(), e))?;
    let config_path = run_dir.join("config.txt");
    fs::write(&config_path, cfg.canonical_string())
        .map_err(|e| XmError::io(config_path.display().to_string(), e))?;

    let ds = data::make_dataset(&cfg.data);
    let mut trainer = Trainer::new(cfg.clone())?;
    let metrics_path = run_dir.join("metrics.csv");
    let latest = run_dir.join("ckpt_latest.bin");

    if resume && latest.exists() {
        let ckpt = checkpoint::load(&latest)?;
        trainer.restore(&ckpt)?;
    } else {
        if metrics_path.exists() {
            fs::remove_file(&metrics_path).map_err(|e| XmError::io(metrics_path.display().to_string(), e))?;
        }
        append_metrics(&metrics_path, "step,fid_lite,lpips_lite,l_adv_d,l_adv_g,l_p,l_cl\n")?;
    }

    let mut last_report = LossReport { step: trainer.step, l_adv_d: 0.0, l_adv_g: 0.0, l_p: 0.0, l_cl: 0.0, total: 0.0 };
    let mut first_fid = None;
    let mut final_fid = 0.0;
    let mut final_lpips = 0.0;

    let run_eval = |trainer: &Trainer, report: &LossReport| -> Result<(f64, f64)> {
        let (fid, lpips, fakes_by_class) = trainer.eval(&ds, trainer.step)?;
        append_metrics(
            &metrics_path,
            &format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                trainer.step, fid, lpips, report.l_adv_d, report.l_adv_g, report.l_p, report.l_cl
            ),
        )?;
        for (class_id, fakes) in &fakes_by_class {
            let sheet = ppm::grid(&fakes[..fakes.len().min(9)], 3);
            ppm::save(
                &run_dir.join("samples").join(format!("step{:05}_class{}.ppm", trainer.step, class_id)),
                &sheet,
            )?;
        }
        Ok((fid, lpips))
    };

    if trainer.step == 0 {
        let (fid, lpips) = run_eval(&trainer, &last_report)?;
        first_fid = Some(fid);
        final_fid = fid;
        final_lpips = lpips;
    }

    while trainer.step < cfg.steps {
        last_report = trainer.train_step(&ds)?;
        let done = trainer.step >= cfg.steps;
        if trainer.step % cfg.eval_every == 0 || done {
            let (fid, lpips) = run_eval(&trainer, &last_report)?;
            final_fid = fid;
            final_lpips = lpips;
            if first_fid.is_none() {
                first_fid = Some(fid);
            }
        }
        if trainer.step % cfg.ckpt_every == 0 || done {
            checkpoint::save(&latest, &trainer.to_checkpoint())?;
            checkpoint::save(
                &run_dir.join(format!("ckpt_{:06}.bin", trainer.step)),
                &trainer.to_checkpoint(),
            )?;
        }
    }

    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        metrics_path,
        ckpt_path: latest,
        first_fid: first_fid.unwrap_or(final_fid),
        final_fid,
        final_lpips,
    })
}
