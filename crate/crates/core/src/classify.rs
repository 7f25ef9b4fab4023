//! Low-data classification on the unseen classes, with and without
//! generated-image augmentation.
//!
//! Protocol: each unseen class is split 10/15/15 into train/val/test. A
//! small conv classifier trains on the train images; the augmented arm adds
//! 30 generated images per class, each produced from K samples of that
//! class's train split with random simplex blend weights. Model selection
//! is on the validation split; the test accuracy of the selected epoch is
//! reported per seed.

use rayon::prelude::*;

use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Result, XmError};
use crate::fusion::ModulationMode;
use crate::model::Generator;
use crate::nn::{
    apply_bn_updates, Act, AdamState, ConvBlock, Ctx, Linear, Mode, Module, Param, ParamKind,
    LEAKY_SLOPE,
};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::generate_batch;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 10, val: 15, test: 15 }
    }
}

#[derive(Clone, Debug)]
pub struct HarnessConfig {
    pub split: SplitSpec,
    pub augment_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub noise_dim: usize,
    pub modulation: ModulationMode,
    pub seeds: Vec<u64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            split: SplitSpec::default(),
            augment_per_class: 30,
            epochs: 100,
            lr: 1e-3,
            batch_size: 16,
            k: 3,
            noise_dim: 16,
            modulation: ModulationMode::Full,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// 3 conv blocks and a linear head over the unseen classes.
pub struct SmallClassifier {
    image_size: usize,
    classes: usize,
    blocks: Vec<ConvBlock>,
    head: Linear,
}

impl SmallClassifier {
    pub fn new(image_size: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let channels = [16usize, 32, 48];
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in channels.iter().enumerate() {
            blocks.push(ConvBlock::new(
                &format!("cls.block{i}"),
                in_ch,
                out_ch,
                4,
                2,
                1,
                true,
                Act::Leaky(LEAKY_SLOPE),
                rng,
            ));
            in_ch = out_ch;
        }
        let spatial = image_size >> channels.len();
        assert!(spatial >= 1, "image size {image_size} too small for 3 stride-2 blocks");
        let flat = channels[2] * spatial * spatial;
        SmallClassifier {
            image_size,
            classes,
            blocks,
            head: Linear::new("cls.head", flat, classes, rng),
        }
    }

    fn logits(&self, ctx: &mut Ctx, batch: &[&Tensor]) -> crate::tape::TensorId {
        let b = batch.len();
        let s = self.image_size;
        let mut data = Vec::with_capacity(b * 3 * s * s);
        for img in batch {
            data.extend_from_slice(&img.data);
        }
        let x = ctx.tape.leaf(Tensor::from_vec(vec![b, 3, s, s], data));
        let mut cur = x;
        for block in &self.blocks {
            cur = block.forward(ctx, cur);
        }
        let spatial = s >> self.blocks.len();
        let flat = ctx.tape.reshape(cur, vec![b, 48 * spatial * spatial]);
        self.head.forward(ctx, flat)
    }

    pub fn predict(&self, images: &[&Tensor]) -> Vec<usize> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let logits = self.logits(&mut ctx, images);
        let lv = tape.data(logits);
        (0..images.len())
            .map(|i| {
                let row = &lv[i * self.classes..(i + 1) * self.classes];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            })
            .collect()
    }

    pub fn accuracy(&self, images: &[&Tensor], labels: &[usize]) -> f64 {
        let preds = self.predict(images);
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }
}

impl Module for SmallClassifier {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        for b in &self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Per-class index split drawn without replacement.
pub struct UnseenSplit {
    /// `(class position, image index)` pools per split.
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

pub fn split_unseen(ds: &Dataset, spec: &SplitSpec, seed: u64) -> UnseenSplit {
    let need = spec.train + spec.val + spec.test;
    let mut out = UnseenSplit { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (pos, &class_id) in ds.spec.unseen.iter().enumerate() {
        let available = ds.images[class_id].len();
        assert!(
            need <= available,
            "split {need} exceeds the {available} images of class {class_id}"
        );
        let mut r = rng::stream(seed, rng::domain::CLASSIFY, &[class_id as u64]);
        let picks = rng::sample_distinct(&mut r, available, need);
        for (i, &img) in picks.iter().enumerate() {
            if i < spec.train {
                out.train.push((pos, img));
            } else if i < spec.train + spec.val {
                out.val.push((pos, img));
            } else {
                out.test.push((pos, img));
            }
        }
    }
    out
}

/// Train one classifier and report the test accuracy of the epoch with the
/// best validation accuracy.
#[allow(clippy::too_many_arguments)]
fn run_arm(
    ds: &Dataset,
    split: &UnseenSplit,
    generated: Option<&Vec<Vec<Tensor>>>,
    cfg: &HarnessConfig,
    seed: u64,
) -> f64 {
    let classes = ds.spec.unseen.len();
    let mut train_set: Vec<(Tensor, usize)> = split
        .train
        .iter()
        .map(|&(pos, img)| (ds.images[ds.spec.unseen[pos]][img].clone(), pos))
        .collect();
    if let Some(gen_images) = generated {
        for (pos, images) in gen_images.iter().enumerate() {
            for img in images {
                train_set.push((img.clone(), pos));
            }
        }
    }
    let val: Vec<(Tensor, usize)> = split
        .val
        .iter()
        .map(|&(pos, img)| (ds.images[ds.spec.unseen[pos]][img].clone(), pos))
        .collect();
    let test: Vec<(Tensor, usize)> = split
        .test
        .iter()
        .map(|&(pos, img)| (ds.images[ds.spec.unseen[pos]][img].clone(), pos))
        .collect();

    let mut init_rng = rng::stream(seed, rng::domain::CLASSIFY, &[1000]);
    let mut model = SmallClassifier::new(ds.spec.image_size, classes, &mut init_rng);
    let mut adam = AdamState::new(cfg.lr);

    let mut best_val = -1.0;
    let mut best_test = 0.0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = rng::stream(seed, rng::domain::CLASSIFY, &[2000, epoch as u64]);
        for i in (1..order.len()).rev() {
            use rand::RngExt;
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &train_set[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].1).collect();
            let mut tape = Tape::new();
            let mut ctx = Ctx::train(&mut tape);
            let logits = model.logits(&mut ctx, &images);
            let loss = ctx.tape.cross_entropy(logits, &labels);
            ctx.tape.backward(loss);
            let grads = ctx.take_grads();
            let updates = std::mem::take(&mut ctx.bn_updates);
            drop(ctx);
            adam.begin_step();
            let map: std::collections::HashMap<String, Vec<f64>> = grads.into_iter().collect();
            let mut failed = None;
            model.visit_mut(&mut |p, kind| {
                if kind == ParamKind::Learnable && failed.is_none() {
                    if let Some(g) = map.get(&p.name) {
                        if let Err(e) = adam.update(&p.name, &mut p.value.data, g) {
                            failed = Some(e);
                        }
                    }
                }
            });
            assert!(failed.is_none(), "classifier update failed: {failed:?}");
            apply_bn_updates(&mut model, &updates);
        }
        // select on validation every few epochs to keep eval cost modest
        if epoch % 5 == 4 || epoch + 1 == cfg.epochs {
            let val_refs: Vec<&Tensor> = val.iter().map(|(t, _)| t).collect();
            let val_labels: Vec<usize> = val.iter().map(|(_, l)| *l).collect();
            let acc = model.accuracy(&val_refs, &val_labels);
            if acc > best_val {
                best_val = acc;
                let test_refs: Vec<&Tensor> = test.iter().map(|(t, _)| t).collect();
                let test_labels: Vec<usize> = test.iter().map(|(_, l)| *l).collect();
                best_test = model.accuracy(&test_refs, &test_labels);
            }
        }
    }
    best_test
}

/// Generate `augment_per_class` images per unseen class using only that
/// class's train-split images as the few-shot pool.
pub fn generate_augmentation(
    gen: &Generator,
    ds: &Dataset,
    split: &UnseenSplit,
    cfg: &HarnessConfig,
    seed: u64,
) -> Vec<Vec<Tensor>> {
    ds.spec
        .unseen
        .iter()
        .enumerate()
        .map(|(pos, &class_id)| {
            // restrict the sampling pool to this class's train images
            let train_indices: Vec<usize> = split
                .train
                .iter()
                .filter(|&&(p, _)| p == pos)
                .map(|&(_, img)| img)
                .collect();
            let mut pool = Dataset {
                spec: ds.spec.clone(),
                images: vec![Vec::new(); ds.spec.class_count],
            };
            pool.images[class_id] = train_indices
                .iter()
                .map(|&i| ds.images[class_id][i].clone())
                .collect();
            generate_batch(
                gen,
                &pool,
                class_id,
                cfg.augment_per_class,
                cfg.k,
                cfg.noise_dim,
                seed,
                rng::domain::GENERATE,
                class_id as u64,
                cfg.modulation,
                None,
            )
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub seed: u64,
    pub standard: f64,
    pub augmented: f64,
}

#[derive(Clone, Debug)]
pub struct HarnessReport {
    pub per_seed: Vec<ArmResult>,
    pub mean_standard: f64,
    pub mean_augmented: f64,
    pub std_standard: f64,
    pub std_augmented: f64,
}

impl HarnessReport {
    pub fn gain(&self) -> f64 {
        self.mean_augmented - self.mean_standard
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::from("seed  standard  augmented\n");
        for r in &self.per_seed {
            s.push_str(&format!("{:<5} {:<9.4} {:<9.4}\n", r.seed, r.standard, r.augmented));
        }
        s.push_str(&format!(
            "mean  {:<9.4} {:<9.4}  (gain {:+.4}, std {:.4}/{:.4})\n",
            self.mean_standard,
            self.mean_augmented,
            self.gain(),
            self.std_standard,
            self.std_augmented
        ));
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("seed,arm,accuracy\n");
        for r in &self.per_seed {
            s.push_str(&format!("{},standard,{:.6}\n", r.seed, r.standard));
            s.push_str(&format!("{},augmented,{:.6}\n", r.seed, r.augmented));
        }
        s
    }
}

/// Both arms across the configured seeds. Arms and seeds are independent
/// and run in parallel.
pub fn run_low_data_eval(gen: &Generator, ds: &Dataset, cfg: &HarnessConfig) -> Result<HarnessReport> {
    if ds.spec.unseen.is_empty() {
        return Err(XmError::Contract("no unseen classes to evaluate".into()));
    }
    let per_seed: Vec<ArmResult> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = split_unseen(ds, &cfg.split, seed);
            audit_split(&split, &cfg.split, ds);
            let generated = generate_augmentation(gen, ds, &split, cfg, seed);
            for class_images in &generated {
                assert_eq!(class_images.len(), cfg.augment_per_class);
            }
            let standard = run_arm(ds, &split, None, cfg, seed);
            let augmented = run_arm(ds, &split, Some(&generated), cfg, seed);
            ArmResult { seed, standard, augmented }
        })
        .collect();
    let n = per_seed.len() as f64;
    let mean_standard = per_seed.iter().map(|r| r.standard).sum::<f64>() / n;
    let mean_augmented = per_seed.iter().map(|r| r.augmented).sum::<f64>() / n;
    let var = |mean: f64, get: fn(&ArmResult) -> f64| -> f64 {
        (per_seed.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    Ok(HarnessReport {
        std_standard: var(mean_standard, |r| r.standard),
        std_augmented: var(mean_augmented, |r| r.augmented),
        per_seed,
        mean_standard,
        mean_augmented,
    })
}

/// No validation or test image may appear in the train pool.
fn audit_split(split: &UnseenSplit, spec: &SplitSpec, ds: &Dataset) {
    let classes = ds.spec.unseen.len();
    assert_eq!(split.train.len(), spec.train * classes);
    assert_eq!(split.val.len(), spec.val * classes);
    assert_eq!(split.test.len(), spec.test * classes);
    for held in split.val.iter().chain(&split.test) {
        assert!(
            !split.train.contains(held),
            "audit: held-out image {held:?} leaked into training"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, DatasetSpec};

    fn tiny_ds(seed: u64) -> Dataset {
        let mut spec = DatasetSpec::new(8, seed);
        spec.per_class = 8;
        make_dataset(&spec)
    }

    #[test]
    fn split_respects_counts_and_disjointness() {
        let ds = tiny_ds(1);
        let spec = SplitSpec { train: 3, val: 2, test: 3 };
        let split = split_unseen(&ds, &spec, 5);
        audit_split(&split, &spec, &ds);
    }

    #[test]
    #[should_panic(expected = "exceeds")]
    fn split_rejects_overdraw() {
        let ds = tiny_ds(2);
        split_unseen(&ds, &SplitSpec::default(), 0);
    }

    #[test]
    fn untrained_classifier_is_near_chance() {
        let ds = tiny_ds(3);
        let mut r = rng::stream(0, rng::domain::CLASSIFY, &[42]);
        let model = SmallClassifier::new(8, 3, &mut r);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (pos, &c) in ds.spec.unseen.iter().take(3).enumerate() {
            for img in &ds.images[c] {
                images.push(img);
                labels.push(pos);
            }
        }
        let acc = model.accuracy(&images, &labels);
        assert!((acc - 1.0 / 3.0).abs() <= 0.35, "untrained accuracy {acc} is far from chance");
    }

    #[test]
    fn classifier_learns_separable_textures() {
        // a few epochs on 3 distinct texture classes should beat chance
        let ds = tiny_ds(4);
        let spec = SplitSpec { train: 4, val: 2, test: 2 };
        let split = split_unseen(&ds, &spec, 7);
        let cfg = HarnessConfig {
            split: spec,
            epochs: 30,
            batch_size: 6,
            ..HarnessConfig::default()
        };
        let acc = run_arm(&ds, &split, None, &cfg, 7);
        assert!(acc > 0.5, "trained accuracy {acc} should beat chance by a margin");
    }
}
