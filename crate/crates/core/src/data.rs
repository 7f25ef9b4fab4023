//! Procedural 8-class texture dataset and episodic few-shot sampling.
//!
//! Four texture families, two classes each: oriented sinusoid gratings,
//! Voronoi cell mosaics, blob fields, and smoothed speckle. Every image
//! draws its parameters (frequency, orientation, cell count, palette
//! jitter, ...) from a class-specific distribution, so classes have real
//! intra-class variation while staying visually separable.
//!
//! Layout on disk: `data/<class_id>/<index>.ppm` plus `manifest.csv` with
//! columns `class_id,index,split,seed`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XmError};
use crate::ppm;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(image_size: usize, seed: u64) -> Self {
        DatasetSpec {
            class_count: 8,
            per_class: 40,
            // each unseen family has a seen cousin, so transfer is plausible
            seen: vec![0, 2, 3, 5, 7],
            unseen: vec![1, 4, 6],
            image_size,
            seed,
        }
    }

    fn validate(&self) {
        assert_eq!(
            self.seen.len() + self.unseen.len(),
            self.class_count,
            "split does not cover {} classes",
            self.class_count
        );
        for c in &self.seen {
            assert!(!self.unseen.contains(c), "class {c} is in both splits");
        }
    }
}

pub struct Dataset {
    pub spec: DatasetSpec,
    /// `images[class][index]`, each `[3,S,S]` in [-1,1].
    pub images: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn split_name(&self, class_id: usize) -> &'static str {
        if self.spec.seen.contains(&class_id) {
            "seen"
        } else {
            "unseen"
        }
    }
}

/// One few-shot task: a base exemplar, K-1 references from the same class,
/// blend weights on the simplex, and one noise vector per reference.
#[derive(Clone, Debug)]
pub struct Episode {
    pub class_id: usize,
    pub base_index: usize,
    pub ref_indices: Vec<usize>,
    pub base: Tensor,
    pub refs: Vec<Tensor>,
    pub alphas: Vec<f64>,
    pub zs: Vec<Tensor>,
}

// ── Texture rendering ───────────────────────────────────────────────

type Rgb = [f64; 3];

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn put(img: &mut Tensor, s: usize, x: usize, y: usize, c: Rgb) {
    for ch in 0..3 {
        img.data[(ch * s + y) * s + x] = c[ch].clamp(-1.0, 1.0);
    }
}

fn grating(s: usize, rng: &mut ChaCha8Rng, angle_mean: f64, freq_lo: f64, freq_hi: f64, pal: (Rgb, Rgb)) -> Tensor {
    let theta = angle_mean + 0.15 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let freq = rng.random_range(freq_lo..freq_hi);
    let phase = rng.random_range(0.0..2.0 * PI);
    let jitter = rng.random_range(0.85..1.15);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img = Tensor::zeros(vec![3, s, s]);
    for y in 0..s {
        for x in 0..s {
            let u = (x as f64 * ct + y as f64 * st) / s as f64;
            let t = 0.5 * (1.0 + (2.0 * PI * freq * u + phase).sin());
            let c = lerp(pal.0, pal.1, t);
            put(&mut img, s, x, y, [c[0] * jitter, c[1] * jitter, c[2] * jitter]);
        }
    }
    img
}

fn voronoi(s: usize, rng: &mut ChaCha8Rng, lo: usize, hi: usize, palette: &[Rgb]) -> Tensor {
    let count = rng.random_range(lo..=hi);
    let mut cells = Vec::with_capacity(count);
    for _ in 0..count {
        let px = rng.random_range(0.0..s as f64);
        let py = rng.random_range(0.0..s as f64);
        let color = palette[rng.random_range(0..palette.len())];
        let shade = rng.random_range(0.8..1.2);
        cells.push((px, py, color, shade));
    }
    let mut img = Tensor::zeros(vec![3, s, s]);
    for y in 0..s {
        for x in 0..s {
            let mut best = f64::INFINITY;
            let mut c: Rgb = [0.0; 3];
            for (px, py, color, shade) in &cells {
                let d = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                if d < best {
                    best = d;
                    c = [color[0] * shade, color[1] * shade, color[2] * shade];
                }
            }
            put(&mut img, s, x, y, c);
        }
    }
    img
}

fn blobs(
    s: usize,
    rng: &mut ChaCha8Rng,
    lo: usize,
    hi: usize,
    radius: (f64, f64),
    bg: Rgb,
    fg: Rgb,
) -> Tensor {
    let count = rng.random_range(lo..=hi);
    let mut centers = Vec::with_capacity(count);
    for _ in 0..count {
        let px = rng.random_range(0.0..s as f64);
        let py = rng.random_range(0.0..s as f64);
        let r = rng.random_range(radius.0..radius.1) * s as f64;
        centers.push((px, py, r));
    }
    let mut img = Tensor::zeros(vec![3, s, s]);
    for y in 0..s {
        for x in 0..s {
            let mut intensity: f64 = 0.0;
            for (px, py, r) in &centers {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                intensity += (-d2 / (r * r)).exp();
            }
            let t = intensity.min(1.0);
            put(&mut img, s, x, y, lerp(bg, fg, t));
        }
    }
    img
}

fn speckle(s: usize, rng: &mut ChaCha8Rng, pal: (Rgb, Rgb)) -> Tensor {
    let blur = rng.random_range(1..=2usize);
    let mut noise = vec![0.0; s * s];
    for v in &mut noise {
        *v = rng.random_range(0.0..1.0);
    }
    let mut img = Tensor::zeros(vec![3, s, s]);
    for y in 0..s {
        for x in 0..s {
            // box blur with clamped borders
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -(blur as isize)..=(blur as isize) {
                for dx in -(blur as isize)..=(blur as isize) {
                    let yy = (y as isize + dy).clamp(0, s as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, s as isize - 1) as usize;
                    acc += noise[yy * s + xx];
                    cnt += 1.0;
                }
            }
            put(&mut img, s, x, y, lerp(pal.0, pal.1, acc / cnt));
        }
    }
    img
}

fn render_class_image(class_id: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor {
    match class_id {
        0 => grating(s, rng, 0.0, 2.0, 4.0, ([0.9, 0.1, -0.3], [-0.4, -0.8, -0.9])),
        1 => grating(s, rng, PI / 2.0, 4.0, 7.0, ([-0.2, 0.4, 0.9], [-0.9, -0.6, 0.1])),
        2 => grating(s, rng, PI / 4.0, 6.0, 10.0, ([0.1, 0.8, 0.0], [0.7, 0.6, -0.7])),
        3 => voronoi(
            s,
            rng,
            8,
            14,
            &[[0.7, -0.2, 0.8], [0.3, -0.6, 0.4], [-0.3, -0.9, 0.0], [0.9, 0.4, 0.9]],
        ),
        4 => voronoi(
            s,
            rng,
            20,
            30,
            &[[-0.6, 0.5, 0.5], [-0.2, 0.8, 0.7], [-0.8, 0.1, 0.2], [0.0, 0.9, 0.9]],
        ),
        5 => blobs(s, rng, 5, 9, (0.09, 0.18), [-0.8, -0.7, -0.6], [0.9, 0.5, -0.1]),
        6 => blobs(s, rng, 12, 20, (0.05, 0.10), [0.6, 0.7, 0.8], [-0.7, -0.3, 0.9]),
        7 => speckle(s, rng, ([-0.5, -0.3, -0.5], [0.4, 0.6, 0.3])),
        _ => panic!("unknown texture class {class_id}"),
    }
}

pub fn make_dataset(spec: &DatasetSpec) -> Dataset {
    spec.validate();
    let images = (0..spec.class_count)
        .map(|class_id| {
            (0..spec.per_class)
                .map(|index| {
                    let mut r =
                        rng::stream(spec.seed, rng::domain::DATASET, &[class_id as u64, index as u64]);
                    render_class_image(class_id, spec.image_size, &mut r)
                })
                .collect()
        })
        .collect();
    Dataset { spec: spec.clone(), images }
}

/// Draw one episode: a class from `class_pool`, `k` distinct images (first
/// is the base), blend weights from the flat simplex, and per-reference
/// standard-normal noise.
pub fn sample_episode(
    ds: &Dataset,
    class_pool: &[usize],
    k: usize,
    noise_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Episode {
    assert!(k >= 2, "an episode needs at least one reference (k >= 2), got k = {k}");
    assert!(!class_pool.is_empty(), "empty class pool");
    let class_id = class_pool[rng.random_range(0..class_pool.len())];
    let available = ds.images[class_id].len();
    assert!(
        available >= k,
        "class {class_id} has {available} images, episode needs {k}"
    );
    let picks = rng::sample_distinct(rng, available, k);
    let alphas = rng::flat_simplex(rng, k - 1);
    let zs = (0..k - 1)
        .map(|_| Tensor::from_vec(vec![noise_dim], rng::normal_vec(rng, noise_dim)))
        .collect();
    Episode {
        class_id,
        base_index: picks[0],
        ref_indices: picks[1..].to_vec(),
        base: ds.images[class_id][picks[0]].clone(),
        refs: picks[1..].iter().map(|&i| ds.images[class_id][i].clone()).collect(),
        alphas,
        zs,
    }
}

// ── Disk layout ─────────────────────────────────────────────────────

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut manifest = String::from("class_id,index,split,seed\n");
    for (class_id, class_images) in ds.images.iter().enumerate() {
        let class_dir = dir.join(class_id.to_string());
        fs::create_dir_all(&class_dir).map_err(|e| XmError::io(class_dir.display().to_string(), e))?;
        for (index, img) in class_images.iter().enumerate() {
            ppm::save(&class_dir.join(format!("{index}.ppm")), img)?;
            manifest.push_str(&format!(
                "{class_id},{index},{},{}\n",
                ds.split_name(class_id),
                ds.spec.seed
            ));
        }
    }
    let mpath = dir.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| XmError::io(mpath.display().to_string(), e))
}

pub fn load_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let mut images = Vec::with_capacity(spec.class_count);
    for class_id in 0..spec.class_count {
        let mut class_images = Vec::with_capacity(spec.per_class);
        for index in 0..spec.per_class {
            let path = dir.join(class_id.to_string()).join(format!("{index}.ppm"));
            class_images.push(ppm::load(&path)?);
        }
        images.push(class_images);
    }
    Ok(Dataset { spec: spec.clone(), images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        let mut s = DatasetSpec::new(16, 7);
        s.per_class = 6;
        s
    }

    #[test]
    fn dataset_counts_and_split() {
        let spec = DatasetSpec::new(16, 1);
        assert_eq!(spec.class_count, 8);
        assert_eq!(spec.per_class, 40);
        assert_eq!(spec.seen.len(), 5);
        assert_eq!(spec.unseen.len(), 3);
        let ds = make_dataset(&tiny_spec());
        assert_eq!(ds.images.len(), 8);
        assert!(ds.images.iter().all(|c| c.len() == 6));
    }

    #[test]
    fn dataset_is_bit_stable_for_a_seed() {
        let a = make_dataset(&tiny_spec());
        let b = make_dataset(&tiny_spec());
        for (ca, cb) in a.images.iter().zip(&b.images) {
            for (ia, ib) in ca.iter().zip(cb) {
                assert_eq!(ia.data, ib.data);
            }
        }
    }

    #[test]
    fn dataset_values_stay_in_range() {
        let ds = make_dataset(&tiny_spec());
        for class in &ds.images {
            for img in class {
                assert!(img.data.iter().all(|v| (-1.0..=1.0).contains(v) && v.is_finite()));
            }
        }
    }

    #[test]
    fn episode_contract() {
        let ds = make_dataset(&tiny_spec());
        let mut r = rng::stream(3, rng::domain::TRAIN_EPISODE, &[0]);
        let ep = sample_episode(&ds, &ds.spec.seen, 3, 4, &mut r);
        assert_eq!(ep.refs.len(), 2);
        assert_eq!(ep.alphas.len(), 2);
        assert_eq!(ep.zs.len(), 2);
        assert!((ep.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ep.alphas.iter().all(|&a| a >= 0.0));
        assert!(ds.spec.seen.contains(&ep.class_id));
        // base and references are distinct images of one class
        let mut ids = vec![ep.base_index];
        ids.extend(&ep.ref_indices);
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn episode_replays_identically() {
        let ds = make_dataset(&tiny_spec());
        let mut r1 = rng::stream(9, rng::domain::TRAIN_EPISODE, &[5]);
        let mut r2 = rng::stream(9, rng::domain::TRAIN_EPISODE, &[5]);
        let e1 = sample_episode(&ds, &ds.spec.seen, 3, 4, &mut r1);
        let e2 = sample_episode(&ds, &ds.spec.seen, 3, 4, &mut r2);
        assert_eq!(e1.class_id, e2.class_id);
        assert_eq!(e1.base_index, e2.base_index);
        assert_eq!(e1.alphas, e2.alphas);
        assert_eq!(e1.zs[0].data, e2.zs[0].data);
    }

    #[test]
    #[should_panic(expected = "episode needs")]
    fn episode_rejects_small_class() {
        let mut spec = tiny_spec();
        spec.per_class = 2;
        let ds = make_dataset(&spec);
        let mut r = rng::stream(0, rng::domain::TRAIN_EPISODE, &[0]);
        sample_episode(&ds, &ds.spec.seen, 3, 4, &mut r);
    }

    #[test]
    fn save_load_roundtrip_and_manifest() {
        let dir = std::env::temp_dir().join(format!("xmgan_data_test_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let ds = make_dataset(&tiny_spec());
        save_dataset(&ds, &dir).unwrap();
        let manifest = fs::read_to_string(dir.join("manifest.csv")).unwrap();
        assert!(manifest.starts_with("class_id,index,split,seed\n"));
        assert_eq!(manifest.lines().count(), 1 + 8 * 6);
        assert!(manifest.contains("1,0,unseen,7"));
        assert!(manifest.contains("0,0,seen,7"));
        let loaded = load_dataset(&dir, &ds.spec).unwrap();
        for (ca, cb) in ds.images.iter().zip(&loaded.images) {
            for (ia, ib) in ca.iter().zip(cb) {
                let worst = ia
                    .data
                    .iter()
                    .zip(&ib.data)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(worst <= 2.0 / 255.0);
            }
        }
        let _ = fs::remove_dir_all(&dir);
    }
}
