use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasplit::{load_image, policy1, Label, LabeledDataset, Origin, Sample, SplitOptions, SplitPlan};
use crate::error::{CctError, Result};
use crate::numerics::{Element, Tensor};
use crate::rng::RngStream;

/// `(x − mean) / std` applied after scaling pixels to `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }
}

/// Decoded images keyed by sample id, each `[C,H,W]`, with category index.
#[derive(Debug, Clone)]
pub struct ImageStore<T: Element = f64> {
    channels: usize,
    size: [usize; 2],
    entries: HashMap<String, (Tensor<T>, usize)>,
}

impl<T: Element> ImageStore<T> {
    pub fn new(channels: usize, size: [usize; 2]) -> Self {
        ImageStore { channels, size, entries: HashMap::new() }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> [usize; 2] {
        self.size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: Tensor<T>, label: Label) -> Result<()> {
        let want = [self.channels, self.size[0], self.size[1]];
        if image.shape() != want {
            return Err(CctError::Dimension { op: "image_store", lhs: image.shape().to_vec(), rhs: want.to_vec() });
        }
        self.entries.insert(id.into(), (image, label.index()));
        Ok(())
    }

    /// Decode the listed samples of `data` in parallel. The result does not
    /// depend on completion order.
    pub fn load(data: &LabeledDataset, ids: &[String], size: [usize; 2], channels: usize, norm: Normalization) -> Result<Self> {
        if !(norm.std > 0.0) {
            return Err(CctError::Parameter(format!("normalization std must be positive, got {}", norm.std)));
        }
        let by_id: HashMap<&str, &Sample> = data.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let samples: Vec<&Sample> = ids
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| CctError::Data(format!("plan id {id:?} is not in the manifests"))))
            .collect::<Result<_>>()?;
        let images: Vec<Tensor<T>> = samples
            .par_iter()
            .map(|s| {
                let mut t = load_image::<T>(&s.path, size, channels)?;
                if norm != Normalization::default() {
                    for v in t.data_mut() {
                        *v = T::from_f64((v.as_f64() - norm.mean) / norm.std);
                    }
                }
                Ok(t)
            })
            .collect::<Result<_>>()?;
        let mut store = ImageStore::new(channels, size);
        for (s, img) in samples.into_iter().zip(images) {
            store.insert(s.id.clone(), img, s.label)?;
        }
        Ok(store)
    }

    pub fn get(&self, id: &str) -> Result<(&Tensor<T>, usize)> {
        self.entries.get(id).map(|(t, l)| (t, *l)).ok_or_else(|| CctError::Data(format!("no image loaded for id {id:?}")))
    }

    /// Stack images into `[N,C,H,W]` with their category indices.
    pub fn batch(&self, ids: &[&str]) -> Result<(Tensor<T>, Vec<usize>)> {
        let [h, w] = self.size;
        let mut data = Vec::with_capacity(ids.len() * self.channels * h * w);
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let (t, l) = self.get(id)?;
            data.extend_from_slice(t.data());
            labels.push(l);
        }
        Ok((Tensor::new(vec![ids.len(), self.channels, h, w], data)?, labels))
    }

    pub fn cast<U: Element>(&self) -> ImageStore<U> {
        ImageStore {
            channels: self.channels,
            size: self.size,
            entries: self.entries.iter().map(|(k, (t, l))| (k.clone(), (t.cast(), *l))).collect(),
        }
    }
}

/// Small two-category image task: positives carry vertical stripes,
/// negatives horizontal ones, each with random period, phase, and noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub plan: SplitPlan,
    pub store: ImageStore<f64>,
    /// 8-bit grayscale pixels per id, row-major.
    pub pixels: HashMap<String, Vec<u8>>,
}

fn stripes(rng: &mut RngStream, size: usize, vertical: bool) -> Vec<u8> {
    let period = 4.0 + rng.below(5) as f64;
    let phase = rng.uniform() * period;
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let along = if vertical { x } else { y } as f64;
            let wave = (std::f64::consts::TAU * (along + phase) / period).sin();
            let v = 128.0 + 60.0 * wave + 20.0 * rng.standard_normal();
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    px
}

#[allow(clippy::too_many_arguments)]
fn synthetic_set(
    seed: u64,
    tag: u64,
    prefix: &str,
    n: usize,
    size: usize,
    origin: Origin,
    store: &mut ImageStore<f64>,
    pixels: &mut HashMap<String, Vec<u8>>,
) -> Result<LabeledDataset> {
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
        let id = format!("{prefix}/{i:03}_{label}.png");
        let mut rng = RngStream::new(seed).fork_path(&[tag, i as u64]);
        let px = stripes(&mut rng, size, label == Label::Positive);
        let t = Tensor::new(vec![1, size, size], px.iter().map(|&v| v as f64 / 255.0).collect())?;
        store.insert(id.clone(), t, label)?;
        pixels.insert(id.clone(), px);
        samples.push(Sample { path: PathBuf::from(&id), id, label });
    }
    LabeledDataset::new(origin, samples)
}

/// `n_train` training and `n_test` test images of `size`×`size`, alternating
/// categories, with a policy-1 plan holding out `val_fraction` of training.
pub fn synthetic_task(seed: u64, n_train: usize, n_test: usize, size: usize, val_fraction: f64) -> Result<SyntheticTask> {
    let mut store = ImageStore::new(1, [size, size]);
    let mut pixels = HashMap::new();
    let train = synthetic_set(seed, 1, "train", n_train, size, Origin::OfficialTrain, &mut store, &mut pixels)?;
    let test = synthetic_set(seed, 2, "test", n_test, size, Origin::OfficialTest, &mut store, &mut pixels)?;
    let plan = policy1(&train, &test, &SplitOptions::new(seed).val_fraction(val_fraction))?;
    Ok(SyntheticTask { train, test, plan, store, pixels })
}

/// Write the task as PNG files plus `train.csv` and `test.csv` manifests
/// under `dir`. Returns the two manifest paths.
pub fn write_synthetic_task(task: &SyntheticTask, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let size = task.store.size();
    let mut paths = Vec::new();
    for (set, name) in [(&task.train, "train"), (&task.test, "test")] {
        std::fs::create_dir_all(dir.join(name)).map_err(|e| CctError::io(format!("creating {}", dir.display()), e))?;
        let mut manifest = String::from("path,label\n");
        for s in &set.samples {
            let px = task.pixels[&s.id].clone();
            let img = image::GrayImage::from_raw(size[1] as u32, size[0] as u32, px)
                .ok_or_else(|| CctError::Data(format!("pixel buffer for {} has the wrong length", s.id)))?;
            let out = dir.join(&s.id);
            img.save(&out).map_err(|source| CctError::Decode { path: out.clone(), source })?;
            manifest.push_str(&format!("{},{}\n", s.id, s.label));
        }
        let mpath = dir.join(format!("{name}.csv"));
        std::fs::write(&mpath, manifest).map_err(|e| CctError::io(format!("writing {}", mpath.display()), e))?;
        paths.push(mpath);
    }
    Ok((paths.remove(0), paths.remove(0)))
}
