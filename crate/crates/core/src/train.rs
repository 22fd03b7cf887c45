//! Training machinery: Adam optimizer, batch assembly, the alternating
//! GAN update step, evaluation over image pairs, and checkpoint state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{fingerprint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imaging::{canny, load_image, normalize, Image8, Manifest};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, classical_loss, FeatureExtractor, LossWeights,
};
use crate::metrics::{psnr, ssim, MetricLine, MetricReport};
use crate::models::{
    build_discriminator, build_generator, discriminator_forward, generator_forward,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::norm::Mode;
use crate::params::{load_named_tensors, named_tensors, SlotKind, Visit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CANNY_LOW: f64 = 50.0;
pub const CANNY_HIGH: f64 = 150.0;

#[derive(Clone, Copy, Debug)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name and belong
/// to the checkpoint state.
pub struct Adam<T: Scalar> {
    pub settings: OptimizerSettings,
    pub step_count: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(settings: OptimizerSettings) -> Self {
        Adam {
            settings,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter of `target`, reading
    /// gradients by name (absent names count as zero gradients).
    pub fn step(&mut self, target: &mut dyn Visit<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step_count += 1;
        let s = self.settings;
        let lr = T::from_f64(s.learning_rate);
        let b1 = T::from_f64(s.beta1);
        let b2 = T::from_f64(s.beta2);
        let eps = T::from_f64(s.epsilon);
        let c1 = T::from_f64(1.0 - s.beta1.powi(self.step_count as i32));
        let c2 = T::from_f64(1.0 - s.beta2.powi(self.step_count as i32));
        let one = T::one();
        let (ms, vs) = (&mut self.m, &mut self.v);
        target.visit_mut(&mut |name, kind, p| {
            if kind != SlotKind::Param {
                return;
            }
            let zero = Tensor::zeros(p.shape());
            let g = grads.get(&name).unwrap_or(&zero);
            let m = ms.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = vs.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            let mut new_m = Vec::with_capacity(p.len());
            let mut new_v = Vec::with_capacity(p.len());
            let mut new_p = Vec::with_capacity(p.len());
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                new_m.push(mi);
                new_v.push(vi);
                let update = (mi / c1) / ((vi / c2).sqrt() + eps);
                new_p.push(p.data()[i] - lr * update);
            }
            *m = Tensor::new(p.shape().to_vec(), new_m);
            *v = Tensor::new(p.shape().to_vec(), new_v);
            *p = Tensor::new(p.shape().to_vec(), new_p);
        });
    }
}

/// Blurred/sharp pair paths resolved against a dataset directory.
#[derive(Clone, Debug)]
pub struct PairPaths {
    pub blurred: PathBuf,
    pub sharp: PathBuf,
}

/// Reads `manifest.tsv` from a dataset directory.
pub fn load_pairs(dir: &Path) -> Result<Vec<PairPaths>> {
    let manifest = Manifest::load(&dir.join("manifest.tsv"))?;
    if manifest.entries.is_empty() {
        return Err(Error::invalid(
            "dataset",
            format!("empty manifest in {}", dir.display()),
        ));
    }
    Ok(manifest
        .entries
        .iter()
        .map(|e| PairPaths {
            blurred: dir.join(&e.blurred),
            sharp: dir.join(&e.sharp),
        })
        .collect())
}

/// A training batch in normalized tensor form: the generator input (with the
/// optional edge channel appended) and the 3-channel sharp target.
pub struct Batch<T: Scalar> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

/// Stacks `[C,H,W]` tensors into `[N,C,H,W]`.
fn stack<T: Scalar>(items: &[Tensor<T>]) -> Tensor<T> {
    let per = items[0].len();
    let mut data = Vec::with_capacity(items.len() * per);
    for t in items {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    Tensor::new(shape, data)
}

fn crop(img: &Image8, x0: usize, y0: usize, size: usize) -> Image8 {
    let mut data = Vec::with_capacity(size * size * img.channels);
    for y in 0..size {
        for x in 0..size {
            for c in 0..img.channels {
                data.push(img.sample(x0 + x, y0 + y, c));
            }
        }
    }
    Image8::new(size, size, img.channels, data).expect("crop is well-formed")
}

/// Generator input tensor for one blurred image: normalized image, plus the
/// Canny edge map of the blurred image as a fourth channel when requested.
pub fn generator_input<T: Scalar>(blurred: &Image8, edge_channel: bool) -> Result<Tensor<T>> {
    let img = normalize::<T>(blurred);
    if !edge_channel {
        return Ok(img);
    }
    let edges = canny(blurred, CANNY_LOW, CANNY_HIGH)?;
    let edge_t = normalize::<T>(&edges);
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut data = Vec::with_capacity((c + 1) * h * w);
    data.extend_from_slice(img.data());
    data.extend_from_slice(edge_t.data());
    Ok(Tensor::new(vec![c + 1, h, w], data))
}

/// Assembles a batch by random-cropping each selected pair to `patch` pixels.
pub fn make_batch<T: Scalar>(
    pairs: &[PairPaths],
    indices: &[usize],
    patch: usize,
    edge_channel: bool,
    rng: &mut Rng,
) -> Result<Batch<T>> {
    let mut inputs = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let blurred = load_image(&pairs[i].blurred)?;
        let sharp = load_image(&pairs[i].sharp)?;
        if blurred.width < patch || blurred.height < patch {
            return Err(Error::invalid(
                "batch",
                format!(
                    "image {} smaller than patch size {patch}",
                    pairs[i].blurred.display()
                ),
            ));
        }
        let x0 = if blurred.width > patch { rng.below(blurred.width - patch + 1) } else { 0 };
        let y0 = if blurred.height > patch { rng.below(blurred.height - patch + 1) } else { 0 };
        inputs.push(generator_input::<T>(&crop(&blurred, x0, y0, patch), edge_channel)?);
        targets.push(normalize::<T>(&crop(&sharp, x0, y0, patch)));
    }
    Ok(Batch {
        input: stack(&inputs),
        target: stack(&targets),
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub g_loss: f64,
    pub d_loss: f64,
    pub classical: f64,
}

/// Everything that trains or persists: the two networks, their optimizers,
/// the frozen feature extractor, the loss weights and the run RNG.
pub struct Trainer<T: Scalar> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub phi: FeatureExtractor<T>,
    pub adam_g: Adam<T>,
    pub adam_d: Adam<T>,
    pub loss: LossWeights,
    pub rng: Rng,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        gen_cfg: &GeneratorConfig,
        disc_cfg: &DiscriminatorConfig,
        loss: LossWeights,
        opt: OptimizerSettings,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let gen = build_generator(gen_cfg, &mut rng)?;
        let disc = build_discriminator(disc_cfg, &mut rng)?;
        let phi = FeatureExtractor::init(&mut rng);
        Ok(Trainer {
            gen,
            disc,
            phi,
            adam_g: Adam::new(opt),
            adam_d: Adam::new(opt),
            loss,
            rng,
            seed,
            step: 0,
            epoch: 0,
        })
    }

    /// One alternating update: a discriminator step on (real, detached fake),
    /// then a generator step on `adversarial_weight * g_adv +
    /// lambda_classical * classical`. With zero adversarial weight the
    /// discriminator is left untouched.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepStats> {
        let mut stats = StepStats::default();
        let adv = self.loss.adversarial_weight;

        if adv != 0.0 {
            // Detached fake for the discriminator update.
            let fake_t = {
                let mut g = Graph::new();
                let x = g.leaf(batch.input.clone(), false);
                let fake = generator_forward(&mut g, &mut self.gen, x, Mode::Frozen)?;
                g.value(fake).clone()
            };
            let mut g = Graph::new();
            let real = g.leaf(batch.target.clone(), false);
            let fake = g.leaf(fake_t, false);
            let (d_real, _) = discriminator_forward(&mut g, &mut self.disc, real, Mode::Train)?;
            let (d_fake, _) = discriminator_forward(&mut g, &mut self.disc, fake, Mode::Train)?;
            let d_loss = adversarial_d_loss(&mut g, d_real, d_fake)?;
            stats.d_loss = g.value(d_loss).item()?.as_f64();
            self.check_finite(stats.d_loss, "discriminator loss")?;
            let grads = g.backward(d_loss)?;
            let named = g.named_gradients(&grads);
            self.adam_d.step(&mut self.disc, &named);
        }

        let mut g = Graph::new();
        let x = g.leaf(batch.input.clone(), false);
        let target = g.leaf(batch.target.clone(), false);
        let fake = generator_forward(&mut g, &mut self.gen, x, Mode::Train)?;
        let classical = classical_loss(&mut g, self.loss.classical_kind, fake, target, &self.phi)?;
        stats.classical = g.value(classical).item()?.as_f64();
        let lambda = g.constant(Tensor::scalar(T::from_f64(self.loss.lambda_classical)));
        let mut total = g.mul(classical, lambda)?;
        if adv != 0.0 {
            let (d_fake, _) = discriminator_forward(&mut g, &mut self.disc, fake, Mode::Frozen)?;
            let g_adv = adversarial_g_loss(&mut g, d_fake)?;
            let w = g.constant(Tensor::scalar(T::from_f64(adv)));
            let weighted = g.mul(g_adv, w)?;
            total = g.add(total, weighted)?;
        }
        stats.g_loss = g.value(total).item()?.as_f64();
        self.check_finite(stats.g_loss, "generator loss")?;
        let grads = g.backward(total)?;
        let named = g.named_gradients(&grads);
        self.adam_g.step(&mut self.gen, &named);

        self.step += 1;
        Ok(stats)
    }

    /// Names the first non-finite parameter when a loss blows up.
    fn check_finite(&self, loss: f64, what: &str) -> Result<()> {
        if loss.is_finite() {
            return Ok(());
        }
        let mut offender = None;
        self.gen.visit(&mut |name, _, t| {
            if offender.is_none() && t.find_non_finite().is_some() {
                offender = Some(name);
            }
        });
        self.disc.visit(&mut |name, _, t| {
            if offender.is_none() && t.find_non_finite().is_some() {
                offender = Some(name);
            }
        });
        Err(Error::NonFinite {
            what: format!(
                "{what} (first non-finite parameter: {})",
                offender.unwrap_or_else(|| "none; inputs or activations".to_string())
            ),
        })
    }

    /// Restores every pair with the generator in eval mode and scores
    /// restored-vs-sharp. Images are processed in parallel on clones of the
    /// frozen generator and merged in manifest order.
    pub fn evaluate(&self, pairs: &[PairPaths]) -> Result<MetricReport> {
        evaluate_pairs(&self.gen, pairs)
    }

    /// All persistent tensors, namespaced: network parameters and states plus
    /// optimizer moments.
    pub fn checkpoint_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = named_tensors(&self.gen);
        out.extend(named_tensors(&self.disc));
        for (name, t) in &self.adam_g.m {
            out.insert(format!("opt.g.m.{name}"), t.clone());
        }
        for (name, t) in &self.adam_g.v {
            out.insert(format!("opt.g.v.{name}"), t.clone());
        }
        for (name, t) in &self.adam_d.m {
            out.insert(format!("opt.d.m.{name}"), t.clone());
        }
        for (name, t) in &self.adam_d.v {
            out.insert(format!("opt.d.v.{name}"), t.clone());
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        let cfg = self.gen.cfg.serialize();
        meta.insert("config".to_string(), cfg.clone());
        meta.insert("config_hash".to_string(), format!("{:016x}", fingerprint(&cfg)));
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("rng_pos".to_string(), self.rng.word_pos().to_string());
        meta.insert("adam_g_steps".to_string(), self.adam_g.step_count.to_string());
        meta.insert("adam_d_steps".to_string(), self.adam_d.step_count.to_string());
        save_checkpoint(path, &self.checkpoint_tensors(), &meta)
    }

    /// Rebuilds a trainer from a checkpoint so a resumed run continues
    /// step-for-step like an unbroken one.
    pub fn restore(
        ckpt: &Checkpoint,
        disc_cfg: &DiscriminatorConfig,
        loss: LossWeights,
        opt: OptimizerSettings,
    ) -> Result<Self> {
        let meta_num = |key: &str| -> Result<u64> {
            ckpt.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing metadata {key}")))
        };
        let cfg_str = ckpt
            .meta
            .get("config")
            .ok_or_else(|| Error::invalid("checkpoint", "missing generator config"))?;
        let expect = format!("{:016x}", fingerprint(cfg_str));
        if ckpt.meta.get("config_hash") != Some(&expect) {
            return Err(Error::invalid("checkpoint", "config hash mismatch"));
        }
        let gen_cfg = GeneratorConfig::parse(cfg_str)?;
        let seed = meta_num("seed")?;
        let mut trainer = Trainer::new(&gen_cfg, disc_cfg, loss, opt, seed)?;
        trainer.load_tensors(ckpt)?;
        trainer.step = meta_num("step")?;
        trainer.epoch = meta_num("epoch")?;
        trainer.adam_g.step_count = meta_num("adam_g_steps")?;
        trainer.adam_d.step_count = meta_num("adam_d_steps")?;
        let pos: u128 = ckpt
            .meta
            .get("rng_pos")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::invalid("checkpoint", "missing rng position"))?;
        trainer.rng = Rng::restore(seed, pos);
        Ok(trainer)
    }

    fn load_tensors(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let cast: BTreeMap<String, Tensor<T>> = ckpt
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.cast::<T>()))
            .collect();
        load_named_tensors(&mut self.gen, &cast)?;
        load_named_tensors(&mut self.disc, &cast)?;
        for (name, t) in &cast {
            if let Some(rest) = name.strip_prefix("opt.g.m.") {
                self.adam_g.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("opt.g.v.") {
                self.adam_g.v.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("opt.d.m.") {
                self.adam_d.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("opt.d.v.") {
                self.adam_d.v.insert(rest.to_string(), t.clone());
            }
        }
        Ok(())
    }
}

/// Loads a generator (eval use) from a checkpoint's tensors and metadata.
pub fn generator_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<Generator<T>> {
    let cfg_str = ckpt
        .meta
        .get("config")
        .ok_or_else(|| Error::invalid("checkpoint", "missing generator config"))?;
    let expect = format!("{:016x}", fingerprint(cfg_str));
    if ckpt.meta.get("config_hash") != Some(&expect) {
        return Err(Error::invalid("checkpoint", "config hash mismatch"));
    }
    let cfg = GeneratorConfig::parse(cfg_str)?;
    let mut gen = build_generator(&cfg, &mut Rng::new(0))?;
    let cast: BTreeMap<String, Tensor<T>> = ckpt
        .tensors
        .iter()
        .filter(|(k, _)| k.starts_with("g."))
        .map(|(k, v)| (k.clone(), v.cast::<T>()))
        .collect();
    load_named_tensors(&mut gen, &cast)?;
    Ok(gen)
}

/// Restores one blurred image with the generator in eval mode.
pub fn restore_image<T: Scalar>(gen: &mut Generator<T>, blurred: &Image8) -> Result<Image8> {
    let input = generator_input::<T>(blurred, gen.cfg.use_edge_channel)?;
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let input = input.reshape(&shape)?;
    let mut g = Graph::new();
    let x = g.leaf(input, false);
    let y = generator_forward(&mut g, gen, x, Mode::Eval)?;
    crate::imaging::denormalize(g.value(y))
}

/// Restores and scores every pair, in parallel over per-thread clones of the
/// generator, merging results in input order.
pub fn evaluate_pairs<T: Scalar>(gen: &Generator<T>, pairs: &[PairPaths]) -> Result<MetricReport> {
    let lines: Result<Vec<MetricLine>> = pairs
        .par_iter()
        .map(|pair| {
            let blurred = load_image(&pair.blurred)?;
            let sharp = load_image(&pair.sharp)?;
            let mut local = gen.clone();
            let restored = restore_image(&mut local, &blurred)?;
            Ok(MetricLine {
                name: pair
                    .blurred
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| pair.blurred.display().to_string()),
                psnr: psnr(&sharp, &restored)?,
                ssim: ssim(&sharp, &restored)?,
            })
        })
        .collect();
    Ok(MetricReport::from_lines(lines?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::losses::ClassicalKind;
    use crate::models::Arch;

    fn tiny_trainer(adv: f64, lambda: f64) -> Trainer<f32> {
        let mut cfg = GeneratorConfig::new(Arch::Pix2Pix, (16, 16));
        cfg.use_global_residual = true;
        let mut loss = LossWeights::new(ClassicalKind::L1);
        loss.adversarial_weight = adv;
        loss.lambda_classical = lambda;
        Trainer::new(
            &cfg,
            &DiscriminatorConfig::default(),
            loss,
            OptimizerSettings::default(),
            42,
        )
        .unwrap()
    }

    fn tiny_batch(rng: &mut Rng) -> Batch<f32> {
        let n = 2 * 3 * 16 * 16;
        let input = Tensor::new(
            vec![2, 3, 16, 16],
            (0..n).map(|_| rng.range(-1.0, 1.0) as f32).collect(),
        );
        let target = Tensor::new(
            vec![2, 3, 16, 16],
            (0..n).map(|_| rng.range(-1.0, 1.0) as f32).collect(),
        );
        Batch { input, target }
    }

    fn params_only(set: &dyn Visit<f32>) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        set.visit(&mut |name, kind, t| {
            if kind == SlotKind::Param {
                out.insert(name, t.clone());
            }
        });
        out
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut t = tiny_trainer(0.0, 0.0);
        let mut before = params_only(&t.gen);
        before.extend(params_only(&t.disc));
        let batch = tiny_batch(&mut Rng::new(1));
        t.train_step(&batch).unwrap();
        let mut after = params_only(&t.gen);
        after.extend(params_only(&t.disc));
        for (name, b) in &before {
            assert!(b.bits_eq(&after[name]), "{name} changed under zero objective");
        }
    }

    #[test]
    fn adversarial_step_updates_both_networks() {
        let mut t = tiny_trainer(1.0, 100.0);
        let g_before = named_tensors(&t.gen);
        let d_before = named_tensors(&t.disc);
        let batch = tiny_batch(&mut Rng::new(2));
        let stats = t.train_step(&batch).unwrap();
        assert!(stats.g_loss.is_finite() && stats.d_loss.is_finite());
        let g_after = named_tensors(&t.gen);
        let d_after = named_tensors(&t.disc);
        assert!(g_before.iter().any(|(k, v)| !v.bits_eq(&g_after[k])));
        assert!(d_before.iter().any(|(k, v)| !v.bits_eq(&d_after[k])));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = || {
            let mut t = tiny_trainer(1.0, 100.0);
            let mut rng = Rng::new(3);
            for _ in 0..3 {
                let batch = tiny_batch(&mut rng);
                t.train_step(&batch).unwrap();
            }
            t.checkpoint_tensors()
        };
        let a = run();
        let b = run();
        for (name, t) in &a {
            assert!(t.bits_eq(&b[name]), "nondeterminism in {name}");
        }
    }

    #[test]
    fn checkpoint_restores_trainer_bitwise() {
        let dir = std::env::temp_dir().join("deblur-train-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trainer.ckpt");

        let mut t = tiny_trainer(1.0, 100.0);
        let mut rng = Rng::new(4);
        for _ in 0..2 {
            let batch = tiny_batch(&mut rng);
            t.train_step(&batch).unwrap();
        }
        t.save_checkpoint(&path).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        let restored = Trainer::<f32>::restore(
            &ckpt,
            &DiscriminatorConfig::default(),
            t.loss,
            t.adam_g.settings,
        )
        .unwrap();
        let (a, b) = (t.checkpoint_tensors(), restored.checkpoint_tensors());
        assert_eq!(a.len(), b.len());
        for (name, t) in &a {
            assert!(t.bits_eq(&b[name]), "restore drift in {name}");
        }
        assert_eq!(t.rng.word_pos(), restored.rng.word_pos());

        // Continuing both for one identical step stays bitwise equal.
        let mut t2 = restored;
        let batch = tiny_batch(&mut rng);
        let mut t1 = t;
        t1.train_step(&batch).unwrap();
        t2.train_step(&batch).unwrap();
        let (a, b) = (t1.checkpoint_tensors(), t2.checkpoint_tensors());
        for (name, t) in &a {
            assert!(t.bits_eq(&b[name]), "post-resume drift in {name}");
        }
    }
}
