//! Adversarial and baseline training loops for the three tasks.
//!
//! Each step follows the same schedule: sample a minibatch, update the
//! discriminator once on detached generator output, then update the
//! generator twice with fully recomputed forward/backward passes on the
//! same minibatch. Pixel loss is optional and λ-weighted. Every random
//! choice is derived from (seed, step, stream), so runs are bit-reproducible
//! and checkpoint resume continues the exact same trajectory.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ckpt::{load_checkpoint, save_checkpoint};
use crate::error::{Result, VxError};
use crate::graph::{Graph, NodeId};
use crate::nets::{
    build_align_generator, build_discriminator, build_interp_generator, build_sr_generator,
    discriminator_node, forward_align, forward_interp, forward_sr, generator_node, LayerPlan,
    ALIGN_SHRINK, INTERP_SHRINK, SR_SHRINK,
};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng::{step_rng, Stream};
use crate::tensor::ParamSet;
use crate::volume::{sr_slice_correspondence, Image, ReslicePlane, SlicePair, SliceTriple, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Interp,
    Align,
    Sr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Interp => "interp",
            Task::Align => "align",
            Task::Sr => "sr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLoss {
    L1,
    Mse,
}

/// Training patch geometry: in-plane sections for interpolation, cubes for
/// alignment and super-resolution (cubes make the reslice and imaging-plane
/// crops agree in size without asymmetric cropping).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchSpec {
    Hw(usize, usize),
    Cube(usize),
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub task: Task,
    pub adversarial: bool,
    pub use_pixelwise_loss: bool,
    pub pixel_loss: PixelLoss,
    pub lr: f64,
    pub beta1: f64,
    /// Minibatch size m.
    pub batch_size: usize,
    pub max_step: u64,
    /// Pixel-loss weight; None resolves to 1/num-compared-pixels.
    pub lambda_pix: Option<f64>,
    pub patch: PatchSpec,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the initial and final.
    pub checkpoint_every: u64,
    /// Skip generator updates (the generator stays at its initialization).
    pub freeze_generator: bool,
}

impl TrainingConfig {
    /// Paper-default adversarial configuration for a task.
    pub fn adversarial(task: Task) -> Self {
        TrainingConfig {
            task,
            adversarial: true,
            use_pixelwise_loss: true,
            pixel_loss: PixelLoss::L1,
            lr: 0.002,
            beta1: 0.5,
            batch_size: 6,
            max_step: 500,
            lambda_pix: None,
            patch: match task {
                Task::Interp => PatchSpec::Hw(100, 100),
                Task::Align | Task::Sr => PatchSpec::Cube(64),
            },
            seed: 0,
            checkpoint_every: 100,
            freeze_generator: false,
        }
    }

    /// Paper-default pixel-only baseline (lower learning rate, no
    /// discriminator).
    pub fn baseline(task: Task) -> Self {
        TrainingConfig {
            adversarial: false,
            lr: 0.001,
            ..TrainingConfig::adversarial(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VxError::ShapeMismatch("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(VxError::ShapeMismatch(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(VxError::ShapeMismatch(format!(
                "beta1 {} outside [0, 1)",
                self.beta1
            )));
        }
        if !self.adversarial && !self.use_pixelwise_loss {
            return Err(VxError::ShapeMismatch(
                "non-adversarial training requires the pixel-wise loss".into(),
            ));
        }
        match (self.task, self.patch) {
            (Task::Interp, PatchSpec::Hw(h, w)) => {
                if h <= INTERP_SHRINK || w <= INTERP_SHRINK {
                    return Err(VxError::InputTooSmall(format!(
                        "interp patch {h}x{w} leaves no output"
                    )));
                }
            }
            (Task::Align, PatchSpec::Cube(p)) => {
                if p <= ALIGN_SHRINK {
                    return Err(VxError::InputTooSmall(format!(
                        "align patch {p}^3 leaves no output"
                    )));
                }
            }
            (Task::Sr, PatchSpec::Cube(p)) => {
                if p < SR_SHRINK + 1 {
                    return Err(VxError::InputTooSmall(format!(
                        "sr patch {p}^3 leaves no output"
                    )));
                }
            }
            (t, p) => {
                return Err(VxError::ShapeMismatch(format!(
                    "task {} cannot train on patch spec {p:?}",
                    t.name()
                )))
            }
        }
        Ok(())
    }

    /// Discriminator input size implied by the patch geometry.
    pub fn disc_input_hw(&self) -> (usize, usize) {
        match (self.task, self.patch) {
            (Task::Interp, PatchSpec::Hw(h, w)) => (h - INTERP_SHRINK, w - INTERP_SHRINK),
            (Task::Align, PatchSpec::Cube(p)) => (p - ALIGN_SHRINK, p - ALIGN_SHRINK),
            (Task::Sr, PatchSpec::Cube(p)) => (p - SR_SHRINK, p - SR_SHRINK),
            _ => unreachable!("validated"),
        }
    }
}

/// Per-step losses and discriminator probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub pixel_loss: f64,
    pub p_real: f64,
    pub p_fake: f64,
}

impl StepReport {
    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g_loss, self.pixel_loss, self.p_real, self.p_fake]
            .iter()
            .all(|v| v.is_finite())
    }

    /// One tab-separated log line: step, D loss, G loss, pixel loss,
    /// mean p(real), mean p(fake).
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            self.step, self.d_loss, self.g_loss, self.pixel_loss, self.p_real, self.p_fake
        )
    }
}

fn sigmoid(d: f64) -> f64 {
    1.0 / (1.0 + (-d).exp())
}

/// One minibatch with all per-step random choices pre-drawn, so the
/// discriminator pass and both generator passes see identical data.
pub enum Batch {
    Interp {
        triples: Vec<SliceTriple>,
        pairs: Vec<SlicePair>,
    },
    Cubes {
        stacks: Vec<Volume>,
        /// Fake reslice plane+index per sample, within the generator output.
        fake_slices: Vec<(ReslicePlane, usize)>,
        /// Real imaging-plane slice index per sample, within the input patch.
        real_zs: Vec<usize>,
    },
}

pub struct Trainer {
    cfg: TrainingConfig,
    volume: Volume,
    gen: ParamSet,
    gen_plan: LayerPlan,
    disc: Option<(ParamSet, LayerPlan)>,
    adam_g: AdamState,
    adam_d: Option<AdamState>,
    lambda: f64,
    updates_g: u64,
    updates_d: u64,
}

struct DiscStats {
    d_loss: f64,
    p_real: f64,
    p_fake: f64,
}

struct GenStats {
    g_loss: f64,
    pixel: f64,
}

impl Trainer {
    /// Normalizes the volume and builds the networks for the configured
    /// task. The volume must be large enough for the configured patches.
    pub fn new(cfg: TrainingConfig, volume: &Volume) -> Result<Self> {
        cfg.validate()?;
        let volume = volume.normalize()?;
        let (zs, ys, xs) = volume.dims();
        match cfg.patch {
            PatchSpec::Hw(h, w) => {
                if zs < 3 || ys < h || xs < w {
                    return Err(VxError::VolumeTooSmall(format!(
                        "volume {:?} for {h}x{w} patches",
                        volume.dims()
                    )));
                }
            }
            PatchSpec::Cube(p) => {
                if zs < p || ys < p || xs < p {
                    return Err(VxError::VolumeTooSmall(format!(
                        "volume {:?} for {p}^3 patches",
                        volume.dims()
                    )));
                }
            }
        }

        let (gen, gen_plan) = match cfg.task {
            Task::Interp => build_interp_generator(cfg.seed),
            Task::Align => build_align_generator(cfg.seed),
            Task::Sr => build_sr_generator(cfg.seed),
        };
        let disc = if cfg.adversarial {
            let n_slices = if cfg.task == Task::Interp { 2 } else { 1 };
            Some(build_discriminator(
                n_slices,
                cfg.disc_input_hw(),
                cfg.seed ^ 0xd15c,
            )?)
        } else {
            None
        };

        let hyper = AdamHyper::new(cfg.lr, cfg.beta1);
        let adam_g = AdamState::new(hyper, &gen);
        let adam_d = disc.as_ref().map(|(ps, _)| AdamState::new(hyper, ps));
        let lambda = cfg.lambda_pix.unwrap_or(match (cfg.task, cfg.patch) {
            (Task::Interp, PatchSpec::Hw(h, w)) => {
                1.0 / (((h - INTERP_SHRINK) * (w - INTERP_SHRINK)) as f64)
            }
            (Task::Align, PatchSpec::Cube(p)) => {
                let q = p - ALIGN_SHRINK;
                1.0 / ((q * q * q) as f64)
            }
            (Task::Sr, PatchSpec::Cube(p)) => {
                let r = p - SR_SHRINK;
                let pairs = p - SR_SHRINK; // one pair per correspondence
                1.0 / ((pairs * r * r) as f64)
            }
            _ => unreachable!("validated"),
        });

        Ok(Trainer {
            cfg,
            volume,
            gen,
            gen_plan,
            disc,
            adam_g,
            adam_d,
            lambda,
            updates_g: 0,
            updates_d: 0,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn gen_params(&self) -> &ParamSet {
        &self.gen
    }

    pub fn gen_plan(&self) -> &LayerPlan {
        &self.gen_plan
    }

    pub fn disc_params(&self) -> Option<&ParamSet> {
        self.disc.as_ref().map(|(ps, _)| ps)
    }

    pub fn disc_plan(&self) -> Option<&LayerPlan> {
        self.disc.as_ref().map(|(_, plan)| plan)
    }

    pub fn generator_updates(&self) -> u64 {
        self.updates_g
    }

    pub fn discriminator_updates(&self) -> u64 {
        self.updates_d
    }

    /// Draws the minibatch and all per-step random choices for `step`.
    pub fn sample_batch(&self, step: u64) -> Result<Batch> {
        let m = self.cfg.batch_size;
        let mut rng = step_rng(self.cfg.seed, step, Stream::Sampling);
        match (self.cfg.task, self.cfg.patch) {
            (Task::Interp, PatchSpec::Hw(h, w)) => {
                let mut triples = Vec::with_capacity(m);
                let mut pairs = Vec::with_capacity(m);
                for _ in 0..m {
                    triples.push(self.volume.sample_triple(&mut rng, (h, w))?);
                }
                for _ in 0..m {
                    pairs.push(self.volume.sample_pair(&mut rng, (h, w))?);
                }
                Ok(Batch::Interp { triples, pairs })
            }
            (_, PatchSpec::Cube(p)) => {
                let mut stacks = Vec::with_capacity(m);
                for _ in 0..m {
                    stacks.push(self.volume.sample_cube(&mut rng, p)?);
                }
                let mut srng = step_rng(self.cfg.seed, step, Stream::SliceChoice);
                let (dh, _) = self.cfg.disc_input_hw();
                let fake_slices = (0..m)
                    .map(|_| {
                        let plane = if srng.random::<bool>() {
                            ReslicePlane::Yz
                        } else {
                            ReslicePlane::Xz
                        };
                        (plane, srng.random_range(0..dh))
                    })
                    .collect();
                let real_zs = (0..m).map(|_| srng.random_range(0..p)).collect();
                Ok(Batch::Cubes {
                    stacks,
                    fake_slices,
                    real_zs,
                })
            }
            _ => unreachable!("validated"),
        }
    }

    /// Detached generator output for one sample (no gradients flow back).
    fn detached_output(&self, batch: &Batch, i: usize) -> Result<DetachedOutput> {
        match batch {
            Batch::Interp { triples, .. } => {
                let t = &triples[i];
                let img = forward_interp(&self.gen_plan, &self.gen, &t.below, &t.above)?;
                Ok(DetachedOutput::Section(img))
            }
            Batch::Cubes { stacks, .. } => {
                let out = match self.cfg.task {
                    Task::Align => forward_align(&self.gen_plan, &self.gen, &stacks[i])?,
                    Task::Sr => forward_sr(&self.gen_plan, &self.gen, &stacks[i])?,
                    Task::Interp => unreachable!("interp uses section batches"),
                };
                Ok(DetachedOutput::Stack(out))
            }
        }
    }

    /// Fake discriminator input slices for sample i, from detached data.
    fn fake_images(&self, batch: &Batch, i: usize, out: &DetachedOutput) -> Result<Vec<Image>> {
        let (dh, dw) = self.cfg.disc_input_hw();
        match (batch, out) {
            (Batch::Interp { triples, .. }, DetachedOutput::Section(img)) => {
                let below = triples[i].below.center_crop(dh, dw)?;
                Ok(vec![below, img.clone()])
            }
            (
                Batch::Cubes { fake_slices, .. },
                DetachedOutput::Stack(vol),
            ) => {
                let (plane, idx) = fake_slices[i];
                let reslice = vol.reslice(plane, idx)?;
                Ok(vec![reslice.center_crop(dh, dw)?])
            }
            _ => unreachable!("batch/output kinds match by construction"),
        }
    }

    /// Real discriminator input slices for sample i.
    fn real_images(&self, batch: &Batch, i: usize) -> Result<Vec<Image>> {
        let (dh, dw) = self.cfg.disc_input_hw();
        match batch {
            Batch::Interp { pairs, .. } => {
                let p = &pairs[i];
                Ok(vec![
                    p.below.center_crop(dh, dw)?,
                    p.target.center_crop(dh, dw)?,
                ])
            }
            Batch::Cubes { stacks, real_zs, .. } => {
                let xy = stacks[i].xy_slice(real_zs[i])?;
                Ok(vec![xy.center_crop(dh, dw)?])
            }
        }
    }

    /// One discriminator update: D_LOSS = Σ L(D(fake), 0) + Σ L(D(real), 1)
    /// on generator output treated as constant, then one ADAM step on θ_D.
    pub fn discriminator_update(&mut self, batch: &Batch, step: u64) -> Result<DiscReport> {
        if self.disc.is_none() {
            return Err(VxError::ShapeMismatch("no discriminator configured".into()));
        }
        let m = self.cfg.batch_size;
        let seed = self.cfg.seed;

        // Generator output is detached here: only θ_D sees gradients.
        let mut fake_batch = Vec::with_capacity(m);
        let mut real_batch = Vec::with_capacity(m);
        for i in 0..m {
            let out = self.detached_output(batch, i)?;
            fake_batch.push(self.fake_images(batch, i, &out)?);
            real_batch.push(self.real_images(batch, i)?);
        }

        let Self {
            disc,
            adam_d,
            updates_d,
            ..
        } = self;
        let (disc_ps, disc_plan) = disc.as_mut().expect("checked above");
        let mut rng = step_rng(seed, step, Stream::DiscDropout);

        disc_ps.zero_grads();
        let mut d_loss = 0.0;
        let (mut p_real, mut p_fake) = (0.0, 0.0);
        for (i, (fakes, reals)) in fake_batch.iter().zip(&real_batch).enumerate() {
            let mut g = Graph::new();
            let mut image_nodes = |g: &mut Graph, imgs: &[Image]| -> Result<Vec<NodeId>> {
                imgs.iter()
                    .map(|img| g.constant(vec![1, 1, img.rows, img.cols], img.data().to_vec()))
                    .collect()
            };
            let fake_nodes = image_nodes(&mut g, fakes)?;
            let d_fake =
                discriminator_node(&mut g, disc_plan, disc_ps, &fake_nodes, &mut rng, true)?;
            let l_fake = g.bce_with_logits(d_fake, 0.0)?;

            let real_nodes = image_nodes(&mut g, reals)?;
            let d_real =
                discriminator_node(&mut g, disc_plan, disc_ps, &real_nodes, &mut rng, true)?;
            let l_real = g.bce_with_logits(d_real, 1.0)?;

            let loss = g.add_n(&[l_fake, l_real])?;
            let v = g.value(loss);
            if !v.is_finite() {
                return Err(VxError::NonFiniteLoss {
                    step,
                    detail: format!("discriminator loss {v} on sample {i}"),
                });
            }
            d_loss += v;
            p_fake += sigmoid(g.value(d_fake));
            p_real += sigmoid(g.value(d_real));
            g.backward(loss)?;
            g.apply_grads(disc_ps);
        }
        adam_step(adam_d.as_mut().expect("adversarial state"), disc_ps)?;
        *updates_d += 1;

        Ok(DiscReport {
            d_loss,
            p_real: p_real / m as f64,
            p_fake: p_fake / m as f64,
        })
    }

    /// One generator update: G_LOSS = Σ L(D(fake), 1) (+ λ·pixel loss),
    /// recomputed from scratch, then one ADAM step on θ_G. Discriminator
    /// parameters receive no update from this pass.
    pub fn generator_update(&mut self, batch: &Batch, step: u64, pass: u8) -> Result<GenReport> {
        let m = self.cfg.batch_size;
        let mut rng = step_rng(self.cfg.seed, step, Stream::GenDropout(pass));
        let (dh, dw) = self.cfg.disc_input_hw();
        let correspondence = match (self.cfg.task, self.cfg.patch) {
            (Task::Sr, PatchSpec::Cube(p)) => sr_slice_correspondence(p)?,
            _ => Vec::new(),
        };

        self.gen.zero_grads();
        let mut stats = GenStats {
            g_loss: 0.0,
            pixel: 0.0,
        };
        for i in 0..m {
            let mut g = Graph::new();
            let out = match batch {
                Batch::Interp { triples, .. } => {
                    let t = &triples[i];
                    let mut data = Vec::with_capacity(2 * t.below.data().len());
                    data.extend_from_slice(t.below.data());
                    data.extend_from_slice(t.above.data());
                    let input =
                        g.constant(vec![1, 2, t.below.rows, t.below.cols], data)?;
                    generator_node(&mut g, &self.gen_plan, &self.gen, input)?
                }
                Batch::Cubes { stacks, .. } => {
                    let (z, y, x) = stacks[i].dims();
                    let input = g.constant(vec![1, z, y, x], stacks[i].voxels().to_vec())?;
                    generator_node(&mut g, &self.gen_plan, &self.gen, input)?
                }
            };

            let mut terms = Vec::new();
            if let Some((disc_ps, disc_plan)) = &self.disc {
                let fake_nodes: Vec<NodeId> = match batch {
                    Batch::Interp { triples, .. } => {
                        let below = triples[i].below.center_crop(dh, dw)?;
                        let b =
                            g.constant(vec![1, 1, dh, dw], below.data().to_vec())?;
                        vec![b, out]
                    }
                    Batch::Cubes { fake_slices, .. } => {
                        let (plane, idx) = fake_slices[i];
                        let reslice = match plane {
                            ReslicePlane::Yz => g.reslice_yz(out, idx)?,
                            ReslicePlane::Xz => g.reslice_xz(out, idx)?,
                        };
                        vec![g.center_crop(reslice, [1, 1, dh, dw])?]
                    }
                };
                let d_fake =
                    discriminator_node(&mut g, disc_plan, disc_ps, &fake_nodes, &mut rng, true)?;
                terms.push(g.bce_with_logits(d_fake, 1.0)?);
            }

            if self.cfg.use_pixelwise_loss {
                let pix = self.pixel_loss_node(&mut g, batch, i, out, &correspondence)?;
                let weighted = g.scale(pix, self.lambda);
                stats.pixel += g.value(weighted);
                terms.push(weighted);
            }

            let loss = g.add_n(&terms)?;
            let v = g.value(loss);
            if !v.is_finite() {
                return Err(VxError::NonFiniteLoss {
                    step,
                    detail: format!("generator loss {v} on sample {i} pass {pass}"),
                });
            }
            stats.g_loss += v;
            g.backward(loss)?;
            g.apply_grads(&mut self.gen);
        }
        adam_step(&mut self.adam_g, &mut self.gen)?;
        self.updates_g += 1;

        Ok(GenReport {
            g_loss: stats.g_loss,
            pixel_loss: stats.pixel,
        })
    }

    /// Pixel term for sample i as a graph node (unweighted).
    fn pixel_loss_node(
        &self,
        g: &mut Graph,
        batch: &Batch,
        i: usize,
        out: NodeId,
        correspondence: &[(usize, usize)],
    ) -> Result<NodeId> {
        let apply = |g: &mut Graph, a: NodeId, b: NodeId| match self.cfg.pixel_loss {
            PixelLoss::L1 => g.l1_sum(a, b),
            PixelLoss::Mse => g.mse_mean(a, b),
        };
        match batch {
            Batch::Interp { triples, .. } => {
                let (dh, dw) = self.cfg.disc_input_hw();
                let target = triples[i].target.center_crop(dh, dw)?;
                let t = g.constant(vec![1, 1, dh, dw], target.data().to_vec())?;
                apply(g, out, t)
            }
            Batch::Cubes { stacks, .. } => match self.cfg.task {
                Task::Align => {
                    let q = match g.shape(out) {
                        [1, a, b, c] => (*a, *b, *c),
                        s => {
                            return Err(VxError::ShapeMismatch(format!(
                                "generator output shape {s:?}"
                            )))
                        }
                    };
                    let target = stacks[i].center_crop(q)?;
                    let t = g.constant(vec![1, q.0, q.1, q.2], target.voxels().to_vec())?;
                    apply(g, out, t)
                }
                Task::Sr => {
                    // Absolute-difference loss on alternating output slices:
                    // even slice 2i against in-plane-cropped input slice i+7.
                    let (dh, dw) = self.cfg.disc_input_hw();
                    let mut parts = Vec::with_capacity(correspondence.len());
                    for &(oz, iz) in correspondence {
                        let pred = g.slice_z(out, oz)?;
                        let target = stacks[i].xy_slice(iz)?.center_crop(dh, dw)?;
                        let t = g.constant(vec![1, 1, dh, dw], target.data().to_vec())?;
                        parts.push(apply(g, pred, t)?);
                    }
                    g.add_n(&parts)
                }
                Task::Interp => unreachable!("interp uses section batches"),
            },
        }
    }

    /// One full Algorithm-style step: discriminator once, generator twice
    /// (both recomputed), on one sampled minibatch.
    pub fn train_step(&mut self, step: u64) -> Result<StepReport> {
        let batch = self.sample_batch(step)?;
        let mut report = StepReport {
            step,
            d_loss: 0.0,
            g_loss: 0.0,
            pixel_loss: 0.0,
            p_real: 0.5,
            p_fake: 0.5,
        };
        if self.cfg.adversarial {
            let d = self.discriminator_update(&batch, step)?;
            report.d_loss = d.d_loss;
            report.p_real = d.p_real;
            report.p_fake = d.p_fake;
        }
        if !self.cfg.freeze_generator {
            let g1 = self.generator_update(&batch, step, 1)?;
            report.g_loss = g1.g_loss;
            report.pixel_loss = g1.pixel_loss;
            if self.cfg.adversarial {
                self.generator_update(&batch, step, 2)?;
            }
        }
        if !report.is_finite() {
            return Err(VxError::NonFiniteLoss {
                step,
                detail: format!("step report {report:?}"),
            });
        }
        Ok(report)
    }

    fn save_checkpoints(&self, dir: &Path, step: u64) -> Result<()> {
        save_checkpoint(
            &dir.join(format!("ckpt-{step:06}-gen.vxck")),
            &self.gen,
            Some(&self.adam_g),
        )?;
        if let Some((disc_ps, _)) = &self.disc {
            save_checkpoint(
                &dir.join(format!("ckpt-{step:06}-disc.vxck")),
                disc_ps,
                self.adam_d.as_ref(),
            )?;
        }
        Ok(())
    }

    fn restore(&mut self, dir: &Path, step: u64) -> Result<()> {
        let hyper = AdamHyper::new(self.cfg.lr, self.cfg.beta1);
        let (gen, adam_g) = load_checkpoint(&dir.join(format!("ckpt-{step:06}-gen.vxck")), hyper)?;
        ensure_same_names(&self.gen, &gen)?;
        self.gen = gen;
        self.adam_g = adam_g.ok_or_else(|| {
            VxError::Format("generator checkpoint lacks optimizer state".into())
        })?;
        if let Some((disc_ps, _)) = &mut self.disc {
            let (d, adam_d) =
                load_checkpoint(&dir.join(format!("ckpt-{step:06}-disc.vxck")), hyper)?;
            ensure_same_names(disc_ps, &d)?;
            *disc_ps = d;
            self.adam_d = Some(adam_d.ok_or_else(|| {
                VxError::Format("discriminator checkpoint lacks optimizer state".into())
            })?);
        }
        Ok(())
    }
}

fn ensure_same_names(expected: &ParamSet, loaded: &ParamSet) -> Result<()> {
    let a: Vec<&str> = expected.names().collect();
    let b: Vec<&str> = loaded.names().collect();
    if a != b {
        return Err(VxError::Format(
            "checkpoint parameters do not match the configured network".into(),
        ));
    }
    Ok(())
}

/// Public view of one generator update.
#[derive(Debug, Clone, Copy)]
pub struct GenReport {
    pub g_loss: f64,
    pub pixel_loss: f64,
}

/// Highest checkpoint step present in `dir`, if any.
pub fn latest_checkpoint_step(dir: &Path) -> Option<u64> {
    let mut best = None;
    for entry in fs::read_dir(dir).ok()? {
        let name = entry.ok()?.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("ckpt-") {
            if let Some(step_str) = rest.strip_suffix("-gen.vxck") {
                if let Ok(step) = step_str.parse::<u64>() {
                    best = Some(best.map_or(step, |b: u64| b.max(step)));
                }
            }
        }
    }
    best
}

/// Drives training to `cfg.max_step`, writing the tab-separated step log
/// (`train.log`, flushed every line) and VXCK checkpoints into `out_dir`.
/// If checkpoints already exist there, training resumes after the latest
/// one and reproduces the uninterrupted run exactly.
pub fn run_training(cfg: &TrainingConfig, volume: &Volume, out_dir: &Path) -> Result<Vec<StepReport>> {
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(cfg.clone(), volume)?;

    let resume_from = latest_checkpoint_step(out_dir).filter(|&s| s <= cfg.max_step);
    let start = match resume_from {
        Some(step) => {
            trainer.restore(out_dir, step)?;
            truncate_log(&out_dir.join("train.log"), step)?;
            step + 1
        }
        None => {
            trainer.save_checkpoints(out_dir, 0)?;
            let _ = fs::remove_file(out_dir.join("train.log"));
            1
        }
    };

    let log_path = out_dir.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let mut reports = Vec::new();
    for step in start..=cfg.max_step {
        let report = trainer.train_step(step)?;
        writeln!(log, "{}", report.log_line())?;
        log.flush()?;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            trainer.save_checkpoints(out_dir, step)?;
        }
        reports.push(report);
    }
    if cfg.max_step >= start || resume_from.is_none() {
        trainer.save_checkpoints(out_dir, cfg.max_step.max(0))?;
    }
    Ok(reports)
}

/// Drops log lines past a resume point so the rewritten log matches an
/// uninterrupted run byte for byte.
fn truncate_log(path: &Path, keep_through_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path)?;
    let mut kept = String::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let step: u64 = line
            .split('\t')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(u64::MAX);
        if step <= keep_through_step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Checkpoint path of the final generator of a finished run.
pub fn final_generator_path(out_dir: &Path, cfg: &TrainingConfig) -> PathBuf {
    out_dir.join(format!("ckpt-{:06}-gen.vxck", cfg.max_step))
}
