//! Unpaired sampling, the learning-rate schedule and the alternating
//! discriminator / generator optimization loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{augment, images_to_tensor, save_image, tensor_to_images, ImageTensor};
use crate::losses::{adv_d_var, adv_g_var, cycle_var, total_var, GanMode, LossReport, DEFAULT_LAMBDA};
use crate::model::{read_checkpoint, write_checkpoint, Domain, ModelBundle, NetConfig, RawCheckpoint};
use crate::nn::{Adam, AdamConfig, Graph, Real, Tensor, Var};
use crate::rng::SeededRng;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// RNG stream for batch sampling; each step derives `(seed, [BATCH_STREAM, step])`.
const BATCH_STREAM: u64 = 0xba7c;
const HISTORY_STREAM: u64 = 0x4157;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Final epochs over which the learning rate decays linearly to 0.
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub seed: u64,
    pub non_saturating: bool,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub desk_scale: bool,
    /// Per-domain buffer of past generated images shown to the
    /// discriminators; 0 disables it.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub history_pool: usize,
    /// Stop after this many steps in total, even mid-schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            decay_epochs: 50,
            batch_size: 16,
            lr0: 1e-4,
            adam: AdamConfig::default(),
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            non_saturating: true,
            checkpoint_every: 0,
            desk_scale: false,
            history_pool: 0,
            max_steps: None,
        }
    }
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self { epochs: 30, decay_epochs: 15, batch_size: 4, lr0: 2e-4, desk_scale: true, ..Self::default() }
    }

    pub fn gan_mode(&self) -> GanMode {
        if self.non_saturating {
            GanMode::NonSaturating
        } else {
            GanMode::Minimax
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.decay_epochs > self.epochs {
            return bad("decay_epochs exceeds epochs");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        Ok(())
    }

    /// Constant `lr0`, then linear decay reaching 0 at `epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let start = self.epochs - self.decay_epochs;
        if epoch < start {
            self.lr0
        } else if epoch >= self.epochs {
            0.0
        } else {
            self.lr0 * (self.epochs - epoch) as f64 / self.decay_epochs as f64
        }
    }
}

/// Three independent sample collections. Nothing here links an x to a (y, z).
#[derive(Debug, Clone)]
pub struct DomainPools {
    x: Vec<ImageTensor>,
    y: Vec<ImageTensor>,
    z: Vec<ImageTensor>,
}

impl DomainPools {
    pub fn new(x: Vec<ImageTensor>, y: Vec<ImageTensor>, z: Vec<ImageTensor>) -> Result<Self> {
        for (name, pool, ch) in [("x", &x, None), ("y", &y, None), ("z", &z, Some(1))] {
            let Some(first) = pool.first() else {
                return Err(Error::Empty(format!("pool {name}")));
            };
            if pool.iter().any(|p| !p.same_shape(first)) {
                return Err(Error::Shape(format!("pool {name} mixes image shapes")));
            }
            if ch.is_some_and(|c| first.channels() != c) {
                return Err(Error::Shape(format!("pool {name} must be single-channel")));
            }
        }
        if x[0].channels() != y[0].channels() {
            return Err(Error::Shape("pools x and y differ in channels".into()));
        }
        Ok(Self { x, y, z })
    }

    pub fn len(&self, domain: Domain) -> usize {
        self.pool(domain).len()
    }

    pub fn get(&self, domain: Domain, index: usize) -> &ImageTensor {
        &self.pool(domain)[index]
    }

    /// Side of the (square) stored images, the smallest of the three pools.
    pub fn min_side(&self) -> usize {
        [&self.x[0], &self.y[0], &self.z[0]].iter().map(|i| i.height().min(i.width())).min().unwrap_or(0)
    }

    fn pool(&self, domain: Domain) -> &[ImageTensor] {
        match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
            Domain::Z => &self.z,
        }
    }
}

/// One batch per domain, in model range, `NCHW`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub z: Tensor<f32>,
}

/// Independent uniform draws with replacement; every sample gets its own
/// mirror and `crop x crop` window.
pub fn sample_unpaired_batch(pools: &DomainPools, rng: &mut SeededRng, n: usize, crop: usize) -> Result<Batch> {
    let mut draw = |domain: Domain| -> Result<Tensor<f32>> {
        let imgs = (0..n)
            .map(|_| {
                let i = rng.index(pools.len(domain));
                augment(pools.get(domain, i), crop, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        images_to_tensor(&imgs)
    };
    Ok(Batch { x: draw(Domain::X)?, y: draw(Domain::Y)?, z: draw(Domain::Z)? })
}

/// The generator-side forward pass of one step: translations and cycles.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorPass {
    pub y_hat: Var,
    pub z_hat: Var,
    pub x_hat: Var,
    /// `[cyc_x, cyc_y, cyc_z]`.
    pub cyc: [Var; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorObjective {
    /// `[g_adv_x, g_adv_y, g_adv_z]`.
    pub adv: [Var; 3],
    pub total: Var,
}

impl GeneratorPass {
    /// `x -> (y_hat, z_hat) -> x_rec` and `(y, z) -> x_hat -> (y_rec, z_rec)`.
    pub fn build<T: Real>(m: &ModelBundle<T>, g: &mut Graph<T>, x: Var, y: Var, z: Var) -> Self {
        let (y_hat, z_hat, _, _) = m.disentangle_var(g, x);
        let x_rec = m.fuse_var(g, y_hat, z_hat);
        let x_hat = m.fuse_var(g, y, z);
        let (y_rec, z_rec, _, _) = m.disentangle_var(g, x_hat);
        let cyc = [cycle_var(g, x, x_rec), cycle_var(g, y, y_rec), cycle_var(g, z, z_rec)];
        Self { y_hat, z_hat, x_hat, cyc }
    }

    /// Adversarial terms against the discriminators as currently stored, plus
    /// `lambda` times the cycle terms.
    pub fn objective<T: Real>(
        &self,
        m: &ModelBundle<T>,
        g: &mut Graph<T>,
        lambda: f64,
        mode: GanMode,
    ) -> GeneratorObjective {
        let sx = m.discriminate_var(g, Domain::X, self.x_hat);
        let sy = m.discriminate_var(g, Domain::Y, self.y_hat);
        let sz = m.discriminate_var(g, Domain::Z, self.z_hat);
        let adv = [adv_g_var(g, sx, mode), adv_g_var(g, sy, mode), adv_g_var(g, sz, mode)];
        let total = total_var(g, adv, self.cyc, lambda);
        GeneratorObjective { adv, total }
    }
}

/// Buffers of earlier fakes, one per domain. A full buffer answers each
/// query image with a stored one half of the time, storing the new image in
/// its place. Capacity 0 passes fakes through.
#[derive(Debug, Clone, Default)]
pub struct FakeHistory {
    pub capacity: usize,
    pub seed: u64,
    buffers: [Vec<Tensor<f32>>; 3],
}

impl FakeHistory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity, seed, buffers: Default::default() }
    }

    pub fn len(&self, domain: Domain) -> usize {
        self.buffers[domain as usize].len()
    }

    fn query(&mut self, domain: Domain, fakes: &Tensor<f32>, rng: &mut SeededRng) -> Tensor<f32> {
        if self.capacity == 0 {
            return fakes.clone();
        }
        let buf = &mut self.buffers[domain as usize];
        let items: Vec<Tensor<f32>> = (0..fakes.batch())
            .map(|i| {
                let img = fakes.narrow_batch(i, 1);
                if buf.len() < self.capacity {
                    buf.push(img.clone());
                    img
                } else if rng.bernoulli(0.5) {
                    std::mem::replace(&mut buf[rng.index(self.capacity)], img)
                } else {
                    img
                }
            })
            .collect();
        Tensor::stack(&items)
    }
}

/// Model plus the two optimizers: one over G and F, one over the discriminators.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub bundle: ModelBundle<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub history: FakeHistory,
}

impl Trainer {
    pub fn new(bundle: ModelBundle<f32>, adam: AdamConfig) -> Self {
        let opt_g = Adam::new(adam, &bundle.params, &bundle.generator_params());
        let opt_d = Adam::new(adam, &bundle.params, &bundle.discriminator_params());
        Self { bundle, opt_g, opt_d, history: FakeHistory::default() }
    }

    /// One discriminator update followed by one joint G/F update.
    ///
    /// Returns `Error::NonFinite` when a loss is not finite; G and F are then
    /// left untouched.
    pub fn step(&mut self, batch: &Batch, lambda: f64, mode: GanMode, lr: f64) -> Result<LossReport> {
        let m = &self.bundle;
        let mut g = Graph::new(&m.generator_params());
        let x = g.constant(batch.x.clone());
        let y = g.constant(batch.y.clone());
        let z = g.constant(batch.z.clone());
        let fwd = GeneratorPass::build(m, &mut g, x, y, z);

        // Discriminators on real samples against detached fakes.
        let mut dg = Graph::new(&m.discriminator_params());
        let mut d_terms = Vec::with_capacity(3);
        let mut hist_rng = SeededRng::derive(self.history.seed, &[HISTORY_STREAM, m.step]);
        for (domain, real, fake) in [(Domain::X, x, fwd.x_hat), (Domain::Y, y, fwd.y_hat), (Domain::Z, z, fwd.z_hat)] {
            let r = dg.constant(g.value(real).clone());
            let f = dg.constant(self.history.query(domain, g.value(fake), &mut hist_rng));
            let sr = m.discriminate_var(&mut dg, domain, r);
            let sf = m.discriminate_var(&mut dg, domain, f);
            d_terms.push(adv_d_var(&mut dg, sr, sf));
        }
        let d_total = dg.weighted_sum(&d_terms.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>());
        let d_vals: Vec<f64> = d_terms.iter().map(|&v| dg.value(v).value() as f64).collect();
        if !dg.value(d_total).all_finite() {
            return Err(Error::NonFinite(format!("discriminator losses {d_vals:?}")));
        }
        let d_grads = dg.backward(d_total);
        self.opt_d.step(&mut self.bundle.params, &d_grads, lr);

        // Generators against the updated discriminators (bound as constants).
        let obj = fwd.objective(&self.bundle, &mut g, lambda, mode);
        let val = |v| g.value(v).value() as f64;
        let report = LossReport {
            step: self.bundle.step,
            epoch: 0,
            lr,
            d_x: d_vals[0],
            d_y: d_vals[1],
            d_z: d_vals[2],
            g_adv_x: val(obj.adv[0]),
            g_adv_y: val(obj.adv[1]),
            g_adv_z: val(obj.adv[2]),
            cyc_x: val(fwd.cyc[0]),
            cyc_y: val(fwd.cyc[1]),
            cyc_z: val(fwd.cyc[2]),
            lambda,
            total_g: val(obj.total),
        };
        if !report.all_finite() {
            return Err(Error::NonFinite(format!("generator losses at step {}", report.step)));
        }
        let g_grads = g.backward(obj.total);
        self.opt_g.step(&mut self.bundle.params, &g_grads, lr);
        self.bundle.step += 1;
        Ok(report)
    }

    fn to_raw(&self) -> RawCheckpoint {
        let mut tensors = self.bundle.named_tensors();
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            let (m, v) = opt.moments();
            for (i, &id) in opt.params().iter().enumerate() {
                let name = self.bundle.params.name(id);
                tensors.push((format!("{tag}.m.{name}"), m[i].clone()));
                tensors.push((format!("{tag}.v.{name}"), v[i].clone()));
            }
        }
        for (d, buf) in [Domain::X, Domain::Y, Domain::Z].iter().zip(&self.history.buffers) {
            if !buf.is_empty() {
                tensors.push((format!("history.{}", d.tag()), Tensor::stack(buf)));
            }
        }
        RawCheckpoint {
            config: self.bundle.config.clone(),
            step: self.bundle.step,
            tensors,
            extra: serde_json::json!({ "adam_g_steps": self.opt_g.steps(), "adam_d_steps": self.opt_d.steps() }),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_checkpoint(dir, &self.to_raw())
    }

    /// Restores model and optimizer state written by [`Trainer::save`].
    pub fn load(dir: &Path, adam: AdamConfig) -> Result<Self> {
        let raw = read_checkpoint(dir)?;
        let bundle = ModelBundle::from_raw(&raw, dir)?;
        let mut t = Self::new(bundle, adam);
        let bad = |r: String| Error::Checkpoint { path: dir.to_path_buf(), reason: r };
        for (tag, key) in [("adam_g", "adam_g_steps"), ("adam_d", "adam_d_steps")] {
            let steps = raw.extra.get(key).and_then(|v| v.as_u64()).ok_or_else(|| bad(format!("missing {key}")))?;
            let opt = if tag == "adam_g" { &mut t.opt_g } else { &mut t.opt_d };
            let mut ms = Vec::new();
            let mut vs = Vec::new();
            for &id in opt.params() {
                let name = t.bundle.params.name(id);
                let find = |kind: &str| {
                    let full = format!("{tag}.{kind}.{name}");
                    raw.tensors
                        .iter()
                        .find(|(n, _)| *n == full)
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| bad(format!("missing {full}")))
                };
                ms.push(find("m")?);
                vs.push(find("v")?);
            }
            opt.restore(steps, ms, vs).map_err(bad)?;
        }
        for d in [Domain::X, Domain::Y, Domain::Z] {
            let name = format!("history.{}", d.tag());
            if let Some((_, stacked)) = raw.tensors.iter().find(|(n, _)| *n == name) {
                t.history.buffers[d as usize] = (0..stacked.batch()).map(|i| stacked.narrow_batch(i, 1)).collect();
            }
        }
        Ok(t)
    }
}

/// Steps per epoch: enough batches to cover the largest pool once.
pub fn steps_per_epoch(pools: &DomainPools, batch_size: usize) -> u64 {
    let largest = [Domain::X, Domain::Y, Domain::Z].iter().map(|&d| pools.len(d)).max().unwrap_or(0);
    largest.div_ceil(batch_size).max(1) as u64
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub reports: Vec<LossReport>,
}

/// Runs (or resumes) training, writing `train_log.jsonl`, periodic
/// checkpoints under `checkpoints/` and the final one under `final/`.
pub fn train(
    config: &TrainConfig,
    net: &NetConfig,
    pools: &DomainPools,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    net.validate()?;
    if pools.min_side() < net.image_size {
        return Err(Error::CropTooLarge { crop: net.image_size, height: pools.min_side(), width: pools.min_side() });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);

    let mut trainer = match resume {
        Some(dir) => {
            let mut t = Trainer::load(dir, config.adam)?;
            if t.bundle.config != *net {
                return Err(Error::Checkpoint {
                    path: dir.to_path_buf(),
                    reason: "network config differs from the run config".into(),
                });
            }
            truncate_log(&log_path, t.bundle.step)?;
            t.history.capacity = config.history_pool;
            t.history.seed = config.seed;
            t
        }
        None => {
            File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut t = Trainer::new(ModelBundle::init(net, config.seed)?, config.adam);
            t.history = FakeHistory::new(config.history_pool, config.seed);
            t
        }
    };

    let spe = steps_per_epoch(pools, config.batch_size);
    let mut total = spe * config.epochs as u64;
    if let Some(cap) = config.max_steps {
        total = total.min(cap);
    }
    let mut log = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut reports = Vec::new();
    while trainer.bundle.step < total {
        let step = trainer.bundle.step;
        let epoch = (step / spe) as usize;
        let lr = config.lr_at(epoch);
        let mut rng = SeededRng::derive(config.seed, &[BATCH_STREAM, step]);
        let batch = sample_unpaired_batch(pools, &mut rng, config.batch_size, net.image_size)?;
        let mut report = match trainer.step(&batch, config.lambda, config.gan_mode(), lr) {
            Ok(r) => r,
            Err(Error::NonFinite(detail)) => {
                let dump = out_dir.join(format!("diverged_step{step:08}"));
                dump_batch(&batch, &dump)?;
                return Err(Error::Diverged { step, detail, dump });
            }
            Err(e) => return Err(e),
        };
        report.epoch = epoch;
        let line = serde_json::to_string(&report).expect("loss reports serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        reports.push(report);
        let done = trainer.bundle.step;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < total {
            trainer.save(&out_dir.join(CHECKPOINT_DIR).join(format!("step{done:08}")))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&final_checkpoint)?;
    Ok(TrainOutcome { trainer, log_path, final_checkpoint, reports })
}

/// Keeps only log lines for steps before `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let mut kept = String::new();
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let r: LossReport = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if r.step < step {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn dump_batch(batch: &Batch, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (tag, t) in [("x", &batch.x), ("y", &batch.y), ("z", &batch.z)] {
        let clean = t.map(|v| if v.is_finite() { v } else { 0.0 });
        for (i, img) in tensor_to_images(&clean)?.iter().enumerate() {
            save_image(img, dir.join(format!("{tag}_{i:02}.png")))?;
        }
    }
    Ok(())
}
