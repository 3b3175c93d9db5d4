//! Pre-fusion pretraining, joint adversarial training and ablation runs.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bind, Graph, Method, Optimizer, ParamStore, Var};
use crate::checkpoint::{
    fingerprint, optimizer_state, params_table, restore_optimizer, Checkpoint,
};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, LsganLabels};
use crate::metrics::{self, MetricReport, Reduced};
use crate::model::{AblationCase, Batch, FuseMode, ModelConfig, PcGans};
use crate::raster::{Raster, Sample};
use crate::resample::exp_upsample;

/// Order of the four updates inside one joint batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOrder {
    DiscriminatorsFirst,
    GeneratorsFirst,
}

impl fmt::Display for UpdateOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateOrder::DiscriminatorsFirst => "disc-first",
            UpdateOrder::GeneratorsFirst => "gen-first",
        })
    }
}

impl FromStr for UpdateOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "disc-first" => Ok(UpdateOrder::DiscriminatorsFirst),
            "gen-first" => Ok(UpdateOrder::GeneratorsFirst),
            other => Err(Error::Config(format!("unknown update order {other:?}, expected disc-first|gen-first"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// PAN-side crop size; samples larger than this are randomly cropped.
    pub patch_size: usize,
    /// Epochs of joint training.
    pub epochs: usize,
    /// Epochs of pre-fusion pretraining run before the joint phase.
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub lr_halving_period: usize,
    pub weights: LossWeights,
    pub labels: LsganLabels,
    pub seed: u64,
    pub case: AblationCase,
    pub model: ModelConfig,
    /// Adds the pre-fusion adversarial term against the coarse
    /// discriminator to the joint generator update.
    pub dmg_adv_joint: bool,
    pub order: UpdateOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            patch_size: 64,
            epochs: 40,
            pretrain_epochs: 10,
            lr: 2e-4,
            disc_lr: 2e-4,
            lr_halving_period: 15,
            weights: LossWeights::default(),
            labels: LsganLabels::default(),
            seed: 0,
            case: AblationCase::Baseline,
            model: ModelConfig::default(),
            dmg_adv_joint: false,
            order: UpdateOrder::DiscriminatorsFirst,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in the order they are listed.
pub const CONFIG_KEYS: [&str; 25] = [
    "batch",
    "patch",
    "epochs",
    "pretrain_epochs",
    "lr",
    "disc_lr",
    "lr_halving_period",
    "lambda1",
    "lambda2",
    "label_a",
    "label_b",
    "label_c",
    "seed",
    "case",
    "radius",
    "guided_lambda",
    "nblocks",
    "encoder_depth",
    "ratio",
    "pan_gain",
    "guidance",
    "init",
    "disc_init",
    "dmg_adv_joint",
    "update_order",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch" => self.batch_size = parse(key, value)?,
            "patch" => self.patch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "disc_lr" => self.disc_lr = parse(key, value)?,
            "lr_halving_period" => self.lr_halving_period = parse(key, value)?,
            "lambda1" => self.weights.cycle = parse(key, value)?,
            "lambda2" => self.weights.reconstruction = parse(key, value)?,
            "label_a" => self.labels.target = parse(key, value)?,
            "label_b" => self.labels.fake = parse(key, value)?,
            "label_c" => self.labels.real = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "case" => self.case = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "radius" => self.model.guided.radius = parse(key, value)?,
            "guided_lambda" => self.model.guided.lambda = parse(key, value)?,
            "nblocks" => self.model.block.residual_blocks = parse(key, value)?,
            "encoder_depth" => self.model.block.depth = parse(key, value)?,
            "ratio" => self.model.ratio = parse(key, value)?,
            "pan_gain" => self.model.pan_gain = parse(key, value)?,
            "guidance" => self.model.guidance = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "init" => self.model.init = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "disc_init" => self.model.disc_init = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "dmg_adv_joint" => self.dmg_adv_joint = parse_bool(key, value)?,
            "update_order" => self.order = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let v: [String; 25] = [
            self.batch_size.to_string(),
            self.patch_size.to_string(),
            self.epochs.to_string(),
            self.pretrain_epochs.to_string(),
            self.lr.to_string(),
            self.disc_lr.to_string(),
            self.lr_halving_period.to_string(),
            self.weights.cycle.to_string(),
            self.weights.reconstruction.to_string(),
            self.labels.target.to_string(),
            self.labels.fake.to_string(),
            self.labels.real.to_string(),
            self.seed.to_string(),
            self.case.to_string(),
            self.model.guided.radius.to_string(),
            self.model.guided.lambda.to_string(),
            self.model.block.residual_blocks.to_string(),
            self.model.block.depth.to_string(),
            self.model.ratio.to_string(),
            self.model.pan_gain.to_string(),
            self.model.guidance.to_string(),
            self.model.init.to_string(),
            self.model.disc_init.to_string(),
            self.dmg_adv_joint.to_string(),
            self.order.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch", self.batch_size),
            ("patch", self.patch_size),
            ("lr_halving_period", self.lr_halving_period),
            ("ratio", self.model.ratio),
            ("radius", self.model.guided.radius),
            ("encoder_depth", self.model.block.depth),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        for (k, v) in [("lr", self.lr), ("disc_lr", self.disc_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.weights.cycle >= 0.0 && self.weights.reconstruction >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be nonnegative".into()));
        }
        if !(self.model.guided.lambda >= 0.0) {
            return Err(Error::Config("guided_lambda must be nonnegative".into()));
        }
        self.model.scales().map_err(|e| Error::Config(e.to_string()))?;
        if self.patch_size % self.model.ratio != 0 {
            return Err(Error::Config(format!("patch {} is not a multiple of ratio {}", self.patch_size, self.model.ratio)));
        }
        Ok(())
    }

    /// Fingerprint of everything that shapes the model and its updates;
    /// epoch counts are excluded so runs can be extended.
    pub fn fingerprint(&self) -> u64 {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| !matches!(*k, "epochs" | "pretrain_epochs"))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fingerprint(&text)
    }

    /// Learning rate during epoch `epoch` (0-based) of a phase.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// One logged loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub loss: &'static str,
    pub value: f64,
}

impl LogRow {
    pub const HEADER: [&'static str; 5] = ["phase", "epoch", "step", "loss", "value"];

    pub fn fields(&self) -> [String; 5] {
        [
            self.phase.to_string(),
            self.epoch.to_string(),
            self.step.to_string(),
            self.loss.to_string(),
            format!("{:e}", self.value),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Dmg,
    C2f,
    F2c,
    Dc,
    Df,
}

impl Part {
    const ALL: [Part; 5] = [Part::Dmg, Part::C2f, Part::F2c, Part::Dc, Part::Df];

    fn name(self) -> &'static str {
        match self {
            Part::Dmg => "dmg",
            Part::C2f => "c2f",
            Part::F2c => "f2c",
            Part::Dc => "dc",
            Part::Df => "df",
        }
    }
}

/// Per-batch tape with cached forward passes. A cached value stays valid
/// while the update counters of the networks it depends on are unchanged.
struct Tape<'b> {
    g: Graph<f32>,
    batch: &'b Batch<f32>,
    reference: Var,
    prefused: Option<(u64, Var, Var)>,
    fine: Option<((u64, u64), Var)>,
    reduced: Option<(u64, Var)>,
}

/// Owns the model, its parameters and optimizers, and progress counters.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: PcGans,
    store: ParamStore<f32>,
    optimizers: [Option<Optimizer<f32>>; 5],
    pretrain_done: usize,
    joint_done: usize,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = PcGans::new(&mut store, cfg.model, cfg.case, cfg.seed)?;
        let parts = cfg.case.parts();
        let present = [parts.dmg, parts.c2f, parts.f2c, parts.dc, parts.df];
        let optimizers = std::array::from_fn(|i| {
            let part = Part::ALL[i];
            let method = match part {
                Part::Dc | Part::Df => Method::Sgd,
                _ => Method::ADAM,
            };
            present[i].then(|| Optimizer::new(method, store.group(&format!("{}.", part.name())), &store))
        });
        Ok(Trainer { cfg, model, store, optimizers, pretrain_done: 0, joint_done: 0, log: Vec::new() })
    }

    /// Rebuilds a trainer from a checkpoint written under the same
    /// configuration (epoch counts may differ).
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        if ckpt.config_hash != t.cfg.fingerprint() {
            return Err(Error::Config("checkpoint was written under a different configuration".into()));
        }
        ckpt.restore_params(&mut t.store)?;
        for (i, part) in Part::ALL.iter().enumerate() {
            if let Some(opt) = t.optimizers[i].as_mut() {
                let state = ckpt
                    .optimizer(part.name())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer {}", part.name())))?;
                restore_optimizer(state, opt, &t.store)?;
            }
        }
        t.pretrain_done = ckpt.pretrain_epochs as usize;
        t.joint_done = ckpt.joint_epochs as usize;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &PcGans {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn progress(&self) -> (usize, usize) {
        (self.pretrain_done, self.joint_done)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let optimizers = Part::ALL
            .iter()
            .zip(&self.optimizers)
            .filter_map(|(p, o)| o.as_ref().map(|o| optimizer_state(p.name(), o, &self.store)))
            .collect();
        Checkpoint {
            config_hash: self.cfg.fingerprint(),
            pretrain_epochs: self.pretrain_done as u32,
            joint_epochs: self.joint_done as u32,
            params: params_table(&self.store),
            optimizers,
        }
    }

    /// Runs the remaining pretraining epochs, then the remaining joint
    /// epochs, calling `after_epoch` once per finished epoch.
    pub fn run(&mut self, data: &[Sample], mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.pretrain_done < self.pretrain_target() {
            self.epoch(data, Phase::Pretrain)?;
            after_epoch(self)?;
        }
        while self.joint_done < self.cfg.epochs {
            self.epoch(data, Phase::Joint)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    fn pretrain_target(&self) -> usize {
        if self.model.dmg.is_some() {
            self.cfg.pretrain_epochs
        } else {
            0
        }
    }

    fn steps(&self, part: Part) -> u64 {
        self.optimizers[part as usize].as_ref().map_or(0, |o| o.steps())
    }

    /// One pass over the shuffled data.
    pub fn epoch(&mut self, data: &[Sample], phase: Phase) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if data.iter().any(|s| s.reference.is_none()) {
            return Err(Error::invalid("training samples need references"));
        }
        let epoch = match phase {
            Phase::Pretrain => self.pretrain_done,
            Phase::Joint => self.joint_done,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((phase as u64 + 1) << 32) | epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let crops = order.iter().map(|&i| crop(&data[i], self.cfg.patch_size, &mut rng)).collect::<Result<Vec<_>>>()?;
        let lr = self.cfg.lr_at(self.cfg.lr, epoch);
        let disc_lr = self.cfg.lr_at(self.cfg.disc_lr, epoch);
        let with_average = self.model.dmg.is_none();
        for (step, chunk) in crops.chunks(self.cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::<f32>::new(&refs, with_average)?;
            let ctx = StepCtx { phase, epoch, step, lr, disc_lr };
            match phase {
                Phase::Pretrain => self.pretrain_batch(&batch, ctx)?,
                Phase::Joint => self.joint_batch(&batch, ctx)?,
            }
        }
        match phase {
            Phase::Pretrain => self.pretrain_done += 1,
            Phase::Joint => self.joint_done += 1,
        }
        Ok(())
    }

    fn tape<'b>(&self, batch: &'b Batch<f32>) -> Tape<'b> {
        let mut g = Graph::new();
        let reference = g.constant(batch.reference.clone().expect("checked by epoch"));
        Tape { g, batch, reference, prefused: None, fine: None, reduced: None }
    }

    fn pretrain_batch(&mut self, batch: &Batch<f32>, ctx: StepCtx) -> Result<()> {
        let mut tape = self.tape(batch);
        if self.model.dc.is_some() {
            self.step_dc(&mut tape, ctx, CoarseRoles::PrefusionFake)?;
        }
        self.step_dmg(&mut tape, ctx)
    }

    fn joint_batch(&mut self, batch: &Batch<f32>, ctx: StepCtx) -> Result<()> {
        let mut tape = self.tape(batch);
        let m = &self.model;
        if m.c2f.is_none() && m.f2c.is_none() {
            return self.step_dmg(&mut tape, ctx);
        }
        let (has_dc, has_df, has_f2c, has_c2f) = (m.dc.is_some(), m.df.is_some(), m.f2c.is_some(), m.c2f.is_some());
        let discriminators = |t: &mut Self, tape: &mut Tape| -> Result<()> {
            if has_dc && has_f2c {
                t.step_dc(tape, ctx, CoarseRoles::ReducedFake)?;
            }
            if has_df && has_c2f {
                t.step_df(tape, ctx)?;
            }
            Ok(())
        };
        let generators = |t: &mut Self, tape: &mut Tape| -> Result<()> {
            if has_f2c {
                t.step_f2c(tape, ctx)?;
            }
            if has_c2f {
                t.step_c2f(tape, ctx)?;
            } else if t.model.dmg.is_some() {
                t.step_dmg(tape, ctx)?;
            }
            Ok(())
        };
        match self.cfg.order {
            UpdateOrder::DiscriminatorsFirst => {
                discriminators(self, &mut tape)?;
                generators(self, &mut tape)
            }
            UpdateOrder::GeneratorsFirst => {
                generators(self, &mut tape)?;
                discriminators(self, &mut tape)
            }
        }
    }

    /// Pre-fused image and its coarse version, trainable.
    fn prefused(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let version = self.steps(Part::Dmg);
        if let Some((v, f, c)) = tape.prefused {
            if v == version {
                return Ok((f, c));
            }
        }
        let f = self.model.prefuse(&mut tape.g, &self.store, Bind::Train, tape.batch)?;
        let c = self.model.coarse_of(&mut tape.g, f)?;
        tape.prefused = Some((version, f, c));
        Ok((f, c))
    }

    /// Coarse-to-fine output on the pre-fused image, trainable.
    fn fine(&self, tape: &mut Tape) -> Result<Var> {
        let version = (self.steps(Part::Dmg), self.steps(Part::C2f));
        if let Some((v, f)) = tape.fine {
            if v == version {
                return Ok(f);
            }
        }
        let (f, c) = self.prefused(tape)?;
        let fine = self.model.compensate(&mut tape.g, &self.store, Bind::Train, f, c)?;
        tape.fine = Some((version, fine));
        Ok(fine)
    }

    /// Fine-to-coarse output on the reference, trainable; without that
    /// generator, the plain coarse reference.
    fn reduced(&self, tape: &mut Tape) -> Result<Var> {
        let version = self.steps(Part::F2c);
        if let Some((v, r)) = tape.reduced {
            if v == version {
                return Ok(r);
            }
        }
        let r = match &self.model.f2c {
            Some(_) => self.model.reduce_fine(&mut tape.g, &self.store, Bind::Train, tape.reference)?,
            None => self.model.coarse_of(&mut tape.g, tape.reference)?,
        };
        tape.reduced = Some((version, r));
        Ok(r)
    }

    fn record(&mut self, ctx: StepCtx, loss: &'static str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{loss} became {value} at {} epoch {} step {}",
                ctx.phase, ctx.epoch, ctx.step
            )));
        }
        self.log.push(LogRow { phase: ctx.phase, epoch: ctx.epoch, step: ctx.step, loss, value });
        Ok(())
    }

    /// Backpropagates `loss` and updates the listed networks.
    fn update(&mut self, tape: &Tape, loss: Var, parts: &[Part], lr: f64) -> Result<()> {
        let grads = tape.g.backward(loss)?;
        self.store.zero_grad();
        self.store.accumulate(&grads);
        for &p in parts {
            if let Some(opt) = self.optimizers[p as usize].as_mut() {
                opt.step(&mut self.store, lr)?;
            }
        }
        Ok(())
    }

    fn step_dc(&mut self, tape: &mut Tape, ctx: StepCtx, roles: CoarseRoles) -> Result<()> {
        let (_, c) = self.prefused(tape)?;
        let r = self.reduced(tape)?;
        let (c, r) = (tape.g.detach(c), tape.g.detach(r));
        let dc = self.model.dc.as_ref().expect("caller checked");
        let sc = dc.forward(&mut tape.g, &self.store, Bind::Train, c)?;
        let sr = dc.forward(&mut tape.g, &self.store, Bind::Train, r)?;
        let labels = self.cfg.labels;
        let (loss, name) = match roles {
            CoarseRoles::PrefusionFake => (losses::coarse_disc_vs_prefusion(&mut tape.g, sc, sr, labels)?, "d_c_dmg"),
            CoarseRoles::ReducedFake => (losses::coarse_disc_vs_reduced(&mut tape.g, sc, sr, labels)?, "d_c_f2c"),
        };
        self.record(ctx, name, tape.g.scalar(loss) as f64)?;
        self.update(tape, loss, &[Part::Dc], ctx.disc_lr)
    }

    fn step_df(&mut self, tape: &mut Tape, ctx: StepCtx) -> Result<()> {
        let fine = self.fine(tape)?;
        let fake = tape.g.detach(fine);
        let df = self.model.df.as_ref().expect("caller checked");
        let sr = df.forward(&mut tape.g, &self.store, Bind::Train, tape.reference)?;
        let sf = df.forward(&mut tape.g, &self.store, Bind::Train, fake)?;
        let loss = losses::discriminator(&mut tape.g, sr, sf, self.cfg.labels)?;
        self.record(ctx, "d_f", tape.g.scalar(loss) as f64)?;
        self.update(tape, loss, &[Part::Df], ctx.disc_lr)
    }

    /// Pre-fusion update: supervised loss plus, when the coarse
    /// discriminator exists, its adversarial term.
    fn step_dmg(&mut self, tape: &mut Tape, ctx: StepCtx) -> Result<()> {
        let (f, c) = self.prefused(tape)?;
        let sup = losses::mse(&mut tape.g, f, tape.reference)?;
        self.record(ctx, "dmg_sup", tape.g.scalar(sup) as f64)?;
        let loss = match &self.model.dc {
            Some(dc) => {
                let s = dc.forward(&mut tape.g, &self.store, Bind::Frozen, c)?;
                let adv = losses::generator_adv(&mut tape.g, s, self.cfg.labels);
                self.record(ctx, "dmg_adv", tape.g.scalar(adv) as f64)?;
                tape.g.add(sup, adv)?
            }
            None => sup,
        };
        self.update(tape, loss, &[Part::Dmg], ctx.lr)
    }

    fn step_f2c(&mut self, tape: &mut Tape, ctx: StepCtx) -> Result<()> {
        let red = self.reduced(tape)?;
        let (_, c) = self.prefused(tape)?;
        let target = tape.g.detach(c);
        let g = &mut tape.g;
        let adv = match &self.model.dc {
            Some(dc) => {
                let s = dc.forward(g, &self.store, Bind::Frozen, red)?;
                losses::generator_adv(g, s, self.cfg.labels)
            }
            None => g.constant(crate::autodiff::Tensor::scalar(0.0)),
        };
        let cyc = match &self.model.c2f {
            Some(_) => {
                let back = self.model.compensate(g, &self.store, Bind::Frozen, tape.reference, red)?;
                losses::half_mse(g, back, tape.reference)?
            }
            None => g.constant(crate::autodiff::Tensor::scalar(0.0)),
        };
        let rec = losses::half_mse(g, red, target)?;
        let loss = losses::joint(g, adv, cyc, rec, self.cfg.weights)?;
        let vals = [g.scalar(adv), g.scalar(cyc), g.scalar(rec), g.scalar(loss)];
        for (name, v) in ["f2c_adv", "f2c_cyc", "f2c_rec", "f2c_jc"].into_iter().zip(vals) {
            self.record(ctx, name, v as f64)?;
        }
        self.update(tape, loss, &[Part::F2c], ctx.lr)
    }

    fn step_c2f(&mut self, tape: &mut Tape, ctx: StepCtx) -> Result<()> {
        let fine = self.fine(tape)?;
        let (_, c) = self.prefused(tape)?;
        let g = &mut tape.g;
        let adv = match &self.model.df {
            Some(df) => {
                let s = df.forward(g, &self.store, Bind::Frozen, fine)?;
                losses::generator_adv(g, s, self.cfg.labels)
            }
            None => g.constant(crate::autodiff::Tensor::scalar(0.0)),
        };
        let cyc = match &self.model.f2c {
            Some(_) => {
                let back = self.model.reduce_fine(g, &self.store, Bind::Frozen, fine)?;
                losses::half_mse(g, back, c)?
            }
            None => g.constant(crate::autodiff::Tensor::scalar(0.0)),
        };
        let rec = losses::half_mse(g, fine, tape.reference)?;
        let mut loss = losses::joint(g, adv, cyc, rec, self.cfg.weights)?;
        let vals = [g.scalar(adv), g.scalar(cyc), g.scalar(rec), g.scalar(loss)];
        if self.cfg.dmg_adv_joint && self.model.dmg.is_some() {
            if let Some(dc) = &self.model.dc {
                let s = dc.forward(g, &self.store, Bind::Frozen, c)?;
                let extra = losses::generator_adv(g, s, self.cfg.labels);
                loss = g.add(loss, extra)?;
                let v = g.scalar(extra);
                self.record(ctx, "dmg_adv", v as f64)?;
            }
        }
        for (name, v) in ["c2f_adv", "c2f_cyc", "c2f_rec", "c2f_jc"].into_iter().zip(vals) {
            self.record(ctx, name, v as f64)?;
        }
        self.update(tape, loss, &[Part::C2f, Part::Dmg], ctx.lr)
    }

    /// Final products of the trained variant for `samples`.
    pub fn fuse(&self, samples: &[Sample], mode: FuseMode) -> Result<Vec<Raster>> {
        fuse_samples(&self.model, &self.store, samples, mode)
    }
}

#[derive(Debug, Clone, Copy)]
struct StepCtx {
    phase: Phase,
    epoch: usize,
    step: usize,
    lr: f64,
    disc_lr: f64,
}

#[derive(Debug, Clone, Copy)]
enum CoarseRoles {
    PrefusionFake,
    ReducedFake,
}

/// Random ratio-aligned crop with PAN side `patch`; samples already that
/// size are returned unchanged.
fn crop(s: &Sample, patch: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (s.pan.height(), s.pan.width());
    if h < patch || w < patch {
        return Err(Error::size(format!("sample {h}x{w} is smaller than patch {patch}")));
    }
    if h == patch && w == patch {
        return Ok(s.clone());
    }
    let r = s.ratio;
    let y = rng.random_range(0..=(h - patch) / r) * r;
    let x = rng.random_range(0..=(w - patch) / r) * r;
    let reference = s.reference.as_ref().map(|t| t.crop(y, x, patch, patch)).transpose()?;
    Sample::new(s.pan.crop(y, x, patch, patch)?, s.ms.crop(y / r, x / r, patch / r, patch / r)?, reference, r)
}

/// Inference over samples in small batches.
pub fn fuse_samples(model: &PcGans, store: &ParamStore<f32>, samples: &[Sample], mode: FuseMode) -> Result<Vec<Raster>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::new(&refs, model.dmg.is_none())?;
        out.extend(model.fuse(store, &batch, mode)?);
    }
    Ok(out)
}

/// EXP interpolation of every sample's MS.
pub fn exp_products(samples: &[Sample]) -> Result<Vec<Raster>> {
    samples.iter().map(|s| exp_upsample(&s.ms, s.ratio)).collect()
}

/// With-reference indices of `products` against the sample references.
pub fn assess(products: &[Raster], samples: &[Sample]) -> Result<Vec<Reduced>> {
    if products.len() != samples.len() {
        return Err(Error::invalid(format!("{} products for {} samples", products.len(), samples.len())));
    }
    products
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            let reference = s.reference.as_ref().ok_or_else(|| Error::invalid("sample lacks a reference"))?;
            metrics::reduced(p, reference, s.ratio, metrics::DEFAULT_WINDOW)
        })
        .collect()
}

/// Metrics rows for one method over named samples.
pub fn report_rows(names: &[String], method: &str, indices: &[Reduced]) -> Vec<MetricReport> {
    names
        .iter()
        .zip(indices)
        .map(|(n, r)| MetricReport { sample: n.clone(), method: method.to_string(), reduced: Some(*r), no_reference: None })
        .collect()
}

/// Trains `case` from scratch and returns the trainer with its model.
pub fn train_case(case: AblationCase, train: &[Sample], cfg: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(TrainConfig { case, ..cfg.clone() })?;
    t.run(train, |_| Ok(()))?;
    Ok(t)
}

/// Trains `case` and evaluates its final product on `test`.
pub fn run_ablation(case: AblationCase, train: &[Sample], test: &[Sample], cfg: &TrainConfig) -> Result<Vec<Reduced>> {
    let t = train_case(case, train, cfg)?;
    assess(&t.fuse(test, FuseMode::Full)?, test)
}

/// Pretraining alone; the checkpoint records zero joint epochs.
pub fn pretrain_dmg(data: &[Sample], cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg.clone())?;
    while t.pretrain_done < t.pretrain_target() {
        t.epoch(data, Phase::Pretrain)?;
    }
    Ok(t.checkpoint())
}

/// Joint training starting from `init`.
pub fn joint_train(data: &[Sample], cfg: &TrainConfig, init: &Checkpoint) -> Result<Checkpoint> {
    let mut t = Trainer::resume(cfg.clone(), init)?;
    t.run(data, |_| Ok(()))?;
    Ok(t.checkpoint())
}
