//! The three-player model (generator, field predictor, discriminator), its
//! training step, checkpoints and evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{d_step_loss, gr_step_loss, Discriminator, NceHead};
use crate::config::{Ablation, ContentAnchor, TrainConfig};
use crate::error::{Error, Result};
use crate::gapbridge::{
    reg_loss_with, smoothness, total_registration_objective, warp, AlignLoss, RegNet,
};
use crate::metrics::{count_positive, end_point_error, psnr, ssim, FeatureDistance, MetricReport, PairMetrics};
use crate::nn::{Adam, Bound, ParamId};
use crate::protobank::{AggregatorHead, PrototypeBank, STYLE_DIM};
use crate::stylenet::{Generator, FEATURE_CHANNELS};
use crate::synthdata::Sample;
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointFile, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "printer-model";
pub const CHECKPOINT_VERSION: &str = "1";
pub const LOSS_CSV: &str = "losses.csv";
pub const LAST_CHECKPOINT: &str = "last";

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const NCE_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// A stacked mini-batch: images `[B, 3, H, W]`, fields `[B, 2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub fields: Option<Tensor>,
}

fn as_item(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [c, h, w] => Ok(t.reshape(&[1, c, h, w])?),
        [1, _, _, _] => Ok(t.clone()),
        ref s => Err(Error::Argument(format!("expected a single image or field, got {s:?}"))),
    }
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let stack = |f: &dyn Fn(&Sample) -> &Tensor| -> Result<Tensor> {
            let items = samples.iter().map(|s| as_item(f(s))).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack_batch(&items)?)
        };
        let fields = if samples.iter().all(|s| s.field.is_some()) {
            Some(stack(&|s| s.field.as_ref().expect("checked"))?)
        } else {
            None
        };
        Ok(Self {
            x: stack(&|s| &s.x)?,
            y: stack(&|s| &s.y)?,
            fields,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named loss values of one training step, in a fixed order per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: Vec<(&'static str, f64)>,
    /// Discriminator gradient norm of the D step (0 when it is skipped).
    pub d_grad_norm: f64,
    /// Field-predictor gradient norm of the joint step.
    pub r_grad_norm: f64,
}

impl StepReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// Style used for one forward pass and what training needs from it.
struct StyleOut<'t> {
    style: Var<'t>,
    distill: Option<Var<'t>>,
    /// Raw styles and their assignment, for the momentum update.
    momentum: Option<(Var<'t>, Var<'t>)>,
}

/// Everything an inference pass produces for a batch.
#[derive(Clone, Debug)]
pub struct Translation {
    pub generated: Tensor,
    pub field: Tensor,
    pub warped: Tensor,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub generated: Vec<Tensor>,
    pub warped: Vec<Tensor>,
    pub fields: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: TrainConfig,
    pub gen: Generator,
    pub reg: RegNet,
    pub disc: Discriminator,
    pub bank: PrototypeBank,
    pub nce: NceHead,
    vector: Option<ParamId>,
    align: AlignLoss,
    opt_gen: Adam,
    opt_reg: Adam,
    opt_disc: Adam,
    opt_bank: Adam,
    opt_nce: Adam,
    step: u64,
    epoch: usize,
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.run.seed, INIT_STREAM, 0);
        let gen = Generator::new(&mut rng);
        let reg = RegNet::new(&mut rng);
        let disc = Discriminator::new(&mut rng);
        let mut bank = PrototypeBank::new(config.style.prototypes, config.style.tau, &mut rng)?;
        bank.momentum = config.style.momentum;
        let ablation = config.run.ablation;
        let mut vector = None;
        if ablation == Ablation::LearnableVector {
            let v = Tensor::randn(&[1, STYLE_DIM], 0.5, &mut rng);
            vector = Some(bank.params_mut().add("vector", v));
        } else {
            let head = if ablation.uses_bank() {
                AggregatorHead::Mixture
            } else {
                AggregatorHead::Direct
            };
            bank.init_aggregator(FEATURE_CHANNELS, head, &mut rng);
        }
        let nce = NceHead::new(config.loss.nce_patches, config.loss.nce_temperature, &mut rng)?;
        let o = &config.optim;
        let adam = |p: &crate::nn::ParamSet, lr: f64| Adam::new(p, lr, o.beta1, o.beta2);
        Ok(Self {
            align: AlignLoss::new(config.loss.perceptual_seed),
            opt_gen: adam(gen.params(), o.lr_gr),
            opt_reg: adam(reg.params(), o.lr_gr),
            opt_disc: adam(disc.params(), o.lr_d),
            opt_bank: adam(bank.params(), o.lr_gr),
            opt_nce: adam(nce.params(), o.lr_gr),
            config,
            gen,
            reg,
            disc,
            bank,
            nce,
            vector,
            step: 0,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.config.run.ablation
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Changes the epoch target, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.run.epochs = epochs;
    }

    fn adversarial(&self) -> bool {
        match self.ablation() {
            Ablation::RegOnly => self.config.run.reg_only_adversarial,
            _ => true,
        }
    }

    /// Loss components reported by [`Self::train_step`] for this mode.
    pub fn loss_components(&self) -> Vec<&'static str> {
        let a = self.ablation();
        let mut names = Vec::new();
        if self.adversarial() {
            names.extend(["d", "adv"]);
        }
        names.extend(["cont", "align"]);
        if a.uses_registration() {
            names.push("reg");
            if a != Ablation::NoNmi {
                names.push("nmi");
            }
            names.push("smooth");
        }
        if a != Ablation::LearnableVector {
            names.push("distill");
        }
        names.push("total");
        names
    }

    fn vector_style<'t>(&self, bp: &Bound<'t>, n: usize) -> Result<Var<'t>> {
        let id = self.vector.ok_or_else(|| Error::State("no learnable style vector".into()))?;
        Ok(bp.var(id).broadcast_to(&[n, STYLE_DIM])?)
    }

    fn train_style<'t>(
        &self,
        gp: &Bound<'t>,
        bp: &Bound<'t>,
        y: Var<'t>,
        fc: Var<'t>,
    ) -> Result<StyleOut<'t>> {
        let n = y.shape()[0];
        if self.ablation() == Ablation::LearnableVector {
            return Ok(StyleOut {
                style: self.vector_style(bp, n)?,
                distill: None,
                momentum: None,
            });
        }
        let raw = self.gen.encode_style(gp, y)?;
        let (predicted, weights) = self.bank.aggregate(bp, fc)?;
        if self.ablation().uses_bank() {
            let alpha = self.bank.assign(bp, raw)?;
            let style = crate::protobank::quantize(alpha, bp.var(self.bank.prototype_id()))?;
            let weights = weights.ok_or_else(|| Error::State("mixture head expected".into()))?;
            let distill = weights.sub(alpha.stop_gradient())?.abs().mean();
            Ok(StyleOut {
                style,
                distill: Some(distill),
                momentum: Some((raw, alpha)),
            })
        } else {
            let distill = predicted.sub(raw.stop_gradient())?.abs().mean();
            Ok(StyleOut {
                style: raw,
                distill: Some(distill),
                momentum: None,
            })
        }
    }

    /// Style at inference: the aggregator, or the reference target in
    /// `direct_encoding` mode, or the learned vector.
    fn infer_style<'t>(
        &self,
        gp: &Bound<'t>,
        bp: &Bound<'t>,
        fc: Var<'t>,
        y: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let n = fc.shape()[0];
        match self.ablation() {
            Ablation::LearnableVector => self.vector_style(bp, n),
            Ablation::DirectEncoding => {
                let y = y.ok_or_else(|| {
                    Error::Argument("direct_encoding mode needs reference targets".into())
                })?;
                let alpha = self.bank.assign(bp, self.gen.encode_style(gp, y)?)?;
                crate::protobank::quantize(alpha, bp.var(self.bank.prototype_id()))
            }
            _ => Ok(self.bank.aggregate(bp, fc)?.0),
        }
    }

    /// One D step followed by one joint generator/field-predictor step and
    /// the prototype momentum update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let ablation = self.ablation();
        let uses_reg = ablation.uses_registration();
        let adversarial = self.adversarial();
        let step = self.step;
        let (n, _, h, w) = batch.x.dims4("train_step")?;
        let mut losses: Vec<(&'static str, f64)> = Vec::new();
        let check = |name: &'static str, v: f64, losses: &mut Vec<(&'static str, f64)>| {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: step as usize,
                    component: name.into(),
                    value: v,
                });
            }
            losses.push((name, v));
            Ok(())
        };

        let tape = Tape::new();
        let gp = self.gen.params().bind(&tape, true);
        let rp = self.reg.params().bind(&tape, uses_reg);
        let bp = self.bank.params().bind(&tape, true);
        let np = self.nce.params().bind(&tape, true);
        let x = tape.constant(batch.x.clone());
        let y = tape.constant(batch.y.clone());

        let content = self.gen.encode_content(&gp, x)?;
        let style = self.train_style(&gp, &bp, y, content.fc())?;
        let yhat = self.gen.decode(&gp, content.fc(), style.style)?;
        let (field, ytil) = if uses_reg {
            let a = if ablation == Ablation::GenRegistration { yhat } else { x };
            let field = self.reg.predict_field(&rp, a, y)?;
            if step == 0 && field.value().abs_max() != 0.0 {
                return Err(Error::State("untrained field predictor must output zero".into()));
            }
            (field, warp(yhat, field)?)
        } else {
            (tape.constant(Tensor::zeros(&[n, 2, h, w])), yhat)
        };

        // Which fake the discriminator judges: the warped image, except in
        // `no_adversarial` where the registration path stays out of the game.
        let fake = if ablation == Ablation::NoAdversarial { yhat } else { ytil };

        // Discriminator update on its own tape, fakes detached.
        let mut d_grad_norm = 0.0;
        if adversarial {
            let dtape = Tape::new();
            let dp = self.disc.params().bind(&dtape, true);
            let real = self.disc.logits(&dp, dtape.constant(batch.y.clone()))?;
            let fake = self.disc.logits(&dp, dtape.constant(fake.value()))?;
            let loss = d_step_loss(real, fake);
            check("d", loss.item(), &mut losses)?;
            let grads = dtape.backward(loss)?;
            d_grad_norm = dp.grad_norm(&grads);
            self.opt_disc.step(self.disc.params_mut(), &dp.grads(&grads));
        }

        // Joint step; the updated discriminator enters as constants.
        let mut total: Option<Var> = None;
        if adversarial {
            let dp = self.disc.params().bind(&tape, false);
            let adv = gr_step_loss(self.disc.logits(&dp, fake)?);
            check("adv", adv.item(), &mut losses)?;
            total = Some(adv);
        }
        let anchor = match self.config.loss.content_anchor {
            ContentAnchor::Source => content,
            ContentAnchor::Target => self.gen.encode_content(&gp, y)?,
        };
        let generated = self.gen.encode_content(&gp, yhat)?;
        let mut nce_rng = stream_rng(self.config.run.seed, NCE_STREAM, step);
        let cont = self.nce.loss(&np, &anchor, &generated, &mut nce_rng)?;
        check("cont", cont.item(), &mut losses)?;
        let align = self.align.loss(ytil, y)?;
        check("align", align.item(), &mut losses)?;
        let l = &self.config.loss;
        let reg = if uses_reg {
            let (reg, smooth) = if ablation == Ablation::NoNmi {
                let s = smoothness(field)?;
                (s.mul_scalar(l.lambda_smooth), s)
            } else {
                let t = reg_loss_with(ytil, y, field, l.gamma_nmi, l.lambda_smooth, l.nmi_bins, l.nmi_ramp)?;
                check("reg", t.total.item(), &mut losses)?;
                check("nmi", t.nmi.item(), &mut losses)?;
                (t.total, t.smoothness)
            };
            if ablation == Ablation::NoNmi {
                check("reg", reg.item(), &mut losses)?;
            }
            check("smooth", smooth.item(), &mut losses)?;
            reg
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let objective = total_registration_objective(cont, align, reg, &self.config.weights())?;
        let mut total = match total {
            Some(adv) => adv.add(objective)?,
            None => objective,
        };
        if let Some(d) = style.distill {
            check("distill", d.item(), &mut losses)?;
            total = total.add(d.mul_scalar(l.lambda_distill))?;
        }
        check("total", total.item(), &mut losses)?;

        let grads = tape.backward(total)?;
        let r_grad_norm = rp.grad_norm(&grads);
        self.opt_gen.step(self.gen.params_mut(), &gp.grads(&grads));
        if uses_reg {
            self.opt_reg.step(self.reg.params_mut(), &rp.grads(&grads));
        }
        self.opt_bank.step(self.bank.params_mut(), &bp.grads(&grads));
        self.opt_nce.step(self.nce.params_mut(), &np.grads(&grads));
        if let Some((raw, alpha)) = style.momentum {
            self.bank.renormalize()?;
            self.bank.momentum_update(&raw.value(), &alpha.value())?;
        }
        self.step += 1;
        Ok(StepReport {
            step,
            losses,
            d_grad_norm,
            r_grad_norm,
        })
    }

    /// Runs one epoch over `data` in a seeded order.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::Argument("no training pairs".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(self.config.run.seed, SHUFFLE_STREAM, self.epoch as u64));
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.run.batch_size) {
            let items: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            reports.push(self.train_step(&Batch::from_samples(&items)?)?);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// Trains up to `config.run.epochs`, writing the loss CSV and a
    /// checkpoint per epoch under `out` when given. `on_epoch` sees the
    /// finished epoch number and its reports.
    pub fn train(
        &mut self,
        data: &[Sample],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(usize, &[StepReport]),
    ) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            fs::write(dir.join("config.toml"), self.config.to_toml())
                .map_err(|e| Error::io(dir.join("config.toml"), e))?;
        }
        while self.epoch < self.config.run.epochs {
            let reports = self.train_epoch(data)?;
            if let Some(dir) = out {
                append_loss_csv(&dir.join(LOSS_CSV), &reports)?;
                self.save_epoch(dir)?;
            }
            on_epoch(self.epoch, &reports);
        }
        Ok(())
    }

    fn save_epoch(&self, dir: &Path) -> Result<()> {
        let name = format!("epoch-{:04}.ckpt", self.epoch);
        let file = self.to_checkpoint();
        write_checkpoint(&dir.join(&name), &file)?;
        write_checkpoint(&dir.join(LAST_CHECKPOINT), &file)?;
        let keep = self.config.run.keep_checkpoints;
        if keep > 0 && self.epoch > keep {
            let old = dir.join(format!("epoch-{:04}.ckpt", self.epoch - keep));
            if old.exists() {
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> CheckpointFile {
        let mut file = CheckpointFile::default();
        file.meta.push(("format".into(), CHECKPOINT_FORMAT.into()));
        file.meta.push(("version".into(), CHECKPOINT_VERSION.into()));
        file.meta.push(("epoch".into(), self.epoch.to_string()));
        file.meta.push(("step".into(), self.step.to_string()));
        file.meta.push(("config".into(), self.config.to_toml()));
        self.gen.params().export("gen.", &mut file);
        self.reg.params().export("reg.", &mut file);
        self.disc.params().export("disc.", &mut file);
        self.bank.params().export("proto.", &mut file);
        self.nce.params().export("nce.", &mut file);
        self.opt_gen.export("opt.gen.", self.gen.params(), &mut file);
        self.opt_reg.export("opt.reg.", self.reg.params(), &mut file);
        self.opt_disc.export("opt.disc.", self.disc.params(), &mut file);
        self.opt_bank.export("opt.proto.", self.bank.params(), &mut file);
        self.opt_nce.export("opt.nce.", self.nce.params(), &mut file);
        file
    }

    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Self> {
        let meta = |k: &str| {
            file.meta(k)
                .ok_or_else(|| Error::Version(format!("checkpoint lacks `{k}`")))
        };
        if meta("format")? != CHECKPOINT_FORMAT || meta("version")? != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "expected {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}, found {} version {}",
                meta("format")?,
                meta("version")?
            )));
        }
        let config = TrainConfig::from_toml(meta("config")?)?;
        let mut model = Self::new(config)?;
        let parse = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Version(format!("bad `{k}` value")))
        };
        model.epoch = parse("epoch")? as usize;
        model.step = parse("step")?;
        let mismatch = |e: crate::tensor::TensorError| Error::Version(format!("checkpoint does not fit its config: {e}"));
        model.gen.params_mut().import("gen.", file).map_err(mismatch)?;
        model.reg.params_mut().import("reg.", file).map_err(mismatch)?;
        model.disc.params_mut().import("disc.", file).map_err(mismatch)?;
        model.bank.params_mut().import("proto.", file).map_err(mismatch)?;
        model.nce.params_mut().import("nce.", file).map_err(mismatch)?;
        model.opt_gen.import("opt.gen.", model.gen.params(), file).map_err(mismatch)?;
        model.opt_reg.import("opt.reg.", model.reg.params(), file).map_err(mismatch)?;
        model.opt_disc.import("opt.disc.", model.disc.params(), file).map_err(mismatch)?;
        model.opt_bank.import("opt.proto.", model.bank.params(), file).map_err(mismatch)?;
        model.opt_nce.import("opt.nce.", model.nce.params(), file).map_err(mismatch)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_checkpoint(path, &self.to_checkpoint())?)
    }

    /// Loads a checkpoint file, or `<dir>/last` when given a run directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path: PathBuf = if path.is_dir() {
            path.join(LAST_CHECKPOINT)
        } else {
            path.to_path_buf()
        };
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
        let file = read_checkpoint(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        Self::from_checkpoint(&file)
    }

    /// Generated, field and warped images for a batch. `y` is the target;
    /// it drives the field and, in `direct_encoding` mode, the style.
    pub fn translate(&self, x: &Tensor, y: Option<&Tensor>) -> Result<Translation> {
        let tape = Tape::new();
        let gp = self.gen.params().bind(&tape, false);
        let rp = self.reg.params().bind(&tape, false);
        let bp = self.bank.params().bind(&tape, false);
        let xv = tape.constant(x.clone());
        let yv = y.map(|t| tape.constant(t.clone()));
        let content = self.gen.encode_content(&gp, xv)?;
        let style = self.infer_style(&gp, &bp, content.fc(), yv)?;
        let yhat = self.gen.decode(&gp, content.fc(), style)?;
        let (n, _, h, w) = x.dims4("translate")?;
        let (field, warped) = match yv {
            Some(yv) if self.ablation().uses_registration() => {
                let a = if self.ablation() == Ablation::GenRegistration { yhat } else { xv };
                let f = self.reg.predict_field(&rp, a, yv)?;
                (f.value(), warp(yhat, f)?.value())
            }
            _ => (Tensor::zeros(&[n, 2, h, w]), yhat.value()),
        };
        Ok(Translation {
            generated: yhat.value(),
            field,
            warped,
        })
    }

    /// Per-pair metrics plus set-level feature distances (when at least 16
    /// pairs are given).
    pub fn evaluate(&self, samples: &[Sample]) -> Result<Evaluation> {
        let mut rows = Vec::with_capacity(samples.len());
        let (mut generated, mut warped, mut fields) = (Vec::new(), Vec::new(), Vec::new());
        let mut shrunk = false;
        for chunk in samples.chunks(self.config.run.batch_size) {
            let items: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::from_samples(&items)?;
            let out = self.translate(&batch.x, Some(&batch.y))?;
            for (i, s) in chunk.iter().enumerate() {
                let g = out.generated.batch_item(i)?;
                let wp = out.warped.batch_item(i)?;
                let f = out.field.batch_item(i)?;
                let y = as_item(&s.y)?;
                let x = as_item(&s.x)?;
                let content = ssim(&x, &g)?;
                let stain = ssim(&y, &g)?;
                let reg = ssim(&wp, &y)?;
                shrunk |= content.shrunk;
                let tape = Tape::new();
                let roughness = smoothness(tape.constant(f.clone()))?.item();
                let epe = match &s.field {
                    Some(star) => Some(end_point_error(&f, &as_item(star)?)?),
                    None => None,
                };
                rows.push(PairMetrics {
                    content_ssim: content.value,
                    content_psnr: psnr(&x, &g)?,
                    stain_ssim: stain.value,
                    stain_psnr: psnr(&y, &g)?,
                    reg_ssim: reg.value,
                    reg_psnr: psnr(&wp, &y)?,
                    epe,
                    roughness,
                    positive_count_src: count_positive(&y)?,
                    positive_count_gen: count_positive(&g)?,
                });
                generated.push(g);
                warped.push(wp);
                fields.push(f);
            }
        }
        let (rfd_gen, rfd_warped) = if samples.len() >= crate::metrics::FEATURE_DISTANCE_MIN_IMAGES {
            let fd = FeatureDistance::default();
            let targets: Vec<Tensor> = samples.iter().map(|s| as_item(&s.y)).collect::<Result<_>>()?;
            (
                Some(fd.distance(&generated, &targets)?),
                Some(fd.distance(&warped, &targets)?),
            )
        } else {
            (None, None)
        };
        Ok(Evaluation {
            report: MetricReport::new(rows, rfd_gen, rfd_warped, shrunk)?,
            generated,
            warped,
            fields,
        })
    }
}

/// Appends `step,component,value` rows, writing the header on creation.
pub fn append_loss_csv(path: &Path, reports: &[StepReport]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("step,component,value\n");
    }
    for r in reports {
        for (name, v) in &r.losses {
            text.push_str(&format!("{},{name},{v}\n", r.step));
        }
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
