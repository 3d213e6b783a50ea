use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::embedder::build_identity_embedder;
use super::eval::evaluate_fer;
use super::optim::{cosine_lr, Adam};
use crate::checkpoint::save_model;
use crate::data::{apply_transform, derive_seed, Sample, Transform};
use crate::error::{config_err, input_err, Error, Result};
use crate::losses::{
    classification_loss, gan_loss_discriminator, gan_loss_generator, identity_loss, lambda4_schedule,
    reconstruction_loss, total_generator_loss, IdentityEmbedder, LossComponents, LossReport,
};
use crate::model::{Discriminator, FersnetModel, Generator};
use crate::nn::param::{param_hash, Module};
use crate::nn::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub rows: Vec<StepRow>,
    pub epoch_eval: Vec<EpochEval>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    /// Updates verified by the parameter-hash audit.
    pub audited_updates: usize,
}

pub const HISTORY_HEADER: &str = "step,epoch,lr,lambda4,cls,gan_g,gan_d,rec,cyc,idt,total";

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            let p = &r.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.step, r.epoch, r.lr, p.lambda4, p.cls, p.gan_g, p.gan_d, p.rec, p.cyc, p.idt, p.total
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epoch_eval.last().map(|e| e.accuracy)
    }
}

pub struct TrainOutcome {
    pub model: FersnetModel<f32>,
    pub discriminator: Option<Discriminator<f32>>,
    pub history: RunHistory,
}

/// Per-subject image indices by class, for drawing same-subject targets.
struct Pairing {
    by_subject: BTreeMap<usize, BTreeMap<usize, Vec<usize>>>,
}

impl Pairing {
    fn new(samples: &[Sample], classes: usize) -> Result<Self> {
        let mut by_subject: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        let mut counts = vec![0; classes];
        for (i, s) in samples.iter().enumerate() {
            by_subject.entry(s.subject).or_default().entry(s.expression).or_default().push(i);
            counts[s.expression] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(config_err!("class {c} has no training images, so no synthesis target can be paired"));
        }
        Ok(Pairing { by_subject })
    }

    /// Uniform over the classes this subject has images of, then uniform over
    /// that subject's images of the class.
    fn draw(&self, subject: usize, rng: &mut impl Rng) -> usize {
        let classes = &self.by_subject[&subject];
        let (_, imgs) = classes.iter().nth(rng.random_range(0..classes.len())).expect("non-empty");
        imgs[rng.random_range(0..imgs.len())]
    }
}

pub(crate) struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub target: Option<(Tensor<f32>, Vec<usize>)>,
}

/// Augment a batch; source and paired target share one transform.
fn assemble(
    samples: &[Sample],
    idx: &[usize],
    pairing: Option<&Pairing>,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Batch> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ts = Vec::new();
    let mut tl = Vec::new();
    for (j, &i) in idx.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream, j as u64));
        let t = Transform::draw(&cfg.data, &mut rng);
        xs.push(apply_transform(&samples[i].image, &t, &cfg.data)?);
        if let Some(p) = pairing {
            let k = p.draw(samples[i].subject, &mut rng);
            ts.push(apply_transform(&samples[k].image, &t, &cfg.data)?);
            tl.push(samples[k].expression);
        }
    }
    let x = Tensor::stack(&xs.iter().collect::<Vec<_>>())?;
    let target = if pairing.is_some() { Some((Tensor::stack(&ts.iter().collect::<Vec<_>>())?, tl)) } else { None };
    Ok(Batch { x, labels: idx.iter().map(|&i| samples[i].expression).collect(), target })
}

/// Batches of the shuffled index order for one epoch. A trailing batch of one
/// is dropped (batch norm needs two).
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 31, epoch as u64)));
    order.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

fn diverged(err: Error, step: usize, last_good: &FersnetModel<f32>, out_dir: Option<&Path>) -> Error {
    match err {
        Error::NonFinite { context, .. } => {
            let path = out_dir.and_then(|d| {
                let p = d.join("last_good.ckpt");
                save_model(&p, last_good, serde_json::json!({ "diverged_at_step": step })).ok().map(|_| p)
            });
            Error::TrainingDiverged { step, term: context, last_good: path }
        }
        other => other,
    }
}

struct Players<'a> {
    model: FersnetModel<f32>,
    disc: Option<Discriminator<f32>>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    embedder: Option<Box<dyn IdentityEmbedder<f32> + 'a>>,
}

/// One alternating update. Returns the step's loss report.
fn step(p: &mut Players, batch: &Batch, cfg: &TrainConfig, lr: f64, lambda4: f64, audit: bool) -> Result<LossReport> {
    let w = &cfg.loss;
    p.model.zero_grad();
    let Some((xt, tl)) = &batch.target else {
        let (logits, cache) = p.model.fer_forward(&batch.x, Mode::Train)?;
        let cls = classification_loss(&logits, &batch.labels)?;
        p.model.backward(&cache, Some(&cls.grad), None)?;
        p.model.track(&cache);
        p.opt_g.step(&mut p.model, lr);
        return Ok(LossReport { cls: cls.value, total: cls.value, lambda4, ..Default::default() });
    };
    let disc = p.disc.as_mut().expect("synthesis runs have a discriminator");

    let (out, cache) = p.model.joint_forward_labels(&batch.x, tl, Mode::Train)?;
    let synth = out.synth.as_ref().expect("synthesis requested");
    if !synth.all_finite() {
        return Err(Error::non_finite("synthesized image"));
    }

    // discriminator update on real targets vs detached fakes
    let g_hash = audit.then(|| param_hash(&p.model));
    disc.zero_grad();
    let gan_d = gan_loss_discriminator(disc, (xt, tl), (synth, tl))?;
    p.opt_d.step(disc, lr);
    if let Some(h) = g_hash {
        if h != param_hash(&p.model) {
            return Err(input_err!("audit: discriminator update changed generator parameters"));
        }
    }

    // generator + classifier update
    let d_hash = audit.then(|| param_hash(disc));
    let cls = classification_loss(&out.logits, &batch.labels)?;
    let gan = gan_loss_generator(disc, (synth, tl))?;
    let rec = reconstruction_loss(synth, xt)?;
    let idt = match (&mut p.embedder, lambda4 > 0.0) {
        (Some(e), true) => Some(identity_loss(e.as_mut(), synth, xt)?),
        _ => None,
    };
    let (back, cyc_cache) = p.model.generate_fwd(synth, &batch.labels, Mode::Train)?;
    let cyc = reconstruction_loss(&back, &batch.x)?;
    let d_cyc = p.model.generate_bwd(cyc_cache, &cyc.grad.scale(w.lambda3 as f32))?;

    let mut d_synth = gan.grad.scale(w.lambda1 as f32);
    d_synth.add_assign(&rec.grad.scale(w.lambda2 as f32))?;
    d_synth.add_assign(&d_cyc)?;
    if let Some(i) = &idt {
        d_synth.add_assign(&i.grad.scale(lambda4 as f32))?;
    }
    p.model.backward(&cache, Some(&cls.grad), Some(&d_synth))?;
    p.model.track(&cache);
    p.opt_g.step(&mut p.model, lr);
    if let Some(h) = d_hash {
        if h != param_hash(disc) {
            return Err(input_err!("audit: generator update changed discriminator parameters"));
        }
    }

    let comps = LossComponents {
        cls: cls.value,
        gan_g: gan.value,
        rec: rec.value,
        cyc: cyc.value,
        idt: idt.map_or(0.0, |i| i.value),
    };
    let total = comps.cls + w.lambda1 * comps.gan_g + w.lambda2 * comps.rec + w.lambda3 * comps.cyc + lambda4 * comps.idt;
    Ok(LossReport {
        cls: comps.cls,
        gan_g: comps.gan_g,
        gan_d,
        rec: comps.rec,
        cyc: comps.cyc,
        idt: comps.idt,
        total,
        lambda4,
    })
}

/// Train from scratch on `train` (canvas-size images). `eval`, when given, is
/// scored every `eval_every` epochs. With `out_dir`, periodic checkpoints and
/// the final `model.ckpt` are written there.
pub fn train(cfg: &TrainConfig, train: &[Sample], eval: Option<&[Sample]>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(config_err!("{}", errs.join("; ")));
    }
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| config_err!("thread pool: {e}"))?;
        pool.install(|| train_inner(cfg, train, eval, out_dir, None))
    } else {
        train_inner(cfg, train, eval, out_dir, None)
    }
}

/// As [`train`], starting from an existing model instead of a fresh one.
pub fn train_from(
    cfg: &TrainConfig,
    init: FersnetModel<f32>,
    train: &[Sample],
    eval: Option<&[Sample]>,
) -> Result<TrainOutcome> {
    train_inner(cfg, train, eval, None, Some(init))
}

fn train_inner(
    cfg: &TrainConfig,
    train: &[Sample],
    eval: Option<&[Sample]>,
    out_dir: Option<&Path>,
    init: Option<FersnetModel<f32>>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    if train.len() < 2 {
        return Err(input_err!("training set needs at least two samples, got {}", train.len()));
    }
    if let Some(e) = eval {
        if e.is_empty() {
            return Err(input_err!("evaluation set is empty"));
        }
    }
    let model = match init {
        Some(m) => m,
        None => FersnetModel::new(cfg.arch.clone(), &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 20, 0)))?,
    };
    let synthesis = model.has_synthesis();
    let pairing = if synthesis { Some(Pairing::new(train, cfg.arch.classes)?) } else { None };
    let disc = synthesis.then(|| {
        Discriminator::new(
            cfg.arch.in_channels,
            cfg.arch.classes,
            cfg.discriminator_widths(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 21, 0)),
        )
    });
    let wants_idt = synthesis && (cfg.loss.lambda4_start > 0.0 || cfg.loss.lambda4_end > 0.0);
    let embedder = if wants_idt { Some(build_identity_embedder(cfg, train)?) } else { None };
    let mut players = Players { model, disc, opt_g: Adam::default(), opt_d: Adam::default(), embedder };

    let batch = cfg.batch_size.min(train.len());
    let per_epoch = epoch_batches(train.len(), batch, cfg.seed, 0).len();
    let total_steps = per_epoch * cfg.epochs;
    let mut history = RunHistory::default();
    let mut last_good = players.model.clone();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let lambda4 = lambda4_schedule(epoch, cfg.epochs, &cfg.loss)?;
        for idx in epoch_batches(train.len(), batch, cfg.seed, epoch) {
            let lr = cosine_lr(global, total_steps - 1, cfg.lr_max, cfg.lr_min)?;
            let b = assemble(train, &idx, pairing.as_ref(), cfg, derive_seed(cfg.seed, 32, global as u64))?;
            let report = step(&mut players, &b, cfg, lr, lambda4, cfg.audit)
                .and_then(|r| {
                    let c = LossComponents { cls: r.cls, gan_g: r.gan_g, rec: r.rec, cyc: r.cyc, idt: r.idt };
                    total_generator_loss(&c, &cfg.loss, epoch, cfg.epochs)?;
                    Ok(r)
                })
                .map_err(|e| diverged(e, global, &last_good, out_dir))?;
            if cfg.audit && synthesis {
                history.audited_updates += 2;
            }
            history.rows.push(StepRow { step: global, epoch, lr, report });
            global += 1;
        }
        last_good = players.model.clone();
        if let (Some(e), true) = (eval, cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
            history.epoch_eval.push(EpochEval { epoch, accuracy: evaluate_fer(&players.model, e, &cfg.data)? });
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let p = dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", epoch + 1));
                save_model(&p, &players.model, serde_json::json!({ "epoch": epoch + 1 }))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("model.ckpt");
        save_model(&p, &players.model, serde_json::json!({ "epochs": cfg.epochs, "seed": cfg.seed }))?;
        history.checkpoint = Some(p);
    }
    history.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { model: players.model, discriminator: players.disc, history })
}
